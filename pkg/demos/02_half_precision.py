# coding: utf-8

# # Half precision by hand
#
# Conversion to binary16 is done with integer bit manipulation and rounds to
# nearest, ties to even. numpy's own float16 cast is only used here to show
# the two agree.

# %%

import numpy as np

from tbedge import build_model, divergence, preset, quantize_model
from tbedge.fp16 import from_half, to_half

# %%

for v in (0.1, 1.0 / 3, 2049.0, 2051.0, 65519.0, 65520.0):
    bits = int(to_half(np.float32(v)))
    back = float(from_half(np.uint16(bits)))
    with np.errstate(over="ignore"):
        ref = float(np.float32(v).astype(np.float16))
    print(f"{v:>12} -> 0x{bits:04x} -> {back!r:<22} numpy: {ref!r}")

# 2049 sits exactly between 2048 and 2050 (spacing is 2 there); the tie goes
# to the even mantissa, 2048. 65520 is the first value that overflows to inf.

# %%

model = build_model(preset("tiny"), seed=0)
half = quantize_model(model)
print("stored bytes:", sum(p.nbytes for p in model.params.values()),
      "->", sum(p.nbytes for p in half.params.values()))

# How far are fp16 logits from fp32 ones? Random inputs, untrained weights.
rep = divergence(model, 16, seed=0, quantized=half, size=64)
print(rep.to_json())
