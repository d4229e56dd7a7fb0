# coding: utf-8

# # Building blocks
#
# Tensors are plain numpy arrays in NCHW layout. The dtype is the precision:
# float32 for training, float16 for stored half weights. Here we push a
# random image through the tiny preset and look at what comes out.

# %%

import numpy as np

from tbedge import build_model, preset
from tbedge.tensor import ConvParams, conv2d, pad

# %%

# A depthwise 3x3 convolution: one kernel per channel, groups == channels.
x = np.random.default_rng(0).random((1, 4, 8, 8), dtype=np.float32)
k = np.random.default_rng(1).standard_normal((4, 1, 3, 3)).astype(np.float32)
y = conv2d(x, k, params=ConvParams(stride=2, padding=1, groups=4))
print("depthwise output", y.shape, y.dtype)

# %%

# Reflect-101 padding mirrors around the edge pixel without repeating it.
row = np.arange(4, dtype=np.float32).reshape(1, 1, 1, 4)
print(pad(row, (0, 0, 3, 3), mode="reflect")[0, 0, 0])   # [3 2 1 0 1 2 3 2 1 0]

# %%

model = build_model(preset("tiny"), seed=0)
print("tiny preset:", model.num_parameters, "parameters")

logits = model.forward(np.random.default_rng(2).random((2, 1, 224, 224), dtype=np.float32))
print("logits", logits.shape)
print(logits)
