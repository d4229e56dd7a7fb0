# coding: utf-8

# # A short training run
#
# The synthetic corpus stands in for X-rays: "Tuberculosis" images carry one
# bright blurred blob on a textured background, "Normal" images do not.
# Ten epochs on 100 images per class takes about a minute on one core; the
# full 20-epoch run on 240 per class is what the acceptance suite checks.

# %%

import time

import numpy as np

from tbedge import TrainConfig, build_model, preset, quantize_model, synth_blob_dataset
from tbedge.metrics import evaluate
from tbedge.training import predict_scores, train

# %%

data = synth_blob_dataset(100, size=64, seed=0, ratios=(0.75, 0.25, 0.0))
print({s: data.class_counts(s) for s in ("train", "val")})

# %%

model = build_model(preset("tiny"), seed=0)
config = TrainConfig(epochs=10, batch_size=16, seed=0)
t0 = time.perf_counter()
model, history = train(model, data, config)
for rec in history:
    print({k: round(v, 4) for k, v in rec.items()})
print(f"{time.perf_counter() - t0:.1f} s")

# %%

probs, labels = predict_scores(model, data, "val")
report, roc = evaluate(probs, labels)
print(report.summary())
if roc is not None:
    print("ROC points:", len(roc.thresholds))

# %%

# Same weights, emulated fp16 inference.
probs16, _ = predict_scores(quantize_model(model), data, "val", fp16=True)
print("fp16 agrees on", np.mean(probs16.argmax(1) == probs.argmax(1)), "of val predictions")
