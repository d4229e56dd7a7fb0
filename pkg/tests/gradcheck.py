"""Whole-model finite-difference gradient check in float64."""
from collections import defaultdict

import numpy as np

from oracles import central_difference, relative_error
from tbedge.nn import build_model, tiny_spec
from tbedge.training import softmax_cross_entropy, value_and_grad


def layer_of(param_name: str) -> str:
    """``blocks.1.dw.bn.weight`` -> ``blocks.1.dw.bn``."""
    return param_name.rsplit(".", 1)[0]


def model_gradient_errors(seed: int, per_tensor: int = 3, size: int = 32, batch: int = 2, spec=None,
                          train: bool = True):
    """Max relative error per parameterized layer for one random instance.

    A fresh model, input batch and label set are drawn from ``seed``.  The
    loss is softmax cross-entropy; in train mode the norms use batch
    statistics, which is still a deterministic function of the parameters.
    """
    spec = spec or tiny_spec()
    model = build_model(spec, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    # perturb norm affine params away from (1, 0) so their gradients are generic
    for k, v in model.params.items():
        if ".bn." in k or k.endswith("bias"):
            v += 0.1 * rng.standard_normal(v.shape)
    x = rng.random((batch, 1, size, size))
    labels = np.eye(2)[rng.integers(0, 2, batch)]
    _, grads = value_and_grad(model, x, labels, train=train)

    def loss():
        return softmax_cross_entropy(model.forward(x, train=train), labels).loss

    worst = defaultdict(float)
    for name, p in model.params.items():
        flat = rng.choice(p.size, size=min(per_tensor, p.size), replace=False)
        for f in flat:
            idx = np.unravel_index(int(f), p.shape)
            fd = central_difference(loss, p, idx, h=1e-5)
            err = float(relative_error(grads[name][idx], fd, floor=1e-6))
            worst[layer_of(name)] = max(worst[layer_of(name)], err)
    return dict(worst)
