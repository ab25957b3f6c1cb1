"""Finite-difference verification of analytic gradients.

Run on float64 graphs; float32 has too little headroom for central
differences to be a meaningful oracle.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericFaultError


def grad_check(graph, loss, inputs=None, eps=1e-5, samples_per_leaf=20, seed=0, leaves=None):
    """Max relative error between analytic and central-difference gradients.

    Samples up to ``samples_per_leaf`` coordinates of every trainable leaf
    (all coordinates when the leaf is small). Relative error is
    ``|analytic - cd| / (|analytic| + |cd| + 1e-12)``.
    """
    if graph.dtype != np.float64:
        raise ValueError("grad_check requires a float64 graph")
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    inputs = dict(inputs or {})
    analytic = graph.backward(loss, inputs=inputs if inputs else None)
    rng = np.random.default_rng(seed)
    check = leaves if leaves is not None else [n for n, l in graph.leaves.items() if l.requires_grad]

    worst = 0.0
    for name in check:
        base = inputs.get(name, graph.leaves[name].value).astype(np.float64).copy()
        flat = base.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= samples_per_leaf else rng.choice(n, size=samples_per_leaf, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(graph.evaluate(inputs={**inputs, name: base}, outputs=[loss])[0])
            flat[i] = orig - eps
            lm = float(graph.evaluate(inputs={**inputs, name: base}, outputs=[loss])[0])
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericFaultError(f"non-finite finite-difference probe on leaf {name!r}")
            cd = (lp - lm) / (2 * eps)
            an = float(analytic[name].reshape(-1)[i])
            err = abs(an - cd) / (abs(an) + abs(cd) + 1e-12)
            if err > worst:
                worst = err
    return worst
