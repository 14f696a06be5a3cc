"""Central finite-difference check of vanilla backward."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import Relu
from .rules import VANILLA
from .tensor import _topo_order, backward, forward


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped_kink: int

    def __float__(self):
        return self.max_rel_error


def _relu_inputs(root):
    return [node.parents[0].values.copy() for node in _topo_order(root)
            if node.op is not None and isinstance(node.op, Relu)]


def _crosses_kink(base, perturbed, margin):
    """True if a pre-activation near zero moved, or any gate flipped."""
    for b, p in zip(base, perturbed):
        if ((b > 0) != (p > 0)).any():
            return True
        if ((np.abs(b) < margin) & (b != p)).any():
            return True
    return False


def grad_check(build, params, eps=1e-5, kink_margin=10.0):
    """Compare vanilla backward against central differences.

    ``build()`` must return a fresh scalar graph over the leaf tensors in
    ``params`` (which should hold 64-bit values). Every scalar entry of every
    parameter is perturbed by +-eps. Entries whose perturbation flips a ReLU
    gate, or moves a pre-activation lying within ``kink_margin * eps`` of
    zero, are skipped: finite differences are meaningless across a kink.

    Returns max |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    for p in params:
        if not p.values.flags.c_contiguous:
            p.values = np.ascontiguousarray(p.values)
    root = forward(build())
    backward(root, VANILLA)
    analytic = [p.grad.copy() for p in params]
    base = _relu_inputs(root)
    margin = kink_margin * eps

    worst, checked, skipped = 0.0, 0, 0
    for p, ga in zip(params, analytic):
        flat = p.values.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = forward(build())
            fp, pre_up = float(up.values), _relu_inputs(up)
            flat[i] = orig - eps
            dn = forward(build())
            fm, pre_dn = float(dn.values), _relu_inputs(dn)
            flat[i] = orig
            if _crosses_kink(base, pre_up, margin) or _crosses_kink(base, pre_dn, margin):
                skipped += 1
                continue
            fd = (fp - fm) / (2 * eps)
            an = float(gflat[i])
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            worst = max(worst, err)
            checked += 1
    return GradCheckResult(worst, checked, skipped)
