"""ReLU backward rules: vanilla gradient, guided backpropagation, rectified gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError

KINDS = ("vanilla", "guided", "rectified")
DEFAULT_PERCENTILE = 98.0


@dataclass(frozen=True)
class BackpropRule:
    """How gradients pass through a ReLU.

    ``tau`` (absolute threshold) and ``percentile`` are mutually exclusive
    and only meaningful for the rectified rule. A percentile ``q`` sets the
    threshold per layer and per sample to the q-th percentile of the
    elementwise products ``relu(x) * R``.
    """

    kind: str = "vanilla"
    tau: float | None = None
    percentile: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown backprop rule {self.kind!r}; expected one of {KINDS}")
        if self.kind == "rectified":
            if (self.tau is None) == (self.percentile is None):
                raise ValueError("rectified rule needs exactly one of tau or percentile")
            if self.percentile is not None and not 0.0 <= self.percentile <= 100.0:
                raise ValueError(f"percentile must lie in [0, 100], got {self.percentile}")
        elif self.tau is not None or self.percentile is not None:
            raise ValueError(f"{self.kind} rule takes no threshold")

    @classmethod
    def vanilla(cls):
        return cls("vanilla")

    @classmethod
    def guided(cls):
        return cls("guided")

    @classmethod
    def rectified(cls, tau=None, percentile=None):
        if tau is None and percentile is None:
            percentile = DEFAULT_PERCENTILE
        return cls("rectified", tau=None if tau is None else float(tau),
                   percentile=None if percentile is None else float(percentile))

    @property
    def label(self):
        if self.kind != "rectified":
            return self.kind
        if self.tau is not None:
            return f"rectified(tau={self.tau:g})"
        return f"rectified(q={self.percentile:g})"

    def to_dict(self):
        return {"kind": self.kind, "tau": self.tau, "percentile": self.percentile}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tau=d.get("tau"), percentile=d.get("percentile"))


VANILLA = BackpropRule.vanilla()
GUIDED = BackpropRule.guided()


def relu_backward(pre_activation, upstream, rule: BackpropRule = VANILLA):
    """Gradient reaching a ReLU's input under ``rule``.

    ``pre_activation`` is the ReLU input x, ``upstream`` the gradient R
    arriving at its output. Zero pre-activations are gated off (strict x > 0)
    for every rule. For percentile thresholds the leading axis is the batch
    axis and the threshold is computed per sample.
    """
    x = np.asarray(pre_activation)
    r = np.asarray(upstream)
    if x.shape != r.shape:
        raise ShapeError(f"relu_backward: pre-activation shape {x.shape} != upstream shape {r.shape}")
    active = x > 0
    if rule.kind == "vanilla":
        mask = active
    elif rule.kind == "guided":
        mask = active & (x * r > 0)
    else:
        prod = np.where(active, x * r, 0)
        if rule.tau is not None:
            tau = rule.tau
        else:
            flat = prod.reshape(prod.shape[0], -1) if prod.ndim > 1 else prod.reshape(1, -1)
            tau = np.percentile(flat, rule.percentile, axis=1)
            tau = tau.astype(prod.dtype).reshape((-1,) + (1,) * (prod.ndim - 1)) if prod.ndim > 1 else tau[0]
        mask = active & (prod > tau)
    return np.where(mask, r, 0).astype(r.dtype, copy=False)
