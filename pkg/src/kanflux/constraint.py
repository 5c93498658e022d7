"""Maps unconstrained encoder outputs into prior ranges.

Linear maps (hard-sigmoid, ReLU) keep the encoder interpretable: inside
the active region the constrained parameter is an affine function of the
encoder output. The violation loss supplies gradient in the saturated
regions, pushing inputs back toward the active region.
"""

from __future__ import annotations

import numpy as np

KINDS = ("hardsigmoid", "sigmoid", "relu", "softplus", "identity")
RANGE_KINDS = ("hardsigmoid", "sigmoid")


class MissingRange(Exception):
    """Constraint kind requires a [p_min, p_max] range."""


class ConstraintSpec:
    """Per-parameter constraint kinds, prior ranges, and violation weight."""

    def __init__(self, kinds, ranges=None, lambda_param=1.0):
        self.kinds = [k.lower() for k in kinds]
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown constraint kind: {k}")
        n = len(self.kinds)
        if ranges is None:
            ranges = [None] * n
        self.ranges = list(ranges)
        if lambda_param < 0:
            raise ValueError("lambda_param must be nonnegative")
        self.lambda_param = float(lambda_param)
        for k, r in zip(self.kinds, self.ranges):
            if k in RANGE_KINDS:
                if r is None:
                    raise MissingRange(f"{k} requires a (p_min, p_max) range")
                if not r[1] > r[0]:
                    raise ValueError("range requires p_max > p_min")

    @property
    def n_params(self):
        return len(self.kinds)

    def to_dict(self):
        return {"kinds": self.kinds,
                "ranges": [list(r) if r is not None else None
                           for r in self.ranges],
                "lambda_param": self.lambda_param}

    @classmethod
    def from_dict(cls, d):
        ranges = [tuple(r) if r is not None else None for r in d["ranges"]]
        return cls(d["kinds"], ranges, d["lambda_param"])


def _softplus(x):
    return np.where(x > 30, x, np.log1p(np.exp(np.minimum(x, 30))))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def constrain(spec, p_tilde):
    """Project unconstrained values into prior ranges.

    p_tilde: (batch, P). Returns (p, dp_dptilde), both (batch, P).
    Kink derivatives (hard-sigmoid at +-3, ReLU at 0) take the interior
    slope so saturation boundaries keep gradient signal.
    """
    p_tilde = np.asarray(p_tilde, dtype=np.float64)
    p = np.empty_like(p_tilde)
    dp = np.empty_like(p_tilde)
    for i, kind in enumerate(spec.kinds):
        x = p_tilde[..., i]
        if kind == "hardsigmoid":
            lo, hi = spec.ranges[i]
            slope = (hi - lo) / 6.0
            mid = (hi + lo) / 2.0
            p[..., i] = np.clip(slope * x + mid, lo, hi)
            dp[..., i] = np.where((x >= -3.0) & (x <= 3.0), slope, 0.0)
        elif kind == "sigmoid":
            lo, hi = spec.ranges[i]
            s = _sigmoid(x)
            p[..., i] = lo + (hi - lo) * s
            dp[..., i] = (hi - lo) * s * (1.0 - s)
        elif kind == "relu":
            p[..., i] = np.maximum(x, 0.0)
            dp[..., i] = np.where(x >= 0.0, 1.0, 0.0)
        elif kind == "softplus":
            p[..., i] = _softplus(x)
            dp[..., i] = _sigmoid(x)
        else:  # identity
            p[..., i] = x
            dp[..., i] = 1.0
    return p, dp


def violation_loss(spec, p_tilde):
    """Hinge penalty on inputs sitting in a zero-gradient saturation region.

    Summed over parameters, averaged over the batch. Returns
    (value, gradient wrt p_tilde).
    """
    p_tilde = np.asarray(p_tilde, dtype=np.float64)
    batch = p_tilde.shape[0] if p_tilde.ndim > 1 else 1
    x2 = np.atleast_2d(p_tilde)
    total = 0.0
    grad = np.zeros_like(x2)
    for i, kind in enumerate(spec.kinds):
        x = x2[:, i]
        if kind == "hardsigmoid":
            v = np.maximum(0.0, np.maximum(-x - 3.0, x - 3.0))
            total += float(np.sum(v))
            grad[:, i] = np.where(x > 3.0, 1.0, np.where(x < -3.0, -1.0, 0.0))
        elif kind == "relu":
            v = np.maximum(-x, 0.0)
            total += float(np.sum(v))
            grad[:, i] = np.where(x < 0.0, -1.0, 0.0)
        # sigmoid / softplus / identity have no flat region: zero loss
    value = total / batch
    grad = grad / batch
    return value, grad.reshape(p_tilde.shape)
