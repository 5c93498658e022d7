"""Uniform-knot B-spline basis, edge functions, and the second-difference
smoothness penalty.

The knot vector is uniform over a margin-extended domain: for a feature
seen in [lo, hi] and margin factor m, knots cover
[lo - m*(hi-lo), hi + m*(hi-lo)]. Outside the extended span, evaluation
continues the boundary polynomial piece (natural extrapolation), so
out-of-distribution inputs still get finite values and gradients.
"""

from __future__ import annotations

import numpy as np


class PenaltyUndefined(Exception):
    """Smoothness penalty needs at least 3 coefficients."""


class SplineGrid:
    """Uniform knot layout for one learnable activation.

    num_cells is the number of knot intervals in the extended span; the
    basis then has G = num_cells + degree functions.
    """

    def __init__(self, lo, hi, degree=3, num_cells=30, margin_factor=2.0):
        if not hi > lo:
            raise ValueError("domain requires hi > lo")
        if degree < 0 or num_cells < 1:
            raise ValueError("degree >= 0 and num_cells >= 1 required")
        if margin_factor < 0:
            raise ValueError("margin_factor must be nonnegative")
        self.lo = float(lo)
        self.hi = float(hi)
        self.degree = int(degree)
        self.num_cells = int(num_cells)
        self.margin_factor = float(margin_factor)
        span = self.hi - self.lo
        self.ext_lo = self.lo - margin_factor * span
        self.ext_hi = self.hi + margin_factor * span
        self.h = (self.ext_hi - self.ext_lo) / self.num_cells
        self.num_coeffs = self.num_cells + self.degree
        # t_i = ext_lo + (i - degree) * h, i = 0 .. G + degree
        self.knots = self.ext_lo + (
            np.arange(self.num_coeffs + self.degree + 1) - self.degree) * self.h

    def span_index(self, x):
        """Knot-interval index per point, clamped so exterior points reuse
        the boundary polynomial piece."""
        x = np.asarray(x, dtype=np.float64)
        cell = np.floor((x - self.ext_lo) / self.h).astype(np.int64)
        cell = np.clip(cell, 0, self.num_cells - 1)
        return cell + self.degree

    def basis(self, x, with_derivative=False):
        """Evaluate all G basis functions at each point of x.

        Returns (B, G) array; with_derivative additionally returns the
        (B, G) array of first derivatives. Inside the extended span the
        values are nonnegative and sum to 1.
        """
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        p, t = self.degree, self.knots
        s = self.span_index(x)
        n = x.shape[0]
        # Cox-de Boor triangle, vectorized over points (NURBS BasisFuns).
        N = np.ones((n, 1))
        left = np.empty((n, p + 1))
        right = np.empty((n, p + 1))
        low = None
        for k in range(1, p + 1):
            if k == p and with_derivative:
                low = N.copy()
            left[:, k] = x - t[s + 1 - k]
            right[:, k] = t[s + k] - x
            N_next = np.zeros((n, k + 1))
            saved = np.zeros(n)
            for r in range(k):
                temp = N[:, r] / (right[:, r + 1] + left[:, k - r])
                N_next[:, r] = saved + right[:, r + 1] * temp
                saved = left[:, k - r] * temp
            N_next[:, k] = saved
            N = N_next
        if p == 0 and with_derivative:
            low = None
        G = self.num_coeffs
        rows = np.arange(n)[:, None]
        cols = s[:, None] - p + np.arange(p + 1)[None, :]
        full = np.zeros((n, G))
        full[rows, cols] = N
        if not with_derivative:
            return full
        dfull = np.zeros((n, G))
        if p >= 1:
            # uniform knots: dB_i^p = (B_i^{p-1} - B_{i+1}^{p-1}) / h
            low_full = np.zeros((n, G + 1))
            lcols = s[:, None] - (p - 1) + np.arange(p)[None, :]
            low_full[rows, lcols] = low if p > 1 else np.ones((n, 1))
            dfull = (low_full[:, :-1] - low_full[:, 1:]) / self.h
        return full, dfull

    def to_dict(self):
        return {
            "lo": self.lo, "hi": self.hi, "degree": self.degree,
            "num_cells": self.num_cells, "margin_factor": self.margin_factor,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["lo"], d["hi"], d["degree"], d["num_cells"],
                   d["margin_factor"])


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def base_function(kind, x):
    """Residual base term added to the spline: value and d/dx."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "identity":
        return x, np.ones_like(x)
    if kind == "zero":
        return np.zeros_like(x), np.zeros_like(x)
    if kind == "smooth-gate":
        s = _sigmoid(x)
        return x * s, s + x * s * (1.0 - s)
    raise ValueError(f"unknown base kind: {kind}")


class EdgeFunction:
    """One learnable activation: base_weight * base(x) + sum_i c_i B_i(x)."""

    def __init__(self, grid, coeffs=None, base_weight=1.0, base_kind="identity"):
        self.grid = grid
        if coeffs is None:
            coeffs = np.zeros(grid.num_coeffs)
        self.coeffs = np.asarray(coeffs, dtype=np.float64)
        if self.coeffs.shape != (grid.num_coeffs,):
            raise ValueError("coeffs length must match grid.num_coeffs")
        self.base_weight = float(base_weight)
        self.base_kind = base_kind


def eval_edge(edge, x):
    """Evaluate an edge at points x.

    Returns (value, d_value/dx, d_value/dcoeffs); the coefficient gradient
    is exactly the basis matrix.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    B, dB = edge.grid.basis(x, with_derivative=True)
    base, dbase = base_function(edge.base_kind, x)
    value = edge.base_weight * base + B @ edge.coeffs
    dvalue = edge.base_weight * dbase + dB @ edge.coeffs
    return value, dvalue, B


def second_difference_matrix(G):
    """(G-2, G) operator taking coefficients to their second differences."""
    D = np.zeros((G - 2, G))
    idx = np.arange(G - 2)
    D[idx, idx] = 1.0
    D[idx, idx + 1] = -2.0
    D[idx, idx + 2] = 1.0
    return D


def smoothness_penalty(coeffs):
    """Sum of squared second differences of the coefficients; exact gradient.

    Zero on any affine coefficient sequence, so the penalty drives each
    learned activation toward a straight line without flattening it.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    G = c.shape[0]
    if G < 3:
        raise PenaltyUndefined(f"need >= 3 coefficients, got {G}")
    d2 = c[2:] - 2.0 * c[1:-1] + c[:-2]
    value = float(np.sum(d2 * d2))
    grad = np.zeros_like(c)
    grad[2:] += 2.0 * d2
    grad[1:-1] += -4.0 * d2
    grad[:-2] += 2.0 * d2
    return value, grad
