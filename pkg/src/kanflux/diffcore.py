"""Differentiable-layer contract, parameter store, and linear-solve adjoint.

Everything downstream (splines, encoders, decoders) implements the small
Layer protocol defined here: a deterministic forward that returns a cache,
and a backward that turns an upstream gradient into input/parameter
gradients. Gradients are hand-derived per layer; there is no tape.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lu_factor, lu_solve

PIVOT_TOL = 1e-12


class SingularMatrix(Exception):
    """LU factorization hit a pivot below tolerance (unphysical parameters)."""


class NonFiniteGradient(Exception):
    """A gradient (analytic or numeric) came out NaN/Inf."""


class ShapeMismatch(Exception):
    pass


class ParamStore:
    """Flat registry of named parameter arrays with accumulated gradients.

    Each entry carries an optional learning-rate multiplier (default 1)
    and a weight-decay flag (biases and global scalars opt out).
    Mutation is single-threaded by contract.
    """

    def __init__(self):
        self.values = {}
        self.grads = {}
        self.lr_multiplier = {}
        self.weight_decay = {}

    def register(self, name, value, lr_multiplier=1.0, weight_decay=True):
        if name in self.values:
            raise ValueError(f"duplicate parameter name: {name}")
        if lr_multiplier <= 0:
            raise ValueError("lr_multiplier must be positive")
        value = np.asarray(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.lr_multiplier[name] = float(lr_multiplier)
        self.weight_decay[name] = bool(weight_decay)
        return value

    def accumulate(self, name, grad):
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.values[name].shape:
            raise ShapeMismatch(
                f"grad for {name}: {grad.shape} != {self.values[name].shape}")
        self.grads[name] += grad

    def zero_grads(self):
        for g in self.grads.values():
            g.fill(0.0)

    def names(self):
        return list(self.values.keys())


class Layer:
    """Forward/backward contract.

    forward(inputs) -> (outputs, cache); backward(cache, upstream) ->
    gradient wrt inputs, accumulating parameter gradients into the store.
    Subclasses with no parameters may ignore the store.
    """

    def forward(self, inputs):
        raise NotImplementedError

    def backward(self, cache, upstream):
        raise NotImplementedError


def solve_linear(M, b):
    """Solve M y = b by LU with partial pivoting; returns (y, cache).

    The cache holds the factorization for the adjoint pass. Raises
    SingularMatrix when any pivot magnitude falls below PIVOT_TOL.
    """
    M = np.asarray(M, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = M.shape[0]
    if M.shape != (n, n) or b.shape != (n,):
        raise ShapeMismatch(f"solve_linear: M {M.shape}, b {b.shape}")
    if not (np.all(np.isfinite(M)) and np.all(np.isfinite(b))):
        raise SingularMatrix("non-finite entries in linear system")
    lu, piv = lu_factor(M, check_finite=False)
    if np.min(np.abs(np.diag(lu))) < PIVOT_TOL:
        raise SingularMatrix(
            f"pivot below {PIVOT_TOL:g} during LU factorization")
    y = lu_solve((lu, piv), b, check_finite=False)
    cache = {"lu": lu, "piv": piv, "y": y}
    return y, cache


def solve_linear_vjp(cache, upstream):
    """Adjoint of solve_linear: grad_b = M^-T g, grad_M = -grad_b y^T."""
    upstream = np.asarray(upstream, dtype=np.float64)
    grad_b = lu_solve((cache["lu"], cache["piv"]), upstream, trans=1,
                      check_finite=False)
    grad_M = -np.outer(grad_b, cache["y"])
    return grad_M, grad_b


def solve_linear_refined(M, b):
    """One step of iterative refinement on top of solve_linear."""
    y, cache = solve_linear(M, b)
    r = b - M @ y
    dy = lu_solve((cache["lu"], cache["piv"]), r, check_finite=False)
    cache["y"] = y + dy
    return y + dy, cache


def _rel_err(a, b):
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return np.max(np.abs(a - b) / denom) if a.size else 0.0


def finite_difference_check(forward_fn, args, eps=1e-5, seed=0):
    """Check hand-derived gradients against central differences.

    forward_fn(args) must return (output_array, grad_fn) where
    grad_fn(upstream) returns a list of gradients, one per entry of args.
    The output is scalar-reduced by a fixed random projection so a single
    backward pass suffices. Returns max relative error per argument.

    eps must lie in [1e-7, 1e-3].
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps out of [1e-7, 1e-3]")
    args = [np.asarray(a, dtype=np.float64) for a in args]
    out, grad_fn = forward_fn(args)
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(out.shape)
    analytic = grad_fn(proj)
    report = []
    for k, a in enumerate(args):
        g_ana = np.asarray(analytic[k], dtype=np.float64)
        g_num = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g_num.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = float(np.sum(proj * forward_fn(args)[0]))
            flat[idx] = orig - eps
            dn = float(np.sum(proj * forward_fn(args)[0]))
            flat[idx] = orig
            gflat[idx] = (up - dn) / (2 * eps)
        if not (np.all(np.isfinite(g_ana)) and np.all(np.isfinite(g_num))):
            raise NonFiniteGradient(f"argument {k}")
        report.append(_rel_err(g_ana, g_num))
    return report
