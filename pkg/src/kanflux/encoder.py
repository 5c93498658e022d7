"""Encoder variants and their sparsity regularizers.

KanNetwork stacks layers whose edges are learnable spline activations; a
node's output is its bias plus the sum of incoming edge outputs. Edge
importance scores attribute output variance to individual edges (top-down
recursion over layers); the entropy and L1 losses act on those scores to
sparsify the network. MlpNetwork and LinearModel are the black-box
baselines run through the same training harness.
"""

from __future__ import annotations

import logging

import numpy as np

from .diffcore import ParamStore, ShapeMismatch
from .spline import (SplineGrid, base_function, smoothness_penalty,
                     PenaltyUndefined)

log = logging.getLogger(__name__)

EPS_DEV = 1e-12


class DegenerateBatch(Exception):
    """Edge scores need batch size >= 2."""


class WrongDepth(Exception):
    """Operation defined only for 1-layer KANs."""


class KanLayer:
    """n_in x n_out grid of spline edges plus per-output bias.

    Every input node has one knot grid shared by its outgoing edges;
    coefficients are stored as (n_in, n_out, G).
    """

    def __init__(self, grids, n_out, base_kind, store, prefix, rng,
                 coeff_std=0.1):
        self.grids = list(grids)
        self.n_in = len(self.grids)
        self.n_out = int(n_out)
        self.base_kind = base_kind
        G = self.grids[0].num_coeffs
        for g in self.grids:
            if g.num_coeffs != G:
                raise ValueError("all grids in a layer must share G")
        self.G = G
        init_w = 1.0 if base_kind == "identity" else 0.0
        self.coeffs = store.register(
            f"{prefix}.coeffs",
            rng.normal(0.0, coeff_std, size=(self.n_in, self.n_out, G)))
        self.base_weight = store.register(
            f"{prefix}.base_weight",
            np.full((self.n_in, self.n_out), init_w))
        self.bias = store.register(
            f"{prefix}.bias", np.zeros(self.n_out), weight_decay=False)
        self.prefix = prefix
        self.store = store

    def forward(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_in:
            raise ShapeMismatch(
                f"{self.prefix}: expected (*, {self.n_in}), got {X.shape}")
        n = X.shape[0]
        Bas = np.empty((n, self.n_in, self.G))
        dBas = np.empty((n, self.n_in, self.G))
        for i, g in enumerate(self.grids):
            Bas[:, i, :], dBas[:, i, :] = g.basis(X[:, i], with_derivative=True)
        base_val, base_d = base_function(self.base_kind, X)
        edge_out = (np.einsum("big,iog->bio", Bas, self.coeffs)
                    + base_val[:, :, None] * self.base_weight[None, :, :])
        out = self.bias[None, :] + edge_out.sum(axis=1)
        cache = {"X": X, "Bas": Bas, "dBas": dBas, "base_val": base_val,
                 "base_d": base_d, "edge_out": edge_out}
        return out, cache

    def backward(self, cache, upstream, edge_out_grad=None):
        """Accumulate parameter grads; return gradient wrt the layer input.

        edge_out_grad: optional (B, n_in, n_out) gradient applied directly
        to the per-edge outputs (used by the sparsity regularizers).
        """
        g_edge = np.broadcast_to(upstream[:, None, :],
                                 cache["edge_out"].shape).copy()
        if edge_out_grad is not None:
            g_edge += edge_out_grad
        self.store.accumulate(f"{self.prefix}.bias", upstream.sum(axis=0))
        self.store.accumulate(
            f"{self.prefix}.coeffs",
            np.einsum("bio,big->iog", g_edge, cache["Bas"]))
        self.store.accumulate(
            f"{self.prefix}.base_weight",
            np.einsum("bio,bi->io", g_edge, cache["base_val"]))
        dedge_dx = (np.einsum("big,iog->bio", cache["dBas"], self.coeffs)
                    + cache["base_d"][:, :, None] * self.base_weight[None, :, :])
        return (g_edge * dedge_dx).sum(axis=2)


class KanNetwork:
    """1- or 2-layer KAN encoder.

    input_domains: per-feature (lo, hi) seen in training data; hidden-layer
    grid domains default to (-1, 1). The grid layout is frozen after
    construction.
    """

    def __init__(self, widths, input_domains, store=None, prefix="kan",
                 degree=3, num_cells=30, margin_factor=2.0,
                 hidden_domain=(-1.0, 1.0), base_kinds=None, seed=0,
                 coeff_std=0.1):
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2:
            raise ValueError("widths needs at least (D, P)")
        if len(input_domains) != self.widths[0]:
            raise ValueError("one input domain per feature required")
        self.store = store if store is not None else ParamStore()
        self.prefix = prefix
        n_layers = len(self.widths) - 1
        if base_kinds is None:
            # identity base for shallow nets, zero base for deeper stacks
            base_kinds = ["identity"] * n_layers if n_layers == 1 \
                else ["zero"] * n_layers
        self.base_kinds = base_kinds
        self.input_domains = [tuple(map(float, d)) for d in input_domains]
        self.hidden_domain = tuple(map(float, hidden_domain))
        self.grid_config = {"degree": degree, "num_cells": num_cells,
                            "margin_factor": margin_factor}
        rng = np.random.default_rng(seed)
        self.layers = []
        for l in range(n_layers):
            if l == 0:
                domains = self.input_domains
            else:
                domains = [self.hidden_domain] * self.widths[l]
            grids = [SplineGrid(lo, hi, degree=degree, num_cells=num_cells,
                                margin_factor=margin_factor)
                     for lo, hi in domains]
            self.layers.append(KanLayer(
                grids, self.widths[l + 1], base_kinds[l], self.store,
                f"{prefix}.l{l}", rng, coeff_std=coeff_std))

    @property
    def n_layers(self):
        return len(self.layers)

    def forward(self, X):
        caches = []
        h = np.asarray(X, dtype=np.float64)
        for layer in self.layers:
            h, cache = layer.forward(h)
            caches.append(cache)
        return h, {"layers": caches, "out": h}

    def backward(self, cache, upstream, edge_out_grads=None):
        g = upstream
        for l in range(len(self.layers) - 1, -1, -1):
            extra = edge_out_grads[l] if edge_out_grads is not None else None
            g = self.layers[l].backward(cache["layers"][l], g, extra)
        return g

    def to_dict(self):
        return {
            "type": "kan",
            "widths": self.widths,
            "input_domains": [list(d) for d in self.input_domains],
            "hidden_domain": list(self.hidden_domain),
            "base_kinds": self.base_kinds,
            "grid_config": self.grid_config,
            "layers": [{
                "coeffs": layer.coeffs.tolist(),
                "base_weight": layer.base_weight.tolist(),
                "bias": layer.bias.tolist(),
            } for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d, store=None, prefix="kan"):
        net = cls(d["widths"], d["input_domains"], store=store, prefix=prefix,
                  hidden_domain=tuple(d["hidden_domain"]),
                  base_kinds=d["base_kinds"], **d["grid_config"])
        for layer, ld in zip(net.layers, d["layers"]):
            layer.coeffs[...] = np.asarray(ld["coeffs"])
            layer.base_weight[...] = np.asarray(ld["base_weight"])
            layer.bias[...] = np.asarray(ld["bias"])
        return net


class EdgeScoreSet:
    """Per-layer deviation statistics and the resulting importance scores.

    E[l]: (n_in, n_out) mean absolute deviation of each edge's outputs.
    N[l]: (n_out,) deviation of each node's summed input.
    A[l]: node contribution scores, A[-1] seeded by output variance.
    B[l]: edge contribution scores; e[l]: B normalized to sum 1 over the
    whole network.
    """

    def __init__(self, E, N, A, B):
        self.E = E
        self.N = N
        self.A = A
        self.B = B
        self.total = sum(float(b.sum()) for b in B)
        if self.total > 0:
            self.e = [b / self.total for b in B]
        else:
            self.e = [np.zeros_like(b) for b in B]

    @property
    def n_edges(self):
        return sum(b.size for b in self.B)

    def flat_e(self):
        return np.concatenate([e.ravel() for e in self.e])


def _absdev(x, axis=0):
    return np.mean(np.abs(x - x.mean(axis=axis, keepdims=True)), axis=axis)


def edge_scores(net, cache):
    """Top-down attribution of output variance to individual edges."""
    caches = cache["layers"]
    batch = caches[0]["X"].shape[0]
    if batch < 2:
        raise DegenerateBatch("edge scores need batch size >= 2")
    E, N = [], []
    for c in caches:
        E.append(_absdev(c["edge_out"], axis=0))
        N.append(np.maximum(_absdev(c["edge_out"].sum(axis=1), axis=0),
                            EPS_DEV))
    out = cache["out"]
    A_out = np.var(out, axis=0)  # population variance
    A = [None] * len(caches) + [A_out]
    B = [None] * len(caches)
    for l in range(len(caches) - 1, -1, -1):
        B[l] = A[l + 1][None, :] * E[l] / N[l][None, :]
        A[l] = B[l].sum(axis=1)
    return EdgeScoreSet(E, N, A, B)


def entropy_loss(scores):
    """Entropy of the normalized edge-importance distribution.

    Low entropy concentrates importance on few edges. Terms with
    importance below 1e-12 contribute zero. Returns (value, dvalue/dB) as
    per-layer arrays; the normalization total is treated as a constant
    when differentiating (detached denominator).
    """
    value = 0.0
    grads = []
    S = scores.total
    for e in scores.e:
        mask = e > EPS_DEV
        value -= float(np.sum(e[mask] * np.log(e[mask])))
        g = np.zeros_like(e)
        if S > 0:
            g[mask] = -(np.log(e[mask]) + 1.0) / S
        grads.append(g)
    return value, grads


def l1_loss(scores):
    """Sum of edge importance magnitudes (scores are nonnegative)."""
    return float(sum(b.sum() for b in scores.B))


def _absdev_vjp(x, upstream):
    """Gradient of mean-absolute-deviation over axis 0 wrt x.

    upstream has x.shape[1:]. d absdev/dx_b = (sign(x_b - mean) -
    mean_c sign(x_c - mean)) / batch.
    """
    batch = x.shape[0]
    s = np.sign(x - x.mean(axis=0, keepdims=True))
    return upstream[None, ...] * (s - s.mean(axis=0, keepdims=True)) / batch


def regularizer_edge_grads(net, cache, scores, coef_entropy, coef_l1):
    """Gradients of coef_entropy*entropy + coef_l1*L1 wrt edge outputs.

    Gradients flow through each edge's own deviation statistic E only;
    node deviations N and the variance seeds A are detached. Returns a
    per-layer list of (B, n_in, n_out) arrays.
    """
    _, d_entropy = entropy_loss(scores)
    grads = []
    for l, c in enumerate(cache["layers"]):
        dB = coef_l1 * np.ones_like(scores.B[l]) + coef_entropy * d_entropy[l]
        dE = dB * scores.A[l + 1][None, :] / scores.N[l][None, :]
        grads.append(_absdev_vjp(c["edge_out"], dE))
    return grads


def smoothness_loss(net, accumulate_grads=False, coef=1.0):
    """Sum of second-difference penalties over every edge's coefficients.

    When accumulate_grads is set, coef * d(penalty)/d(coeffs) is added to
    the store; the returned value is always unweighted.
    """
    total = 0.0
    for layer in net.layers:
        C = layer.coeffs
        if C.shape[-1] < 3:
            log.warning("smoothness penalty undefined for G=%d; treated as 0",
                        C.shape[-1])
            continue
        d2 = C[:, :, 2:] - 2.0 * C[:, :, 1:-1] + C[:, :, :-2]
        total += float(np.sum(d2 * d2))
        if accumulate_grads:
            g = np.zeros_like(C)
            g[:, :, 2:] += 2.0 * d2
            g[:, :, 1:-1] += -4.0 * d2
            g[:, :, :-2] += 2.0 * d2
            net.store.accumulate(f"{layer.prefix}.coeffs", coef * g)
    return total


def variance_fraction_importance(net, X):
    """Per-output fractions of edge-output variance, 1-layer KANs only.

    Returns (P, D): row i gives the fraction of output i's edge variance
    carried by each input feature. All-zero rows fall back to uniform.
    """
    if net.n_layers != 1:
        raise WrongDepth("variance-fraction importance needs a 1-layer KAN")
    _, cache = net.forward(X)
    edge_out = cache["layers"][0]["edge_out"]  # (B, D, P)
    var = np.var(edge_out, axis=0)             # (D, P)
    frac = var.T.copy()                        # (P, D)
    for i in range(frac.shape[0]):
        s = frac[i].sum()
        if s <= 0:
            frac[i] = 1.0 / frac.shape[1]
        else:
            frac[i] /= s
    return frac


def leaky_relu(x, slope=0.01):
    return np.where(x >= 0, x, slope * x), np.where(x >= 0, 1.0, slope)


class MlpNetwork:
    """Fully-connected baseline with leaky-ReLU, optional residual links
    and optional batch-statistics normalization on hidden layers."""

    def __init__(self, widths, store=None, prefix="mlp", seed=0,
                 residual=False, batch_norm=False, slope=0.01):
        self.widths = [int(w) for w in widths]
        self.store = store if store is not None else ParamStore()
        self.prefix = prefix
        self.residual = bool(residual)
        self.batch_norm = bool(batch_norm)
        self.slope = float(slope)
        rng = np.random.default_rng(seed)
        self.n_layers = len(self.widths) - 1
        self.W, self.b = [], []
        self.bn_gamma, self.bn_beta = [], []
        self.bn_mean, self.bn_var = [], []
        for l in range(self.n_layers):
            fan_in = self.widths[l]
            W = self.store.register(
                f"{prefix}.W{l}",
                rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(fan_in, self.widths[l + 1])))
            b = self.store.register(f"{prefix}.b{l}",
                                    np.zeros(self.widths[l + 1]),
                                    weight_decay=False)
            self.W.append(W)
            self.b.append(b)
            if self.batch_norm and l < self.n_layers - 1:
                self.bn_gamma.append(self.store.register(
                    f"{prefix}.bn_g{l}", np.ones(self.widths[l + 1]),
                    weight_decay=False))
                self.bn_beta.append(self.store.register(
                    f"{prefix}.bn_b{l}", np.zeros(self.widths[l + 1]),
                    weight_decay=False))
                self.bn_mean.append(np.zeros(self.widths[l + 1]))
                self.bn_var.append(np.ones(self.widths[l + 1]))
            else:
                self.bn_gamma.append(None)
                self.bn_beta.append(None)
                self.bn_mean.append(None)
                self.bn_var.append(None)
        self.training = True

    def forward(self, X):
        h = np.asarray(X, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.widths[0]:
            raise ShapeMismatch(
                f"{self.prefix}: expected (*, {self.widths[0]}), got {h.shape}")
        caches = []
        for l in range(self.n_layers):
            z = h @ self.W[l] + self.b[l]
            c = {"h_in": h, "z": z}
            if l < self.n_layers - 1:
                if self.bn_gamma[l] is not None:
                    if self.training:
                        mu = z.mean(axis=0)
                        var = z.var(axis=0)
                        self.bn_mean[l] = 0.9 * self.bn_mean[l] + 0.1 * mu
                        self.bn_var[l] = 0.9 * self.bn_var[l] + 0.1 * var
                    else:
                        mu, var = self.bn_mean[l], self.bn_var[l]
                    inv = 1.0 / np.sqrt(var + 1e-5)
                    zn = (z - mu) * inv
                    z = self.bn_gamma[l] * zn + self.bn_beta[l]
                    c.update(zn=zn, inv=inv, bn=True,
                             train_stats=self.training)
                a, da = leaky_relu(z, self.slope)
                if self.residual and a.shape == h.shape:
                    a = a + h
                    c["res"] = True
                c["da"] = da
                h = a
            else:
                h = z
            caches.append(c)
        return h, {"layers": caches}

    def backward(self, cache, upstream):
        g = upstream
        for l in range(self.n_layers - 1, -1, -1):
            c = cache["layers"][l]
            if l < self.n_layers - 1:
                g_res = g if c.get("res") else 0.0
                g = g * c["da"]
                if c.get("bn"):
                    zn, inv = c["zn"], c["inv"]
                    self.store.accumulate(f"{self.prefix}.bn_g{l}",
                                          (g * zn).sum(axis=0))
                    self.store.accumulate(f"{self.prefix}.bn_b{l}",
                                          g.sum(axis=0))
                    g = g * self.bn_gamma[l]
                    if c["train_stats"]:
                        n = g.shape[0]
                        g = inv * (g - g.mean(axis=0)
                                   - zn * (g * zn).mean(axis=0))
                    else:
                        g = g * inv
            else:
                g_res = 0.0
            self.store.accumulate(f"{self.prefix}.W{l}", c["h_in"].T @ g)
            self.store.accumulate(f"{self.prefix}.b{l}", g.sum(axis=0))
            g = g @ self.W[l].T + g_res
        return g

    def to_dict(self):
        return {
            "type": "mlp", "widths": self.widths, "residual": self.residual,
            "batch_norm": self.batch_norm, "slope": self.slope,
            "W": [w.tolist() for w in self.W],
            "b": [b.tolist() for b in self.b],
            "bn_gamma": [g.tolist() if g is not None else None
                         for g in self.bn_gamma],
            "bn_beta": [g.tolist() if g is not None else None
                        for g in self.bn_beta],
            "bn_mean": [m.tolist() if m is not None else None
                        for m in self.bn_mean],
            "bn_var": [v.tolist() if v is not None else None
                       for v in self.bn_var],
        }

    @classmethod
    def from_dict(cls, d, store=None, prefix="mlp"):
        net = cls(d["widths"], store=store, prefix=prefix,
                  residual=d["residual"], batch_norm=d["batch_norm"],
                  slope=d["slope"])
        for l in range(net.n_layers):
            net.W[l][...] = np.asarray(d["W"][l])
            net.b[l][...] = np.asarray(d["b"][l])
            if net.bn_gamma[l] is not None:
                net.bn_gamma[l][...] = np.asarray(d["bn_gamma"][l])
                net.bn_beta[l][...] = np.asarray(d["bn_beta"][l])
                net.bn_mean[l] = np.asarray(d["bn_mean"][l])
                net.bn_var[l] = np.asarray(d["bn_var"][l])
        return net


class LinearModel:
    """Single affine map (the Linear-Hybrid baseline)."""

    def __init__(self, n_in, n_out, store=None, prefix="linear", seed=0):
        self.store = store if store is not None else ParamStore()
        self.prefix = prefix
        rng = np.random.default_rng(seed)
        self.W = self.store.register(
            f"{prefix}.W", rng.normal(0.0, 0.1, size=(n_in, n_out)))
        self.b = self.store.register(f"{prefix}.b", np.zeros(n_out),
                                     weight_decay=False)
        self.widths = [n_in, n_out]

    def forward(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.W.shape[0]:
            raise ShapeMismatch(
                f"{self.prefix}: expected (*, {self.W.shape[0]}), "
                f"got {X.shape}")
        return X @ self.W + self.b, {"X": X}

    def backward(self, cache, upstream):
        self.store.accumulate(f"{self.prefix}.W", cache["X"].T @ upstream)
        self.store.accumulate(f"{self.prefix}.b", upstream.sum(axis=0))
        return upstream @ self.W.T

    def to_dict(self):
        return {"type": "linear", "widths": self.widths,
                "W": self.W.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d, store=None, prefix="linear"):
        net = cls(d["widths"][0], d["widths"][1], store=store, prefix=prefix)
        net.W[...] = np.asarray(d["W"])
        net.b[...] = np.asarray(d["b"])
        return net
