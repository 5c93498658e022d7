"""Evaluation metrics and curve export.

Covers fit metrics (R^2, MAE, Pearson), feature-importance
distributions (exact variance fractions for one-layer spline networks,
partial-dependence variance otherwise), KL divergence of learned
importances against ground truth, and CSV/SVG export of the learned
per-edge activation curves.
"""

from __future__ import annotations

import csv
import json
import time

import numpy as np

from . import encoder as enc
from .spline import EdgeFunction, eval_edge

KL_EPS = 1e-6
PRUNE_THRESHOLD = 0.01


class ZeroVariance(Exception):
    pass


def r_squared(pred, truth):
    pred = np.asarray(pred, float).ravel()
    truth = np.asarray(truth, float).ravel()
    ss_tot = np.sum((truth - truth.mean()) ** 2)
    if ss_tot == 0.0:
        raise ZeroVariance("truth is constant")
    return float(1.0 - np.sum((pred - truth) ** 2) / ss_tot)


def latent_r_squared(pred, truth):
    """Unweighted mean of per-parameter R^2 over the columns."""
    pred = np.atleast_2d(np.asarray(pred, float))
    truth = np.atleast_2d(np.asarray(truth, float))
    return float(np.mean([r_squared(pred[:, j], truth[:, j])
                          for j in range(truth.shape[1])]))


def mae(pred, truth):
    return float(np.mean(np.abs(np.asarray(pred, float) -
                                np.asarray(truth, float))))


def pearson(pred, truth):
    pred = np.asarray(pred, float).ravel()
    truth = np.asarray(truth, float).ravel()
    if pred.std() == 0.0 or truth.std() == 0.0:
        raise ZeroVariance("pearson undefined on constant input")
    return float(np.corrcoef(pred, truth)[0, 1])


def _normalize_rows(M):
    M = np.asarray(M, float)
    out = np.empty_like(M)
    for i, row in enumerate(M):
        s = row.sum()
        out[i] = row / s if s > 0 else np.full(row.size, 1.0 / row.size)
    return out


def pd_variance_importance(predict_fn, X, grid_points=50):
    """Partial-dependence variance importance, one row per latent param.

    For each feature the partial-dependence curve is the dataset-mean
    prediction with that feature pinned to each of grid_points
    equally-spaced quantiles; the feature's importance is the variance
    of that curve, row-normalized (uniform fallback for all-zero rows).
    """
    X = np.asarray(X, float)
    n, d = X.shape
    probe = predict_fn(X[:1])
    n_params = np.atleast_2d(probe).shape[1]
    var = np.zeros((n_params, d))
    qs = np.linspace(0.0, 1.0, grid_points)
    for j in range(d):
        grid = np.quantile(X[:, j], qs)
        curve = np.empty((grid_points, n_params))
        for g, val in enumerate(grid):
            Xp = X.copy()
            Xp[:, j] = val
            curve[g] = np.atleast_2d(predict_fn(Xp)).mean(axis=0)
        var[:, j] = curve.var(axis=0)
    return _normalize_rows(var)


def kl_divergence(true_dist, learned_dist, eps=KL_EPS):
    """KL(true || learned) per latent parameter, with additive smoothing.

    Returns (per-parameter vector, mean); rows are eps-smoothed and
    renormalized before the divergence is taken.
    """
    t = np.atleast_2d(np.asarray(true_dist, float)) + eps
    l = np.atleast_2d(np.asarray(learned_dist, float)) + eps
    t = t / t.sum(axis=1, keepdims=True)
    l = l / l.sum(axis=1, keepdims=True)
    per = np.sum(t * np.log(t / l), axis=1)
    return per, float(per.mean())


class EvalReport:
    """Container for the reported metrics of one model on one split."""

    def __init__(self, r2_observed, r2_latent, mae_observed, pearson_observed,
                 kl_per_param=None, kl_mean=None, importance_true=None,
                 importance_learned=None, runtime=0.0, config_hash="",
                 extra=None):
        self.r2_observed = r2_observed
        self.r2_latent = r2_latent
        self.mae_observed = mae_observed
        self.pearson_observed = pearson_observed
        self.kl_per_param = kl_per_param
        self.kl_mean = kl_mean
        self.importance_true = importance_true
        self.importance_learned = importance_learned
        self.runtime = runtime
        self.config_hash = config_hash
        self.extra = extra or {}

    def to_dict(self):
        def tolist(x):
            return np.asarray(x).tolist() if x is not None else None
        return {"r2_observed": self.r2_observed,
                "r2_latent": self.r2_latent,
                "mae_observed": self.mae_observed,
                "pearson_observed": self.pearson_observed,
                "kl_per_param": tolist(self.kl_per_param),
                "kl_mean": self.kl_mean,
                "importance_true": tolist(self.importance_true),
                "importance_learned": tolist(self.importance_learned),
                "runtime": self.runtime,
                "config_hash": self.config_hash,
                "extra": self.extra}

    def text(self):
        lines = [f"r2_observed       {self.r2_observed:.6f}",
                 f"mae_observed      {self.mae_observed:.6f}",
                 f"pearson_observed  {self.pearson_observed:.6f}"]
        if self.r2_latent is not None:
            lines.append(f"r2_latent         {self.r2_latent:.6f}")
        if self.kl_mean is not None:
            lines.append(f"kl_mean           {self.kl_mean:.6f}")
        for k, v in self.extra.items():
            lines.append(f"{k:<17} {v}")
        return "\n".join(lines)


def learned_importance(model, X_raw, grid_points=50):
    """Feature-importance matrix for a trained model.

    One-layer spline encoders admit exact variance fractions; everything
    else falls back to partial-dependence variance over the latent map.
    """
    if model.is_kan and model.encoder.n_layers == 1:
        Xs = model.standardizer.transform(X_raw)
        return enc.variance_fraction_importance(model.encoder, Xs)
    return pd_variance_importance(model.latent_fn(), X_raw,
                                  grid_points=grid_points)


def evaluate_model(model, dataset, test_idx, true_importance=None,
                   latent_cols=None, config_hash=""):
    """Full metric sweep on a test split; returns an EvalReport."""
    t0 = time.time()
    idx = np.asarray(test_idx)
    X = dataset.features[idx]
    y = dataset.labels[idx]
    aux = model.aux(dataset, idx)
    if hasattr(model.encoder, "training"):
        model.encoder.training = False
    pred, _ = model.forward(X, aux)
    if hasattr(model.encoder, "training"):
        model.encoder.training = True
    r2_obs = r_squared(pred, y)
    m = mae(pred, y)
    pr = pearson(pred, y)
    r2_lat = None
    if dataset.latent_truth is not None and model.kind != "pure":
        truth = dataset.latent_truth[idx]
        if latent_cols is not None:
            truth = truth[:, latent_cols]
        latents = model.latent(X)
        r2_lat = latent_r_squared(latents, truth)
    kl_per = kl_mean = learned = None
    if true_importance is not None and model.kind != "pure":
        learned = learned_importance(model, dataset.features)
        kl_per, kl_mean = kl_divergence(true_importance, learned)
    extra = {}
    if hasattr(model, "decoder") and hasattr(model.decoder, "q10"):
        extra["q10"] = model.decoder.q10
    return EvalReport(r2_obs, r2_lat, m, pr, kl_per, kl_mean,
                      true_importance, learned,
                      runtime=time.time() - t0, config_hash=config_hash,
                      extra=extra)


def export_curves(net, csv_path, svg_path=None, samples_per_edge=200,
                  X=None, prune_threshold=PRUNE_THRESHOLD):
    """Write per-edge activation curves as CSV and a simple SVG diagram.

    Each edge of the spline network is sampled over its grid's core
    domain (or the observed feature range when X is given). Importance
    per edge comes from the batch edge scores when X is available;
    otherwise all edges are marked unpruned.
    """
    importance = None
    if X is not None and X.shape[0] >= 2:
        _, cache = net.forward(X)
        scores = enc.edge_scores(net, cache)
        importance = scores.e
    rows = []
    for l, layer in enumerate(net.layers):
        for i, grid in enumerate(layer.grids):
            lo, hi = grid.lo, grid.hi
            if X is not None and l == 0:
                lo, hi = float(X[:, i].min()), float(X[:, i].max())
            xs = np.linspace(lo, hi, samples_per_edge)
            for j in range(layer.n_out):
                edge = EdgeFunction(grid, layer.coeffs[i, j],
                                    layer.base_weight[i, j], layer.base_kind)
                vals, _, _ = eval_edge(edge, xs)
                imp = (float(importance[l][i, j])
                       if importance is not None else 1.0)
                pruned = int(imp < prune_threshold)
                for x, v in zip(xs, vals):
                    rows.append((f"l{l}.e{i}.{j}", repr(float(x)),
                                 repr(float(v)), repr(imp), pruned))
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["edge", "x", "value", "importance", "pruned"])
        w.writerows(rows)
    if svg_path is not None:
        _write_svg(rows, svg_path)
    return rows


def _write_svg(rows, path, cell=120, pad=10):
    """Tiny grid-of-sparklines rendering of the exported curves."""
    by_edge = {}
    for edge, x, v, imp, pruned in rows:
        by_edge.setdefault(edge, {"pts": [], "imp": float(imp),
                                  "pruned": pruned})
        by_edge[edge]["pts"].append((float(x), float(v)))
    n = len(by_edge)
    cols = max(1, int(np.ceil(np.sqrt(n))))
    rows_n = int(np.ceil(n / cols))
    W = cols * cell + 2 * pad
    H = rows_n * cell + 2 * pad
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" '
             f'height="{H}">']
    for k, (edge, rec) in enumerate(sorted(by_edge.items())):
        cx = pad + (k % cols) * cell
        cy = pad + (k // cols) * cell
        pts = np.array(rec["pts"])
        x0, x1 = pts[:, 0].min(), pts[:, 0].max()
        v0, v1 = pts[:, 1].min(), pts[:, 1].max()
        sx = (cell - 20) / (x1 - x0 if x1 > x0 else 1.0)
        sy = (cell - 30) / (v1 - v0 if v1 > v0 else 1.0)
        path_pts = " ".join(
            f"{cx + 10 + (x - x0) * sx:.1f},"
            f"{cy + cell - 20 - (v - v0) * sy:.1f}"
            for x, v in rec["pts"])
        color = "#bbbbbb" if rec["pruned"] else "#1f77b4"
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'points="{path_pts}"/>')
        parts.append(f'<text x="{cx + 10}" y="{cy + 12}" font-size="9">'
                     f'{edge} e={rec["imp"]:.3f}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def save_report(report, path):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
