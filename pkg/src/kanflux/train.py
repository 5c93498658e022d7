"""Composite loss assembly and the optimization loop.

The loss is a supervised smooth-L1 term plus weighted regularizers:
constraint-violation penalty, edge L1, edge entropy, and spline
smoothness. Any term can be switched off for ablations, in which case
it contributes exactly zero. Optimization is Adam with decoupled weight
decay and per-parameter learning-rate multipliers; early stopping
watches the validation supervised loss and the best-validation
parameters are retained.
"""

from __future__ import annotations

import json
import logging

import numpy as np

from . import constraint as cons
from . import decoder as dec
from . import encoder as enc
from .diffcore import SingularMatrix
from .model import model_from_dict

log = logging.getLogger(__name__)

SKIPPABLE = (SingularMatrix, dec.InvalidParameter)


class NonFiniteLoss(Exception):
    pass


class TrainConfig:
    """Hyperparameters for one training run."""

    def __init__(self, lr=0.01, weight_decay=0.0, lambda_param=1.0,
                 lambda_l1=0.0, lambda_entropy=0.0, lambda_smooth=0.0,
                 epochs=100, batch_size=256, seed=0, patience=20,
                 l1_sign=1.0, use_param=True, use_l1=True, use_entropy=True,
                 use_smooth=True, decay_spline_coeffs=True,
                 sup_space="raw", lr_schedule="constant", lr_min_frac=0.01):
        for name, w in [("lambda_param", lambda_param),
                        ("lambda_l1", lambda_l1),
                        ("lambda_entropy", lambda_entropy),
                        ("lambda_smooth", lambda_smooth),
                        ("weight_decay", weight_decay)]:
            if w < 0:
                raise ValueError(f"{name} must be nonnegative")
        if batch_size < 2:
            raise ValueError("batch_size must be >= 2 (edge statistics "
                             "need within-batch deviations)")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.lambda_param = float(lambda_param)
        self.lambda_l1 = float(lambda_l1)
        self.lambda_entropy = float(lambda_entropy)
        self.lambda_smooth = float(lambda_smooth)
        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.patience = int(patience)
        self.l1_sign = float(l1_sign)
        self.use_param = bool(use_param)
        self.use_l1 = bool(use_l1)
        self.use_entropy = bool(use_entropy)
        self.use_smooth = bool(use_smooth)
        self.decay_spline_coeffs = bool(decay_spline_coeffs)
        if sup_space not in ("raw", "log", "relative", "scaled"):
            raise ValueError(f"unknown sup_space: {sup_space}")
        self.sup_space = sup_space
        if lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule: {lr_schedule}")
        self.lr_schedule = lr_schedule
        if not 0.0 < lr_min_frac <= 1.0:
            raise ValueError("lr_min_frac must lie in (0, 1]")
        self.lr_min_frac = float(lr_min_frac)

    def lr_at(self, epoch):
        """Learning rate for a given epoch under the configured schedule."""
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.lr
        t = epoch / (self.epochs - 1)
        floor = self.lr * self.lr_min_frac
        return floor + 0.5 * (self.lr - floor) * (1.0 + np.cos(np.pi * t))

    def to_dict(self):
        return dict(vars(self))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def smooth_l1(pred, target, beta=1.0):
    """Huber-style loss, mean over all entries; returns (value, grad)."""
    d = np.asarray(pred, float) - np.asarray(target, float)
    absd = np.abs(d)
    quad = absd < beta
    vals = np.where(quad, 0.5 * d * d / beta, absd - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d)) / d.size
    return float(vals.mean()), grad


def _supervised(pred, y, space):
    """Smooth-L1 in the configured comparison space.

    'relative' divides residuals by (|y| + 1) so labels spanning orders
    of magnitude carry comparable weight; 'scaled' divides each output
    column by its batch standard deviation so every column contributes
    equally; 'log' compares log1p values.
    """
    if space == "relative":
        w = 1.0 / (np.abs(y) + 1.0)
        sup, d = smooth_l1(pred * w, y * w)
        return sup, d * w
    if space == "scaled":
        w = 1.0 / (y.std(axis=0, keepdims=True) + 1e-8)
        sup, d = smooth_l1(pred * w, y * w)
        return sup, d * w
    if space == "log":
        clipped = np.maximum(pred, 0.0)
        sup, dlog = smooth_l1(np.log1p(clipped), np.log1p(y))
        dsup = dlog / (1.0 + clipped)
        dsup[pred < 0] = 0.0
        return sup, dsup
    return smooth_l1(pred, y)


def total_loss(model, X, y, aux, cfg, with_grads=False):
    """Composite loss over one batch; returns (total, per-term breakdown).

    Weighted contributions are reported so that the breakdown sums to the
    total; disabled or zero-weighted terms are exactly 0. With
    with_grads, gradients for every term are accumulated into the
    model's parameter store.
    """
    pred, cache = model.forward(X, aux)
    sup, dsup = _supervised(pred, y, cfg.sup_space)
    breakdown = {"supervised": sup, "param": 0.0, "l1": 0.0,
                 "entropy": 0.0, "smooth": 0.0}

    extra_ptilde = None
    lam_p = cfg.lambda_param if cfg.use_param else 0.0
    if lam_p > 0.0 and model.kind != "pure":
        viol, dviol = cons.violation_loss(model.spec, cache["p_tilde"])
        breakdown["param"] = lam_p * viol
        if with_grads and viol != 0.0:
            extra_ptilde = lam_p * dviol

    edge_out_grads = None
    lam_l1 = cfg.lambda_l1 if cfg.use_l1 else 0.0
    lam_ent = cfg.lambda_entropy if cfg.use_entropy else 0.0
    lam_sm = cfg.lambda_smooth if cfg.use_smooth else 0.0
    if model.is_kan:
        if lam_l1 > 0.0 or lam_ent > 0.0:
            scores = enc.edge_scores(model.encoder, cache["enc"])
            if lam_ent > 0.0:
                ent, _ = enc.entropy_loss(scores)
                breakdown["entropy"] = lam_ent * ent
            if lam_l1 > 0.0:
                breakdown["l1"] = lam_l1 * cfg.l1_sign * enc.l1_loss(scores)
            if with_grads:
                edge_out_grads = enc.regularizer_edge_grads(
                    model.encoder, cache["enc"], scores,
                    coef_entropy=lam_ent, coef_l1=lam_l1 * cfg.l1_sign)
        if lam_sm > 0.0:
            breakdown["smooth"] = lam_sm * enc.smoothness_loss(
                model.encoder, accumulate_grads=with_grads, coef=lam_sm)

    if with_grads:
        model.backward(cache, dsup, edge_out_grads=edge_out_grads,
                       extra_ptilde_grad=extra_ptilde)

    total = sum(breakdown.values())
    if not np.isfinite(total):
        raise NonFiniteLoss(f"non-finite loss: {breakdown}")
    return total, breakdown


class AdamW:
    """Adam (0.9/0.999, eps 1e-8) with decoupled weight decay and
    per-parameter learning-rate multipliers."""

    def __init__(self, store, lr, weight_decay=0.0, betas=(0.9, 0.999),
                 eps=1e-8, decay_exempt=()):
        self.store = store
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.b1, self.b2 = betas
        self.eps = float(eps)
        self.decay_exempt = tuple(decay_exempt)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.values.items()}

    def _decays(self, name):
        if not self.store.weight_decay[name]:
            return False
        return not any(name.endswith(sfx) for sfx in self.decay_exempt)

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, val in self.store.values.items():
            g = self.store.grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            lr_eff = self.lr * self.store.lr_multiplier[name]
            val -= lr_eff * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay > 0.0 and self._decays(name):
                val -= lr_eff * self.weight_decay * val

    def state_dict(self):
        return {"t": self.t,
                "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}


def _set_training(model, flag):
    if hasattr(model.encoder, "training"):
        model.encoder.training = flag


def validation_loss(model, dataset, idx, sup_space="raw"):
    """Mean squared error of predictions on a split (no regularizers),
    measured in the same comparison space as the supervised loss."""
    X = dataset.features[idx]
    y = dataset.labels[idx]
    aux = model.aux(dataset, idx)
    _set_training(model, False)
    try:
        pred, _ = model.forward(X, aux)
    finally:
        _set_training(model, True)
    if sup_space == "relative":
        w = 1.0 / (np.abs(y) + 1.0)
        return float(np.mean(((pred - y) * w) ** 2))
    if sup_space == "scaled":
        w = 1.0 / (y.std(axis=0, keepdims=True) + 1e-8)
        return float(np.mean(((pred - y) * w) ** 2))
    if sup_space == "log":
        return float(np.mean((np.log1p(np.maximum(pred, 0.0)) -
                              np.log1p(y)) ** 2))
    return float(np.mean((pred - y) ** 2))


def snapshot_params(store):
    return {k: v.copy() for k, v in store.values.items()}


def restore_params(store, snap):
    for k, v in snap.items():
        store.values[k][...] = v


def fit(model, dataset, splits, cfg, log_hook=None):
    """Mini-batch training with early stopping; returns the training log.

    splits is (train_idx, val_idx, test_idx); test indices are unused
    here. The model is left holding the best-validation parameters.
    Batches whose decoder solve fails are skipped and counted.
    """
    train_idx, val_idx = np.asarray(splits[0]), np.asarray(splits[1])
    rng = np.random.default_rng(cfg.seed)
    decay_exempt = () if cfg.decay_spline_coeffs else (".coeffs",)
    opt = AdamW(model.store, cfg.lr, cfg.weight_decay,
                decay_exempt=decay_exempt)
    records = []
    best_val = np.inf
    best_snap = snapshot_params(model.store)
    stale = 0
    skipped = 0
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        perm = rng.permutation(train_idx.size)
        term_sums = {}
        n_batches = 0
        for start in range(0, perm.size, cfg.batch_size):
            idx = train_idx[perm[start:start + cfg.batch_size]]
            if idx.size < 2:
                continue
            X = dataset.features[idx]
            y = dataset.labels[idx]
            aux = model.aux(dataset, idx)
            model.store.zero_grads()
            try:
                _, breakdown = total_loss(model, X, y, aux, cfg,
                                          with_grads=True)
            except SKIPPABLE as exc:
                skipped += 1
                log.warning("skipped batch at epoch %d: %s", epoch, exc)
                continue
            opt.step()
            for k, v in breakdown.items():
                term_sums[k] = term_sums.get(k, 0.0) + v
            n_batches += 1
        if n_batches == 0:
            raise RuntimeError("every batch failed; aborting")
        record = {"epoch": epoch,
                  **{k: v / n_batches for k, v in term_sums.items()}}
        record["total"] = sum(v / n_batches for v in term_sums.values())
        record["val_loss"] = validation_loss(model, dataset, val_idx,
                                             sup_space=cfg.sup_space)
        if hasattr(model, "decoder") and hasattr(model.decoder, "q10"):
            record["q10"] = model.decoder.q10
        if model.is_kan:
            Xs = model.standardizer.transform(dataset.features[train_idx])
            _, c = model.encoder.forward(Xs)
            try:
                record["edge_importance"] = enc.edge_scores(
                    model.encoder, c).flat_e().tolist()
            except enc.DegenerateBatch:
                pass
        records.append(record)
        if log_hook is not None:
            log_hook(record)
        if record["val_loss"] < best_val:
            best_val = record["val_loss"]
            best_snap = snapshot_params(model.store)
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    restore_params(model.store, best_snap)
    return {"records": records, "best_val": best_val,
            "skipped_batches": skipped}


def save_checkpoint(model, path, train_log=None, extra=None):
    payload = {"model": model.to_dict()}
    if train_log is not None:
        payload["train_log"] = train_log
    if extra:
        payload["extra"] = extra
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    return model_from_dict(payload["model"]), payload
