"""Full model assemblies: encoder -> constraint -> process decoder.

Three wirings share one interface: the respiration hybrid (latent base
respiration + global temperature sensitivity), the soil hybrid (four
latent pool-and-flux parameters), and a pure network that predicts the
labels directly with no constraint or decoder. Each exposes
forward/backward over raw (unstandardized) feature batches plus the
auxiliary inputs its decoder needs, and JSON-compatible serialization.
"""

from __future__ import annotations

import numpy as np

from . import constraint as cons
from . import data as datamod
from . import decoder as dec
from .diffcore import ParamStore
from .encoder import KanNetwork, LinearModel, MlpNetwork


def build_encoder(kind, n_in, n_out, input_domains, store, seed,
                  kan_options=None, mlp_hidden=(16,), mlp_options=None):
    kan_options = dict(kan_options or {})
    mlp_options = dict(mlp_options or {})
    if kind == "kan1":
        return KanNetwork([n_in, n_out], input_domains, store=store,
                          seed=seed, **kan_options)
    if kind == "kan2":
        hidden = kan_options.pop("hidden", 8)
        return KanNetwork([n_in, hidden, n_out], input_domains, store=store,
                          seed=seed, **kan_options)
    if kind == "mlp":
        return MlpNetwork([n_in, *mlp_hidden, n_out], store=store, seed=seed,
                          **mlp_options)
    if kind == "linear":
        return LinearModel(n_in, n_out, store=store, seed=seed)
    raise ValueError(f"unknown encoder kind: {kind}")


def encoder_from_dict(d, store, prefix="enc"):
    if d["type"] == "kan":
        return KanNetwork.from_dict(d, store=store, prefix=prefix)
    if d["type"] == "mlp":
        return MlpNetwork.from_dict(d, store=store, prefix=prefix)
    if d["type"] == "linear":
        return LinearModel.from_dict(d, store=store, prefix=prefix)
    raise ValueError(d["type"])


class BaseModel:
    """Shared plumbing: standardization, encoder pass, constraint pass."""

    def __init__(self, encoder, spec, standardizer, store):
        self.encoder = encoder
        self.spec = spec
        self.standardizer = standardizer
        self.store = store

    @property
    def is_kan(self):
        return isinstance(self.encoder, KanNetwork)

    def encode(self, X_raw):
        Xs = self.standardizer.transform(X_raw)
        p_tilde, enc_cache = self.encoder.forward(Xs)
        return p_tilde, enc_cache

    def latent(self, X_raw):
        """Constrained latent parameters for evaluation."""
        p_tilde, _ = self.encode(X_raw)
        p, _ = cons.constrain(self.spec, p_tilde)
        return p

    def latent_fn(self):
        return lambda X_raw: self.latent(X_raw)


class RespirationModel(BaseModel):
    """Latent base respiration from features; observed respiration through
    the Q10 decoder driven by raw air temperature."""

    kind = "respiration"

    def __init__(self, encoder, spec, standardizer, store, resp_decoder):
        super().__init__(encoder, spec, standardizer, store)
        self.decoder = resp_decoder

    @classmethod
    def build(cls, encoder_kind, standardizer, seed, constraint_kind="relu",
              lambda_param=1.0, rb_range=(0.0, 10.0), q10_init=0.5,
              q10_lr_multiplier=100.0, kan_options=None, mlp_hidden=(16, 16)):
        store = ParamStore()
        n_in = len(datamod.RESPIRATION_FEATURES)
        domains = [(-3.0, 3.0)] * n_in
        encoder = build_encoder(encoder_kind, n_in, 1, domains, store, seed,
                                kan_options=kan_options,
                                mlp_hidden=mlp_hidden)
        rb_range = rb_range if constraint_kind in cons.RANGE_KINDS else None
        spec = cons.ConstraintSpec([constraint_kind], [rb_range],
                                   lambda_param=lambda_param)
        decoder = dec.RespirationDecoder(
            store, q10_init=q10_init, q10_lr_multiplier=q10_lr_multiplier)
        return cls(encoder, spec, standardizer, store, decoder)

    def aux(self, dataset, idx):
        return {"ta": dataset.feature("ta")[idx]}

    def forward(self, X_raw, aux):
        p_tilde, enc_cache = self.encode(X_raw)
        p, dp = cons.constrain(self.spec, p_tilde)
        reco, dec_cache = self.decoder.forward(p[:, 0], aux["ta"])
        cache = {"enc": enc_cache, "p_tilde": p_tilde, "dp": dp,
                 "dec": dec_cache}
        return reco[:, None], cache

    def backward(self, cache, grad_pred, edge_out_grads=None,
                 extra_ptilde_grad=None):
        grad_rb = self.decoder.backward(cache["dec"], grad_pred[:, 0])
        grad_ptilde = grad_rb[:, None] * cache["dp"]
        if extra_ptilde_grad is not None:
            grad_ptilde = grad_ptilde + extra_ptilde_grad
        if self.is_kan:
            return self.encoder.backward(cache["enc"], grad_ptilde,
                                         edge_out_grads)
        return self.encoder.backward(cache["enc"], grad_ptilde)

    def to_dict(self):
        return {"kind": self.kind, "encoder": self.encoder.to_dict(),
                "constraint": self.spec.to_dict(),
                "standardizer": self.standardizer.to_dict(),
                "raw_q10": self.decoder.raw_q10.tolist()}

    @classmethod
    def from_dict(cls, d):
        store = ParamStore()
        encoder = encoder_from_dict(d["encoder"], store)
        spec = cons.ConstraintSpec.from_dict(d["constraint"])
        std = datamod.Standardizer.from_dict(d["standardizer"])
        decoder = dec.RespirationDecoder(store)
        decoder.raw_q10[...] = np.asarray(d["raw_q10"])
        return cls(encoder, spec, std, store, decoder)


class SoilModel(BaseModel):
    """Four latent pool-and-flux parameters; SOC labels through the
    steady-state decoder."""

    kind = "soil"

    def __init__(self, encoder, spec, standardizer, store, soil_decoder):
        super().__init__(encoder, spec, standardizer, store)
        self.decoder = soil_decoder

    @classmethod
    def build(cls, encoder_kind, standardizer, seed, pool_cfg,
              observed_depths, prior_ranges=None,
              constraint_kind="hardsigmoid", lambda_param=1000.0,
              kan_options=None, mlp_hidden=(128, 128)):
        if prior_ranges is None:
            prior_ranges = datamod.DEFAULT_SOIL_PRIOR_RANGES
        store = ParamStore()
        n_in = len(datamod.SOIL_FEATURES)
        n_p = len(prior_ranges)
        domains = [(-3.0, 3.0)] * n_in
        encoder = build_encoder(encoder_kind, n_in, n_p, domains, store,
                                seed, kan_options=kan_options,
                                mlp_hidden=mlp_hidden)
        kinds = [constraint_kind] * n_p
        ranges = [tuple(r) for r in prior_ranges]
        if constraint_kind not in cons.RANGE_KINDS:
            ranges = [None] * n_p
        spec = cons.ConstraintSpec(kinds, ranges, lambda_param=lambda_param)
        soil = dec.SoilDecoder(pool_cfg, observed_depths)
        return cls(encoder, spec, standardizer, store, soil)

    def aux(self, dataset, idx):
        rows = dataset.features[idx]
        return {"forcings": [datamod.soil_forcing_from_features(r)
                             for r in rows]}

    def forward(self, X_raw, aux):
        p_tilde, enc_cache = self.encode(X_raw)
        p, dp = cons.constrain(self.spec, p_tilde)
        preds, dec_cache = self.decoder.forward(p, aux["forcings"])
        cache = {"enc": enc_cache, "p_tilde": p_tilde, "dp": dp,
                 "dec": dec_cache}
        return preds, cache

    def backward(self, cache, grad_pred, edge_out_grads=None,
                 extra_ptilde_grad=None):
        grad_p = self.decoder.backward(cache["dec"], grad_pred)
        grad_ptilde = grad_p * cache["dp"]
        if extra_ptilde_grad is not None:
            grad_ptilde = grad_ptilde + extra_ptilde_grad
        if self.is_kan:
            return self.encoder.backward(cache["enc"], grad_ptilde,
                                         edge_out_grads)
        return self.encoder.backward(cache["enc"], grad_ptilde)

    def to_dict(self):
        return {"kind": self.kind, "encoder": self.encoder.to_dict(),
                "constraint": self.spec.to_dict(),
                "standardizer": self.standardizer.to_dict(),
                "pool_flux": self.decoder.cfg.to_dict(),
                "observed_depths": self.decoder.observed_depths.tolist()}

    @classmethod
    def from_dict(cls, d):
        store = ParamStore()
        encoder = encoder_from_dict(d["encoder"], store)
        spec = cons.ConstraintSpec.from_dict(d["constraint"])
        std = datamod.Standardizer.from_dict(d["standardizer"])
        cfg = dec.PoolFluxConfig.from_dict(d["pool_flux"])
        soil = dec.SoilDecoder(cfg, d["observed_depths"])
        return cls(encoder, spec, std, store, soil)


class PureModel(BaseModel):
    """Direct feature -> label network; no constraint, no decoder."""

    kind = "pure"

    def __init__(self, encoder, standardizer, store, n_labels):
        spec = cons.ConstraintSpec(["identity"] * n_labels)
        super().__init__(encoder, spec, standardizer, store)
        self.n_labels = n_labels

    @classmethod
    def build(cls, encoder_kind, standardizer, seed, n_features, n_labels,
              kan_options=None, mlp_hidden=(16, 16)):
        store = ParamStore()
        domains = [(-3.0, 3.0)] * n_features
        encoder = build_encoder(encoder_kind, n_features, n_labels, domains,
                                store, seed, kan_options=kan_options,
                                mlp_hidden=mlp_hidden)
        return cls(encoder, standardizer, store, n_labels)

    def aux(self, dataset, idx):
        return {}

    def forward(self, X_raw, aux):
        out, enc_cache = self.encode(X_raw)
        return out, {"enc": enc_cache,
                     "p_tilde": np.zeros((out.shape[0],
                                          self.spec.n_params)),
                     "dp": None}

    def backward(self, cache, grad_pred, edge_out_grads=None,
                 extra_ptilde_grad=None):
        if self.is_kan:
            return self.encoder.backward(cache["enc"], grad_pred,
                                         edge_out_grads)
        return self.encoder.backward(cache["enc"], grad_pred)

    def to_dict(self):
        return {"kind": self.kind, "encoder": self.encoder.to_dict(),
                "standardizer": self.standardizer.to_dict(),
                "n_labels": self.n_labels}

    @classmethod
    def from_dict(cls, d):
        store = ParamStore()
        encoder = encoder_from_dict(d["encoder"], store)
        std = datamod.Standardizer.from_dict(d["standardizer"])
        return cls(encoder, std, store, d["n_labels"])


def model_from_dict(d):
    return {"respiration": RespirationModel, "soil": SoilModel,
            "pure": PureModel}[d["kind"]].from_dict(d)
