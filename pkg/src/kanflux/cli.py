"""Command-line interface.

Subcommands: generate, train, eval, gradcheck, curves. Every command is
driven by a JSON config (a file path or the name of a shipped preset)
and writes its artifacts plus a manifest into the output directory, so
any run can be replayed exactly from its manifest.
"""

import argparse
import copy
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import data
from . import decoder as dec
from . import evaluate
from . import model as mod
from . import train


class ConfigError(Exception):
    pass


EXPERIMENTS = ("respiration-linear", "respiration-nonlinear",
               "soil-synthetic", "soil-real")
ENCODERS = ("kan1", "kan2", "mlp", "linear", "pure-nn")

_TOP_KEYS = {"name", "experiment", "encoder", "encoder_options",
             "mlp_hidden", "seed", "constraint", "decoder", "data",
             "train", "eval", "out"}
_CONSTRAINT_KEYS = {"kind", "lambda_param"}
_RESP_DECODER_KEYS = {"q10_init", "q10_lr_multiplier", "rb_range"}
_SOIL_DECODER_KEYS = {"pool_flux", "observed_depths", "prior_ranges"}
_POOL_FLUX_KEYS = {"n_layers", "n_pools", "thicknesses", "tau_base",
                   "xi_q10", "input_efold_depth", "entry_fractions",
                   "tau_scaled_pools"}
_RESP_DATA_KEYS = {"n", "seed", "split_seed", "fractions", "ood_feature",
                   "ood_quantile"}
_SOIL_DATA_KEYS = {"n_sites", "seed", "relationship_seed", "noise_sigma",
                   "csv", "split"}
_SPLIT_KEYS = {"seed", "folds", "test_fold", "val_fold", "block_deg"}
_EVAL_KEYS = {"grid_points"}
_ENCODER_OPTION_KEYS = {"hidden", "num_cells", "degree", "margin_factor",
                        "base_kind", "coeff_sigma"}


def _check_keys(section, allowed, path):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path}: "
                          f"{', '.join(sorted(unknown))}")


def validate_config(cfg):
    _check_keys(cfg, _TOP_KEYS, "<top level>")
    for key in ("experiment", "encoder", "data", "train", "out"):
        if key not in cfg:
            raise ConfigError(f"config is missing required key {key!r}")
    if cfg["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment: {cfg['experiment']}")
    if cfg["encoder"] not in ENCODERS:
        raise ConfigError(f"unknown encoder: {cfg['encoder']}")
    pure = cfg["encoder"] == "pure-nn"
    if pure and ("constraint" in cfg or "decoder" in cfg):
        raise ConfigError("pure-nn configs must not carry constraint or "
                          "decoder sections")
    if not pure and "constraint" in cfg:
        _check_keys(cfg["constraint"], _CONSTRAINT_KEYS, "constraint")
    _check_keys(cfg.get("encoder_options", {}), _ENCODER_OPTION_KEYS,
                "encoder_options")
    soil = cfg["experiment"].startswith("soil")
    if "decoder" in cfg:
        if soil:
            _check_keys(cfg["decoder"], _SOIL_DECODER_KEYS, "decoder")
            _check_keys(cfg["decoder"].get("pool_flux", {}),
                        _POOL_FLUX_KEYS, "decoder.pool_flux")
        else:
            _check_keys(cfg["decoder"], _RESP_DECODER_KEYS, "decoder")
    if soil:
        _check_keys(cfg["data"], _SOIL_DATA_KEYS, "data")
        _check_keys(cfg["data"].get("split", {}), _SPLIT_KEYS, "data.split")
    else:
        _check_keys(cfg["data"], _RESP_DATA_KEYS, "data")
    _check_keys(cfg.get("eval", {}), _EVAL_KEYS, "eval")
    try:
        train.TrainConfig(**cfg["train"])
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}")
    return cfg


# ----------------------------------------------------------------------
# shipped presets: one per method x experiment cell of the synthetic
# benchmark grid

_RESP_LINEAR_DATA = {"n": 8000, "seed": 0, "split_seed": 0,
                     "ood_feature": "ta", "ood_quantile": 0.2}
_RESP_DECODER = {"q10_init": 0.5, "q10_lr_multiplier": 100.0,
                 "rb_range": [0.0, 10.0]}
_SOIL_POOL_FLUX = {"tau_base": [1.38, 5.5, 53.7],
                   "entry_fractions": [1.0, 0.0, 0.0],
                   "tau_scaled_pools": [True, True, True],
                   "input_efold_depth": 0.15, "xi_q10": 1.46}
_SOIL_DECODER = {"pool_flux": _SOIL_POOL_FLUX,
                 "observed_depths": [0.05, 0.15, 0.3, 0.5, 0.8, 1.1,
                                     1.5, 1.9],
                 "prior_ranges": [[0.05, 0.73], [0.05, 0.9],
                                  [0.12, 4.9], [0.00011, 0.0073]]}
_SOIL_DATA = {"n_sites": 1000, "seed": 0, "relationship_seed": 0,
              "noise_sigma": 0.0,
              "split": {"seed": 0, "test_fold": 0, "val_fold": 1}}

PRESETS = {
    "respiration-linear-kan1": {
        "experiment": "respiration-linear", "encoder": "kan1", "seed": 0,
        "constraint": {"kind": "relu", "lambda_param": 1.0},
        "decoder": dict(_RESP_DECODER), "data": dict(_RESP_LINEAR_DATA),
        "train": {"lr": 0.01, "weight_decay": 1e-4, "lambda_param": 1.0,
                  "lambda_l1": 0.01, "lambda_entropy": 0.01,
                  "lambda_smooth": 0.004, "epochs": 300, "patience": 60},
        "out": "runs/respiration-linear-kan1"},
    "respiration-linear-mlp-hybrid": {
        "experiment": "respiration-linear", "encoder": "mlp", "seed": 0,
        "mlp_hidden": [16, 16],
        "constraint": {"kind": "relu", "lambda_param": 1.0},
        "decoder": dict(_RESP_DECODER), "data": dict(_RESP_LINEAR_DATA),
        "train": {"lr": 0.001, "weight_decay": 1e-4, "lambda_param": 1.0,
                  "epochs": 300, "patience": 60},
        "out": "runs/respiration-linear-mlp-hybrid"},
    "respiration-linear-pure": {
        "experiment": "respiration-linear", "encoder": "pure-nn",
        "seed": 0, "mlp_hidden": [16, 16],
        "data": dict(_RESP_LINEAR_DATA),
        "train": {"lr": 0.1, "weight_decay": 0.0, "epochs": 300,
                  "patience": 60},
        "out": "runs/respiration-linear-pure"},
    "respiration-nonlinear-kan2": {
        "experiment": "respiration-nonlinear", "encoder": "kan2",
        "seed": 0, "encoder_options": {"hidden": 8},
        "constraint": {"kind": "relu", "lambda_param": 1.0},
        "decoder": dict(_RESP_DECODER), "data": dict(_RESP_LINEAR_DATA),
        "train": {"lr": 0.01, "weight_decay": 1e-4, "lambda_param": 1.0,
                  "lambda_l1": 0.001, "lambda_entropy": 0.001,
                  "lambda_smooth": 0.004, "epochs": 400, "patience": 400},
        "out": "runs/respiration-nonlinear-kan2"},
    "respiration-nonlinear-kan1": {
        "experiment": "respiration-nonlinear", "encoder": "kan1",
        "seed": 0,
        "constraint": {"kind": "relu", "lambda_param": 1.0},
        "decoder": dict(_RESP_DECODER), "data": dict(_RESP_LINEAR_DATA),
        "train": {"lr": 0.1, "weight_decay": 1e-4, "lambda_param": 1.0,
                  "lambda_l1": 0.01, "lambda_entropy": 0.01,
                  "lambda_smooth": 0.0004, "epochs": 300, "patience": 60},
        "out": "runs/respiration-nonlinear-kan1"},
    "respiration-nonlinear-mlp-hybrid": {
        "experiment": "respiration-nonlinear", "encoder": "mlp",
        "seed": 0, "mlp_hidden": [16, 16],
        "constraint": {"kind": "relu", "lambda_param": 1.0},
        "decoder": dict(_RESP_DECODER), "data": dict(_RESP_LINEAR_DATA),
        "train": {"lr": 0.001, "weight_decay": 1e-4, "lambda_param": 1.0,
                  "epochs": 400, "patience": 100},
        "out": "runs/respiration-nonlinear-mlp-hybrid"},
    "respiration-nonlinear-pure": {
        "experiment": "respiration-nonlinear", "encoder": "pure-nn",
        "seed": 0, "mlp_hidden": [16, 16],
        "data": dict(_RESP_LINEAR_DATA),
        "train": {"lr": 0.1, "weight_decay": 0.0, "epochs": 400,
                  "patience": 100},
        "out": "runs/respiration-nonlinear-pure"},
    "soil-kan1": {
        "experiment": "soil-synthetic", "encoder": "kan1", "seed": 0,
        "constraint": {"kind": "hardsigmoid", "lambda_param": 1.0},
        "decoder": copy.deepcopy(_SOIL_DECODER),
        "data": copy.deepcopy(_SOIL_DATA),
        "train": {"lr": 0.02, "weight_decay": 0.0, "lambda_param": 1.0,
                  "lambda_l1": 0.0, "lambda_entropy": 0.0,
                  "lambda_smooth": 0.0, "epochs": 3000,
                  "patience": 3000, "sup_space": "scaled",
                  "lr_schedule": "cosine", "lr_min_frac": 0.003},
        "out": "runs/soil-kan1"},
    "soil-mlp-hybrid": {
        "experiment": "soil-synthetic", "encoder": "mlp", "seed": 0,
        "mlp_hidden": [128, 128, 128],
        "constraint": {"kind": "hardsigmoid", "lambda_param": 1.0},
        "decoder": copy.deepcopy(_SOIL_DECODER),
        "data": copy.deepcopy(_SOIL_DATA),
        "train": {"lr": 0.001, "weight_decay": 1e-4, "lambda_param": 1.0,
                  "epochs": 800, "patience": 800, "sup_space": "scaled",
                  "lr_schedule": "cosine", "lr_min_frac": 0.003},
        "out": "runs/soil-mlp-hybrid"},
}


def load_config(spec):
    """Load a config from a preset name, a config file, or a manifest."""
    if spec in PRESETS:
        cfg = copy.deepcopy(PRESETS[spec])
        cfg.setdefault("name", spec)
    else:
        if not os.path.exists(spec):
            raise ConfigError(f"no such preset or config file: {spec}")
        with open(spec) as fh:
            cfg = json.load(fh)
        if "config" in cfg and "experiment" not in cfg:
            cfg = cfg["config"]            # replay from a manifest
        cfg.setdefault("name", os.path.splitext(os.path.basename(spec))[0])
    return validate_config(cfg)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ----------------------------------------------------------------------
# builders

def build_dataset(cfg):
    """Dataset plus (train, val, test) index arrays from the config."""
    d = cfg["data"]
    exp = cfg["experiment"]
    if exp.startswith("respiration"):
        kind = exp.split("-", 1)[1]
        ds = data.generate_respiration(kind, d["n"], d["seed"])
        fractions = tuple(d.get("fractions", (0.7, 0.15, 0.15)))
        tr, va, te = data.random_split(len(ds), d.get("split_seed", 0),
                                       fractions)
        if d.get("ood_feature"):
            tr = data.ood_filter_indices(ds, d["ood_feature"], tr,
                                         d.get("ood_quantile", 0.2))
        return ds, (tr, va, te)
    pool_cfg = dec.PoolFluxConfig(**cfg.get("decoder", {})
                                  .get("pool_flux", {}))
    depths = cfg.get("decoder", {}).get("observed_depths",
                                        _SOIL_DECODER["observed_depths"])
    if exp == "soil-synthetic":
        rel = data.generate_soil_relationships(
            d.get("relationship_seed", 0),
            prior_ranges=cfg.get("decoder", {}).get("prior_ranges"))
        ds = data.generate_soil_dataset(rel, d["n_sites"], pool_cfg,
                                        depths, d["seed"],
                                        noise_sigma=d.get("noise_sigma",
                                                          0.0))
    else:                                   # soil-real
        ds = data.load_csv(d["csv"], data.SOIL_FEATURES)
    sp = d.get("split", {})
    split = data.spatial_block_split(ds, block_deg=sp.get("block_deg", 2.0),
                                     folds=sp.get("folds", 5),
                                     seed=sp.get("seed", 0),
                                     test_fold=sp.get("test_fold", 0),
                                     val_fold=sp.get("val_fold", 1))
    return ds, split.masks(ds)


def build_model(cfg, dataset, train_idx):
    std = data.Standardizer.fit(dataset.features[train_idx])
    seed = int(cfg.get("seed", 0))
    kan_options = dict(cfg.get("encoder_options", {}))
    mlp_hidden = tuple(cfg.get("mlp_hidden", (16, 16)))
    if cfg["encoder"] == "pure-nn":
        return mod.PureModel.build("mlp", std, seed,
                                   dataset.n_features,
                                   dataset.labels.shape[1],
                                   mlp_hidden=mlp_hidden)
    cons_cfg = cfg.get("constraint", {})
    if cfg["experiment"].startswith("respiration"):
        dcfg = cfg.get("decoder", {})
        return mod.RespirationModel.build(
            cfg["encoder"], std, seed,
            constraint_kind=cons_cfg.get("kind", "relu"),
            lambda_param=cons_cfg.get("lambda_param", 1.0),
            rb_range=tuple(dcfg.get("rb_range", (0.0, 10.0))),
            q10_init=dcfg.get("q10_init", 0.5),
            q10_lr_multiplier=dcfg.get("q10_lr_multiplier", 100.0),
            kan_options=kan_options, mlp_hidden=mlp_hidden)
    dcfg = cfg.get("decoder", {})
    pool_cfg = dec.PoolFluxConfig(**dcfg.get("pool_flux", {}))
    return mod.SoilModel.build(
        cfg["encoder"], std, seed, pool_cfg,
        dcfg.get("observed_depths", _SOIL_DECODER["observed_depths"]),
        prior_ranges=dcfg.get("prior_ranges"),
        constraint_kind=cons_cfg.get("kind", "hardsigmoid"),
        lambda_param=cons_cfg.get("lambda_param", 1.0),
        kan_options=kan_options, mlp_hidden=mlp_hidden)


def train_config(cfg):
    tc = dict(cfg["train"])
    tc.setdefault("seed", int(cfg.get("seed", 0)))
    return train.TrainConfig(**tc)


def true_importance_of(cfg, dataset):
    """Ground-truth feature-importance rows for the synthetic tasks."""
    exp = cfg["experiment"]
    if exp == "respiration-linear":
        return np.asarray(dataset.meta["true_importance"])
    if exp == "respiration-nonlinear":
        truth = data.respiration_rb_truth(dataset)
        grid = cfg.get("eval", {}).get("grid_points", 50)
        return evaluate.pd_variance_importance(truth, dataset.features,
                                               grid_points=grid)
    if exp == "soil-synthetic":
        return np.asarray(dataset.meta["relationships"]["true_importance"])
    return None


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


def write_manifest(cfg, out_dir, extra=None):
    manifest = {"config": cfg, "config_hash": config_hash(cfg),
                "written": time.strftime("%Y-%m-%dT%H:%M:%S")}
    if extra:
        manifest.update(extra)
    _write_json(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


# ----------------------------------------------------------------------
# commands

def cmd_generate(cfg):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    ds, (tr, va, te) = build_dataset(cfg)
    data.save_csv(ds, os.path.join(out, "dataset.csv"))
    _write_json({"train": tr.tolist(), "val": va.tolist(),
                 "test": te.tolist()}, os.path.join(out, "splits.json"))
    write_manifest(cfg, out, {"dataset_meta": ds.meta,
                              "n_examples": len(ds),
                              "split_sizes": [len(tr), len(va), len(te)]})
    print(f"wrote {len(ds)} examples to {out}/dataset.csv "
          f"(train/val/test = {len(tr)}/{len(va)}/{len(te)})")
    return 0


def cmd_train(cfg):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    ds, splits = build_dataset(cfg)
    model = build_model(cfg, ds, splits[0])
    tc = train_config(cfg)
    t0 = time.time()
    result = train.fit(model, ds, splits, tc)
    elapsed = time.time() - t0
    ckpt = os.path.join(out, "checkpoint.json")
    train.save_checkpoint(model, ckpt,
                          extra={"best_val": result["best_val"],
                                 "skipped_batches":
                                     result["skipped_batches"],
                                 "seconds": elapsed,
                                 "config_hash": config_hash(cfg)})
    _write_json(result["records"], os.path.join(out, "train_log.json"))
    write_manifest(cfg, out, {"best_val": result["best_val"],
                              "epochs_run": len(result["records"]),
                              "seconds": elapsed})
    print(f"trained {len(result['records'])} epochs in {elapsed:.0f}s; "
          f"best validation loss {result['best_val']:.6g}; "
          f"checkpoint at {ckpt}")
    return 0


def cmd_eval(cfg, checkpoint=None):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    ckpt = checkpoint or os.path.join(out, "checkpoint.json")
    model, _ = train.load_checkpoint(ckpt)
    ds, (tr, va, te) = build_dataset(cfg)
    report = evaluate.evaluate_model(model, ds, te,
                                     true_importance=true_importance_of(
                                         cfg, ds),
                                     config_hash=config_hash(cfg))
    evaluate.save_report(report, os.path.join(out, "report.json"))
    text = report.text()
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(text + "\n")
    write_manifest(cfg, out, {"metrics": report.to_dict(),
                              "checkpoint": ckpt})
    print(text)
    return 0


def cmd_gradcheck(cfg, max_coords=5, eps=1e-5, tol=1e-4):
    """Central-difference check of the full training gradient, one row
    per registered parameter array.

    The sparsity losses intentionally stop part of their gradient (the
    importance normalization is treated as a constant), so this check
    runs with them disabled; the smoothness and violation terms are
    exact and stay on.
    """
    ds, (tr, va, te) = build_dataset(cfg)
    model = build_model(cfg, ds, tr)
    tc = train_config(cfg)
    tc.use_l1 = tc.use_entropy = False
    rng = np.random.default_rng(0)
    idx = tr[rng.choice(tr.size, size=3, replace=False)]
    X, y = ds.features[idx], ds.labels[idx]
    aux = model.aux(ds, idx)
    model.store.zero_grads()
    train.total_loss(model, X, y, aux, tc, with_grads=True)
    analytic = {k: v.copy() for k, v in model.store.grads.items()}

    def loss_at():
        val, _ = train.total_loss(model, X, y, aux, tc, with_grads=False)
        return val

    failures = 0
    print(f"{'parameter':40s} {'checked':>7s} {'max rel err':>12s}")
    for name in model.store.names():
        v = model.store.values[name]
        flat = v.reshape(-1)
        n_check = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=n_check, replace=False)
        worst = 0.0
        for c in coords:
            keep = flat[c]
            flat[c] = keep + eps
            up = loss_at()
            flat[c] = keep - eps
            down = loss_at()
            flat[c] = keep
            fd = (up - down) / (2.0 * eps)
            an = analytic[name].reshape(-1)[c]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, rel)
        status = "" if worst < tol else "  FAIL"
        if worst >= tol:
            failures += 1
        print(f"{name:40s} {n_check:7d} {worst:12.3e}{status}")
    if failures:
        print(f"{failures} parameter array(s) exceeded tolerance {tol}")
        return 1
    print(f"all gradients within tolerance {tol}")
    return 0


def cmd_curves(cfg, checkpoint=None):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    ckpt = checkpoint or os.path.join(out, "checkpoint.json")
    model, _ = train.load_checkpoint(ckpt)
    if not model.is_kan:
        print("curves requires a spline-network encoder", file=sys.stderr)
        return 1
    ds, (tr, va, te) = build_dataset(cfg)
    Xs = model.standardizer.transform(ds.features[tr])
    csv_path = os.path.join(out, "curves.csv")
    svg_path = os.path.join(out, "curves.svg")
    evaluate.export_curves(model.encoder, csv_path, svg_path, X=Xs)
    print(f"wrote {csv_path} and {svg_path}")
    return 0


# ----------------------------------------------------------------------

def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    for flag, key in (("no_entropy", "use_entropy"), ("no_l1", "use_l1"),
                      ("no_smooth", "use_smooth"),
                      ("no_param", "use_param")):
        if getattr(args, flag):
            cfg["train"][key] = False
    return validate_config(cfg)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="kanflux",
        description="sparse spline encoders with process-based decoders")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "eval", "gradcheck", "curves"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="config file, manifest, or preset name; "
                            f"presets: {', '.join(sorted(PRESETS))}")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--no-entropy", action="store_true")
        p.add_argument("--no-l1", action="store_true")
        p.add_argument("--no-smooth", action="store_true")
        p.add_argument("--no-param", action="store_true")
        if name in ("eval", "curves"):
            p.add_argument("--checkpoint", default=None)
    args = parser.parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        return cmd_curves(cfg, args.checkpoint)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
