"""Synthetic data generation, CSV ingestion, standardization, and splits.

The respiration generator synthesizes half-hourly radiation/temperature
drivers with the statistical structure the experiments need (diurnal and
seasonal radiation cycles, a derivative feature, and air temperature
strongly correlated with radiation), then produces labels through the
respiration model with truncated multiplicative noise. The soil generator
draws a sparse random table of feature -> parameter relationships and runs
sites through the pool-and-flux decoder. All stochastic operations take
explicit seeds and use NumPy's PCG64 generator, so outputs are
bit-reproducible given (kind, n, seed).
"""

from __future__ import annotations

import csv as _csv
import logging

import numpy as np

from . import decoder as dec
from .diffcore import SingularMatrix

log = logging.getLogger(__name__)

RESPIRATION_FEATURES = ["sw_pot", "dsw_pot", "ta"]
SOIL_FEATURES = ["temp_mean", "precip", "clay", "sand", "bulk_density",
                 "water_capacity", "ph", "cec", "npp", "veg_carbon"]

RB_W_SW = 0.0075
RB_W_DSW = -0.00375
RB_CONST = 1.03506858
Q10_TRUE = 1.5

RELATIONSHIP_FAMILIES = ("linear", "quadratic", "exponential",
                         "logarithmic", "absolute")


class ParseError(Exception):
    pass


class MissingColumn(Exception):
    pass


class EmptySplit(Exception):
    pass


class Dataset:
    """Examples as a struct of arrays.

    features: (N, D); labels: (N, L); label_depths: (L,) metres for soil
    profiles; coords: (N, 2) lat/lon degrees; latent_truth: (N, P) for
    synthetic runs. meta carries generator bookkeeping.
    """

    def __init__(self, features, labels, feature_names, coords=None,
                 label_depths=None, latent_truth=None, latent_names=None,
                 meta=None):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        if self.labels.ndim == 1:
            self.labels = self.labels[:, None]
        self.feature_names = list(feature_names)
        self.coords = None if coords is None else np.asarray(coords, float)
        self.label_depths = None if label_depths is None else \
            np.asarray(label_depths, float)
        self.latent_truth = None if latent_truth is None else \
            np.asarray(latent_truth, float)
        if self.latent_truth is not None and self.latent_truth.ndim == 1:
            self.latent_truth = self.latent_truth[:, None]
        self.latent_names = latent_names
        self.meta = dict(meta or {})
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("feature/label row counts differ")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, idx):
        return Dataset(
            self.features[idx], self.labels[idx], self.feature_names,
            coords=None if self.coords is None else self.coords[idx],
            label_depths=self.label_depths,
            latent_truth=None if self.latent_truth is None
            else self.latent_truth[idx],
            latent_names=self.latent_names, meta=self.meta)

    def feature(self, name):
        return self.features[:, self.feature_names.index(name)]


def truncated_normal(rng, sigma, size, bound=0.95):
    """Zero-mean normal draws rejected until they land in [-bound, bound]."""
    out = rng.normal(0.0, sigma, size=size)
    bad = np.abs(out) > bound
    while np.any(bad):
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def _moving_average(x, window):
    kernel = np.ones(window) / window
    pad = np.concatenate([np.full(window - 1, x[0]), x])
    return np.convolve(pad, kernel, mode="valid")


def generate_respiration(kind, n, seed):
    """Synthetic respiration dataset with latent base-respiration truth.

    kind: 'linear' or 'nonlinear' latent relationship. Half-hourly
    radiation drivers; air temperature is built from lagged radiation so
    corr(ta, sw_pot) is high, which is what makes the attribution task
    hard.
    """
    if kind not in ("linear", "nonlinear"):
        raise ValueError(f"unknown respiration kind: {kind}")
    if n < 100:
        raise ValueError("n >= 100 required")
    rng = np.random.default_rng(seed)
    t = np.arange(n) * 0.5                      # hours
    hour = t % 24.0
    day = t / 24.0
    season = 0.6 + 0.4 * np.sin(2 * np.pi * (day - 80.0) / 365.0)
    daylight = np.sin(np.pi * (hour - 6.0) / 12.0)
    sw_pot = 1000.0 * season * np.maximum(daylight, 0.0)
    # derivative in W/m^2 per hour
    dsw_pot = np.gradient(sw_pot, 0.5)
    # air temperature follows a lagged, smoothed radiation signal plus
    # slowly-varying noise
    sw_smooth = _moving_average(sw_pot, 8)      # ~4 h window
    ar = np.empty(n)
    ar[0] = 0.0
    eta = rng.normal(0.0, 0.9, size=n)
    for i in range(1, n):
        ar[i] = 0.96 * ar[i - 1] + eta[i]
    ta = 2.0 + 0.018 * sw_smooth + 0.008 * sw_pot + ar

    rb_linear = RB_W_SW * sw_pot + RB_W_DSW * dsw_pot + RB_CONST
    if kind == "linear":
        rb = rb_linear
        # each summand's variance fraction; ta contributes nothing
        contrib = np.array([np.var(RB_W_SW * sw_pot),
                            np.var(RB_W_DSW * dsw_pot), 0.0])
        true_importance = (contrib / contrib.sum())[None, :]
        meta_extra = {}
    else:
        rb_prime = RB_W_SW * sw_pot + RB_W_DSW * dsw_pot
        mu, sd = float(rb_prime.mean()), float(rb_prime.std())
        rb = np.abs((rb_prime - mu) / sd) + 0.1
        true_importance = None  # non-additive; computed via PD variance
        meta_extra = {"rb_prime_mean": mu, "rb_prime_std": sd}
    if np.any(rb <= 0):
        raise AssertionError("latent base respiration must be positive")

    eps = truncated_normal(rng, 0.1, n)
    reco = rb * Q10_TRUE ** ((ta - dec.T_REF) / 10.0) * (1.0 + eps)

    features = np.column_stack([sw_pot, dsw_pot, ta])
    meta = {"kind": f"respiration-{kind}", "q10_true": Q10_TRUE,
            "seed": int(seed), "n": int(n), **meta_extra}
    if true_importance is not None:
        meta["true_importance"] = true_importance.tolist()
    return Dataset(features, reco, RESPIRATION_FEATURES,
                   latent_truth=rb, latent_names=["Rb"], meta=meta)


def respiration_rb_truth(dataset):
    """Callable mapping raw features -> true Rb for a generated dataset."""
    kind = dataset.meta["kind"]

    def fn(X):
        rb_prime = RB_W_SW * X[:, 0] + RB_W_DSW * X[:, 1]
        if kind == "respiration-linear":
            return (rb_prime + RB_CONST)[:, None]
        mu = dataset.meta["rb_prime_mean"]
        sd = dataset.meta["rb_prime_std"]
        return (np.abs((rb_prime - mu) / sd) + 0.1)[:, None]
    return fn


def ood_filter(dataset, feature, quantile=0.2):
    """Drop the top-quantile examples of a feature (train split only)."""
    if quantile == 0:
        return dataset
    if quantile >= 1:
        raise EmptySplit("OOD filter removed every example")
    values = dataset.feature(feature)
    cutoff = np.quantile(values, 1.0 - quantile)
    keep = values <= cutoff
    if not np.any(keep):
        raise EmptySplit("OOD filter removed every example")
    return dataset.subset(np.flatnonzero(keep))


def ood_filter_indices(dataset, feature, train_idx, quantile=0.2):
    """Index-level variant of ood_filter for split-based training."""
    train_idx = np.asarray(train_idx)
    if quantile == 0:
        return train_idx
    if quantile >= 1:
        raise EmptySplit("OOD filter removed every example")
    values = dataset.feature(feature)[train_idx]
    cutoff = np.quantile(values, 1.0 - quantile)
    keep = values <= cutoff
    if not np.any(keep):
        raise EmptySplit("OOD filter removed every example")
    return train_idx[keep]


class RelationshipTable:
    """Sparse random feature -> latent-parameter functional relationships.

    Each (parameter, feature) cell is active with probability density;
    active cells carry a function family and affine shifts. A parameter's
    raw value is the sum of its active single-feature functions, then an
    affine rescale maps it into the prior range with a 10% margin.
    """

    def __init__(self, active, families, a, b, scale, offset, prior_ranges,
                 true_importance):
        self.active = np.asarray(active, dtype=bool)
        self.families = families
        self.a = np.asarray(a, float)
        self.b = np.asarray(b, float)
        self.scale = np.asarray(scale, float)
        self.offset = np.asarray(offset, float)
        self.prior_ranges = [tuple(r) for r in prior_ranges]
        self.true_importance = np.asarray(true_importance, float)

    @property
    def n_params(self):
        return self.active.shape[0]

    @property
    def n_features(self):
        return self.active.shape[1]

    def cell_value(self, i, j, x):
        # features are standardized, so the rare >2.5-sigma values are
        # clipped to keep the heavy-tailed families (exp, quadratic) from
        # concentrating the rescaled parameter in a sliver of its range
        fam = self.families[i][j]
        a, b = self.a[i, j], self.b[i, j]
        xc = np.clip(x, -2.5, 2.5)
        if fam == "linear":
            return a * xc + b
        if fam == "quadratic":
            return a * xc * xc + b
        if fam == "exponential":
            return np.exp(0.5 * a * xc) + b
        if fam == "logarithmic":
            shift = 2.6 * abs(a) + 0.1
            return np.log(a * xc + shift) + b if a > 0 else \
                np.log(-a * (-xc) + shift) + b
        if fam == "absolute":
            return np.abs(a * xc + b)
        raise ValueError(fam)

    def raw(self, X):
        X = np.asarray(X, float)
        out = np.zeros((X.shape[0], self.n_params))
        for i in range(self.n_params):
            for j in range(self.n_features):
                if self.active[i, j]:
                    out[:, i] += self.cell_value(i, j, X[:, j])
        return out

    def evaluate(self, X):
        """Latent parameters inside their prior ranges, (N, P)."""
        return self.offset[None, :] + self.scale[None, :] * self.raw(X)

    def to_dict(self):
        return {"active": self.active.tolist(), "families": self.families,
                "a": self.a.tolist(), "b": self.b.tolist(),
                "scale": self.scale.tolist(), "offset": self.offset.tolist(),
                "prior_ranges": [list(r) for r in self.prior_ranges],
                "true_importance": self.true_importance.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["active"], d["families"], d["a"], d["b"], d["scale"],
                   d["offset"], d["prior_ranges"], d["true_importance"])


DEFAULT_SOIL_PRIOR_RANGES = [(0.1, 0.8), (0.05, 0.6), (0.2, 5.0),
                             (1e-4, 1e-2)]


def generate_soil_relationships(seed, n_features=10, n_params=4,
                                density=0.2, prior_ranges=None,
                                reference_n=4000):
    """Draw the random relationship table of the synthetic soil task."""
    if prior_ranges is None:
        prior_ranges = DEFAULT_SOIL_PRIOR_RANGES
    rng = np.random.default_rng(seed)
    active = rng.random((n_params, n_features)) < density
    for i in range(n_params):
        while not active[i].any():            # no orphan parameters
            active[i] = rng.random(n_features) < density
    families = [[rng.choice(RELATIONSHIP_FAMILIES) if active[i, j] else None
                 for j in range(n_features)] for i in range(n_params)]
    a = rng.uniform(0.5, 2.0, (n_params, n_features)) \
        * rng.choice([-1.0, 1.0], (n_params, n_features))
    b = rng.uniform(-1.0, 1.0, (n_params, n_features))
    table = RelationshipTable(active, families, a, b,
                              np.ones(n_params), np.zeros(n_params),
                              prior_ranges, np.zeros((n_params, n_features)))
    # affine rescale into the prior range with a 10% margin, frozen from a
    # reference sample
    Xref = np.clip(rng.standard_normal((reference_n, n_features)), -3.0, 3.0)
    raw = table.raw(Xref)
    scale = np.empty(n_params)
    offset = np.empty(n_params)
    for i in range(n_params):
        lo, hi = prior_ranges[i]
        margin = 0.1 * (hi - lo)
        lo_t, hi_t = lo + margin, hi - margin
        rmin, rmax = raw[:, i].min(), raw[:, i].max()
        if rmax - rmin < 1e-12:
            scale[i], offset[i] = 0.0, 0.5 * (lo_t + hi_t)
        else:
            scale[i] = (hi_t - lo_t) / (rmax - rmin)
            offset[i] = lo_t - scale[i] * rmin
    table.scale, table.offset = scale, offset
    # ground-truth importance: per-feature summand variance fractions
    imp = np.zeros((n_params, n_features))
    for i in range(n_params):
        for j in range(n_features):
            if table.active[i, j]:
                imp[i, j] = np.var(table.cell_value(i, j, Xref[:, j]))
        imp[i] /= imp[i].sum()
    table.true_importance = imp
    return table


def _us_grid_coords(rng, n):
    """Jittered grid over the conterminous-US extent."""
    cols = int(np.ceil(np.sqrt(n * (58.0 / 24.0))))
    rows = int(np.ceil(n / cols))
    lats = np.linspace(25.5, 48.5, rows)
    lons = np.linspace(-123.5, -66.5, cols)
    gl, gn = np.meshgrid(lats, lons, indexing="ij")
    coords = np.column_stack([gl.ravel(), gn.ravel()])[:n]
    coords += rng.uniform(-0.4, 0.4, size=coords.shape)
    return coords


def generate_soil_dataset(relationships, n_sites, cfg, observed_depths,
                          seed, noise_sigma=0.0, features=None, coords=None):
    """Run synthetic sites through the pool-and-flux decoder.

    features: optional (N, 10) matrix (e.g. from a real CSV); otherwise a
    clipped standard-normal sampler is used. Sites whose steady-state
    solve fails are dropped with a logged count.
    """
    rng = np.random.default_rng(seed)
    if features is None:
        features = np.clip(rng.standard_normal((n_sites, 10)), -3.0, 3.0)
    features = np.asarray(features, float)
    n_sites = features.shape[0]
    if coords is None:
        coords = _us_grid_coords(rng, n_sites)
    latent = relationships.evaluate(features)
    forcings = [soil_forcing_from_features(features[s])
                for s in range(n_sites)]
    soil = dec.SoilDecoder(cfg, observed_depths)
    keep, labels = [], []
    dropped = 0
    for s in range(n_sites):
        try:
            pred, _ = soil.forward(latent[s:s + 1], forcings[s:s + 1])
        except (dec.InvalidParameter, SingularMatrix):
            dropped += 1
            continue
        labels.append(pred[0])
        keep.append(s)
    if dropped:
        log.warning("dropped %d sites whose steady-state solve failed",
                    dropped)
    keep = np.asarray(keep)
    labels = np.asarray(labels)
    if noise_sigma > 0:
        labels = labels * (1.0 + truncated_normal(rng, noise_sigma,
                                                  labels.shape))
    meta = {"kind": "soil-synthetic", "seed": int(seed),
            "n_sites": int(n_sites), "noise_sigma": float(noise_sigma),
            "observed_depths": list(map(float, observed_depths)),
            "pool_flux": cfg.to_dict(),
            "relationships": relationships.to_dict()}
    return Dataset(features[keep], labels, SOIL_FEATURES,
                   coords=coords[keep], label_depths=observed_depths,
                   latent_truth=latent[keep],
                   latent_names=list(dec.PoolFluxConfig.PARAM_NAMES),
                   meta=meta)


def soil_forcing_from_features(x):
    """Fixed map from (standardized) site features to decoder forcing.

    The driver amplitudes are kept moderate so the labels' cross-site
    variance reflects the latent parameters, not just climate and
    productivity gradients.
    """
    temperature = 8.0 + 4.0 * x[0]
    moisture = float(np.clip(0.6 + 0.1 * x[1], 0.0, 1.0))
    npp = 500.0 * np.exp(0.1 * np.clip(x[8], -3.0, 3.0))
    return dec.ForcingRecord(temperature, moisture, npp)


class SplitSpec:
    """Block -> fold assignment with designated test/validation folds."""

    def __init__(self, block_to_fold, n_folds, test_fold, val_fold,
                 block_deg, seed):
        self.block_to_fold = dict(block_to_fold)
        self.n_folds = int(n_folds)
        self.test_fold = int(test_fold)
        self.val_fold = int(val_fold)
        self.block_deg = float(block_deg)
        self.seed = int(seed)

    def fold_of(self, lat, lon):
        key = (int(np.floor(lat / self.block_deg)),
               int(np.floor(lon / self.block_deg)))
        return self.block_to_fold[key]

    def masks(self, dataset):
        folds = np.array([self.fold_of(la, lo) for la, lo in dataset.coords])
        test = folds == self.test_fold
        val = folds == self.val_fold
        train = ~(test | val)
        return np.flatnonzero(train), np.flatnonzero(val), \
            np.flatnonzero(test)

    def to_dict(self):
        return {"blocks": [[list(k), v] for k, v in
                           sorted(self.block_to_fold.items())],
                "n_folds": self.n_folds, "test_fold": self.test_fold,
                "val_fold": self.val_fold, "block_deg": self.block_deg,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        mapping = {tuple(k): v for k, v in d["blocks"]}
        return cls(mapping, d["n_folds"], d["test_fold"], d["val_fold"],
                   d["block_deg"], d["seed"])


def block_id(lat, lon, block_deg=2.0):
    return (int(np.floor(lat / block_deg)), int(np.floor(lon / block_deg)))


def spatial_block_split(dataset, block_deg=2.0, folds=5, seed=0,
                        test_fold=0, val_fold=1):
    """Shuffle 2x2-degree blocks and deal them round-robin into folds."""
    blocks = sorted({block_id(la, lo, block_deg)
                     for la, lo in dataset.coords})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(blocks))
    mapping = {blocks[k]: int(r % folds) for r, k in enumerate(order)}
    return SplitSpec(mapping, folds, test_fold, val_fold, block_deg, seed)


def sequential_split(n, fractions=(0.7, 0.15, 0.15)):
    """Contiguous train/val/test index ranges (time-series style)."""
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    return (np.arange(n_train), np.arange(n_train, n_train + n_val),
            np.arange(n_train + n_val, n))


def random_split(n, seed, fractions=(0.7, 0.15, 0.15)):
    """Shuffled train/val/test index split."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    return (perm[:n_train], perm[n_train:n_train + n_val],
            perm[n_train + n_val:])


class Standardizer:
    """Z-scores features using train-split statistics only."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, float)
        self.std = np.maximum(np.asarray(std, float), 1e-8)

    @classmethod
    def fit(cls, features):
        f = np.asarray(features, float)
        return cls(f.mean(axis=0), f.std(axis=0))

    def transform(self, features):
        return (np.asarray(features, float) - self.mean) / self.std

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])


def save_csv(dataset, path):
    header = list(dataset.feature_names)
    n_labels = dataset.labels.shape[1]
    header += [f"label_{k}" for k in range(n_labels)]
    cols = [dataset.features, dataset.labels]
    if dataset.coords is not None:
        header += ["lat", "lon"]
        cols.append(dataset.coords)
    if dataset.latent_truth is not None:
        header += [f"latent_{k}" for k in range(dataset.latent_truth.shape[1])]
        cols.append(dataset.latent_truth)
    mat = np.column_stack(cols)
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(header)
        for row in mat:
            w.writerow([repr(float(v)) for v in row])


def load_csv(path, feature_names, label_names=None):
    """Read a dataset back; column names must match the schema exactly."""
    with open(path, newline="") as fh:
        reader = _csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file")
        rows = list(reader)
    col = {name: k for k, name in enumerate(header)}
    for name in feature_names:
        if name not in col:
            raise MissingColumn(f"{path}: missing column {name!r}")
    if label_names is None:
        label_names = [h for h in header if h.startswith("label_")]
    data = np.empty((len(rows), len(header)))
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r + 2} has {len(row)} cells")
        for c, cell in enumerate(row):
            try:
                data[r, c] = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}: row {r + 2}, column {header[c]!r}: "
                    f"unparseable {cell!r}")
    features = data[:, [col[n] for n in feature_names]]
    labels = data[:, [col[n] for n in label_names]]
    coords = None
    if "lat" in col and "lon" in col:
        coords = data[:, [col["lat"], col["lon"]]]
    latent_cols = [h for h in header if h.startswith("latent_")]
    latent = data[:, [col[h] for h in latent_cols]] if latent_cols else None
    return Dataset(features, labels, feature_names, coords=coords,
                   latent_truth=latent)
