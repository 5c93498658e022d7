"""Fixed differentiable process-based decoders.

Two decoders are provided. The respiration decoder maps a latent base
rate and a global learnable temperature sensitivity to observed
ecosystem respiration. The soil decoder assembles a layered
pool-and-flux carbon model (horizontal transfers A, decomposition rates
K, environmental modifiers xi, vertical diffusion V, input vector u),
solves the steady state M Y = -u with M = A diag(xi*K) + V, then
aggregates pool stocks per layer and interpolates to observed depths.

Sign convention: A carries -1 on the diagonal and +f transfer fractions
off-diagonal, V is a conservative diffusion stencil, so M is column
diagonally dominant with negative diagonal and the steady state from
M Y = -u is nonnegative for in-range parameters. See
docs/decoder_math.md for the derivation.
"""

from __future__ import annotations

import numpy as np

from .diffcore import solve_linear, solve_linear_vjp

T_REF = 15.0


class InvalidParameter(Exception):
    """An assembled rate or fraction is out of its physical range."""


class DepthOutOfRange(Exception):
    pass


def softplus(x):
    return np.where(x > 30, x, np.log1p(np.exp(np.minimum(x, 30))))


def softplus_inv(y):
    return np.log(np.expm1(y))


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


class RespirationDecoder:
    """R_eco = R_b * Q10^((t_a - 15) / 10) with a global learnable Q10.

    Q10 positivity is enforced by storing a raw parameter and passing it
    through softplus; the raw value starts at softplus^-1(0.5) and gets a
    100x learning-rate multiplier.
    """

    def __init__(self, store, prefix="resp", q10_init=0.5,
                 q10_lr_multiplier=100.0):
        self.store = store
        self.prefix = prefix
        self.raw_q10 = store.register(
            f"{prefix}.raw_q10", np.array([softplus_inv(q10_init)]),
            lr_multiplier=q10_lr_multiplier, weight_decay=False)

    @property
    def q10(self):
        return float(softplus(self.raw_q10)[0])

    def forward(self, Rb, ta):
        Rb = np.asarray(Rb, dtype=np.float64)
        ta = np.asarray(ta, dtype=np.float64)
        q10 = softplus(self.raw_q10)[0]
        expo = (ta - T_REF) / 10.0
        scale = q10 ** expo
        reco = Rb * scale
        cache = {"Rb": Rb, "expo": expo, "scale": scale, "q10": q10}
        return reco, cache

    def backward(self, cache, upstream):
        """Returns grad wrt Rb; accumulates the raw-Q10 gradient."""
        q10, expo, scale = cache["q10"], cache["expo"], cache["scale"]
        grad_rb = upstream * scale
        dq10 = np.sum(upstream * cache["Rb"] * expo * scale / q10)
        draw = dq10 * _sigmoid(self.raw_q10)[0]
        self.store.accumulate(f"{self.prefix}.raw_q10", np.array([draw]))
        return grad_rb


class PoolFluxConfig:
    """Geometry and fixed constants of the reduced pool-and-flux model.

    n_layers soil layers, n_pools pools per layer (fast/slow/passive by
    default). The four latent parameters are, in order: transfer fraction
    fast->slow, transfer fraction slow->passive, a shared turnover-time
    scalar, and the vertical diffusivity.
    """

    PARAM_NAMES = ("f_slow_fast", "f_passive_slow", "tau_scale",
                   "diffusivity")

    def __init__(self, n_layers=10, n_pools=3, thicknesses=None,
                 tau_base=(1.0, 10.0, 100.0), xi_q10=1.5,
                 input_efold_depth=0.3, entry_fractions=None,
                 tau_scaled_pools=None):
        self.n_layers = int(n_layers)
        self.n_pools = int(n_pools)
        if thicknesses is None:
            thicknesses = np.full(self.n_layers, 0.2)
        self.thicknesses = np.asarray(thicknesses, dtype=np.float64)
        if self.thicknesses.shape != (self.n_layers,) or \
                np.any(self.thicknesses <= 0):
            raise ValueError("need one positive thickness per layer")
        self.tau_base = np.asarray(tau_base, dtype=np.float64)
        if self.tau_base.shape != (self.n_pools,) or np.any(self.tau_base <= 0):
            raise ValueError("need one positive base turnover time per pool")
        self.xi_q10 = float(xi_q10)
        self.input_efold_depth = float(input_efold_depth)
        if entry_fractions is None:
            entry_fractions = np.zeros(self.n_pools)
            entry_fractions[0] = 1.0
        self.entry_fractions = np.asarray(entry_fractions, dtype=np.float64)
        # which pools the latent turnover scalar multiplies; leaving the
        # slowest pool unscaled keeps its steady-state stock set by the
        # transfer fractions alone, which separates their observable effects
        if tau_scaled_pools is None:
            tau_scaled_pools = [True] * self.n_pools
        self.tau_scaled_pools = np.asarray(tau_scaled_pools, dtype=bool)
        if self.tau_scaled_pools.shape != (self.n_pools,):
            raise ValueError("need one turnover-scaling flag per pool")
        # layer midpoints for depth interpolation
        edges = np.concatenate([[0.0], np.cumsum(self.thicknesses)])
        self.midpoints = 0.5 * (edges[:-1] + edges[1:])
        self.total_depth = float(edges[-1])
        # normalized input allocation over layers
        alloc = np.exp(-self.midpoints / self.input_efold_depth) \
            * self.thicknesses
        self.allocation = alloc / alloc.sum()

    @property
    def n(self):
        return self.n_layers * self.n_pools

    def idx(self, layer, pool):
        return layer * self.n_pools + pool

    def to_dict(self):
        return {"n_layers": self.n_layers, "n_pools": self.n_pools,
                "thicknesses": self.thicknesses.tolist(),
                "tau_base": self.tau_base.tolist(), "xi_q10": self.xi_q10,
                "input_efold_depth": self.input_efold_depth,
                "entry_fractions": self.entry_fractions.tolist(),
                "tau_scaled_pools": self.tau_scaled_pools.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["n_layers"], d["n_pools"], d["thicknesses"],
                   d["tau_base"], d["xi_q10"], d["input_efold_depth"],
                   d["entry_fractions"], d.get("tau_scaled_pools"))


class ForcingRecord:
    """Per-site per-year environmental drivers."""

    def __init__(self, temperature, moisture, npp):
        if not (0.0 <= moisture <= 1.0):
            raise ValueError("moisture scalar must lie in [0, 1]")
        if not np.isfinite(temperature) or not np.isfinite(npp):
            raise ValueError("forcing must be finite")
        self.temperature = float(temperature)
        self.moisture = float(moisture)
        self.npp = float(npp)


def environmental_modifier(cfg, forcing):
    """Per-layer scalar modifying intrinsic decomposition rates."""
    temp_resp = cfg.xi_q10 ** ((forcing.temperature - T_REF) / 10.0)
    moist_resp = np.clip(forcing.moisture, 0.05, 1.0)
    return np.full(cfg.n_layers, temp_resp * moist_resp)


def assemble_system(cfg, p, forcing):
    """Build (M, u) for one site; returns extras needed for the adjoint.

    p: the four latent parameters in PARAM_NAMES order, already
    constrained to their prior ranges.
    """
    f_sf, f_ps, tau_scale, diffusivity = [float(v) for v in p]
    if not (0.0 <= f_sf < 1.0 and 0.0 <= f_ps < 1.0):
        raise InvalidParameter("transfer fractions must lie in [0, 1)")
    if tau_scale <= 0:
        raise InvalidParameter("turnover scalar must be positive")
    if diffusivity < 0:
        raise InvalidParameter("diffusivity must be nonnegative")
    if forcing.npp <= 0:
        raise InvalidParameter("carbon input must be positive")
    n, L, S = cfg.n, cfg.n_layers, cfg.n_pools

    # horizontal transfer matrix: -1 diagonal, +f within a layer
    A = -np.eye(n)
    for l in range(L):
        if S >= 2:
            A[cfg.idx(l, 1), cfg.idx(l, 0)] = f_sf
        if S >= 3:
            A[cfg.idx(l, 2), cfg.idx(l, 1)] = f_ps

    tau_mult = np.where(cfg.tau_scaled_pools, tau_scale, 1.0)
    k = 1.0 / (tau_mult * cfg.tau_base)           # per-pool rates
    xi = environmental_modifier(cfg, forcing)     # per-layer
    rate = np.repeat(xi, S) * np.tile(k, L)       # (n,)
    if np.any(rate <= 0):
        raise InvalidParameter("nonpositive decomposition rate")

    # conservative diffusion on concentrations Y_l / h_l, unit diffusivity
    V_unit = np.zeros((n, n))
    h = cfg.thicknesses
    for l in range(L - 1):
        dz = 0.5 * (h[l] + h[l + 1])
        for s in range(S):
            i, j = cfg.idx(l, s), cfg.idx(l + 1, s)
            # flux = (Y_j/h_{l+1} - Y_i/h_l) / dz into layer l
            V_unit[i, i] -= 1.0 / (dz * h[l])
            V_unit[i, j] += 1.0 / (dz * h[l + 1])
            V_unit[j, j] -= 1.0 / (dz * h[l + 1])
            V_unit[j, i] += 1.0 / (dz * h[l])

    M = A * rate[None, :] + diffusivity * V_unit
    u = forcing.npp * np.kron(cfg.allocation, cfg.entry_fractions)
    extras = {"A": A, "rate": rate, "xi": xi, "k": k, "V_unit": V_unit,
              "tau_scale": tau_scale, "L": L, "S": S}
    return M, u, extras


def assemble_vjp(cfg, extras, grad_M):
    """Map a gradient wrt M back to the four latent parameters."""
    A, rate, xi, k = extras["A"], extras["rate"], extras["xi"], extras["k"]
    L, S = extras["L"], extras["S"]
    g = np.zeros(4)
    if S >= 2:
        rows = np.array([cfg.idx(l, 1) for l in range(L)])
        cols = np.array([cfg.idx(l, 0) for l in range(L)])
        g[0] = np.sum(grad_M[rows, cols] * rate[cols])
    if S >= 3:
        rows = np.array([cfg.idx(l, 2) for l in range(L)])
        cols = np.array([cfg.idx(l, 1) for l in range(L)])
        g[1] = np.sum(grad_M[rows, cols] * rate[cols])
    # column j of A*rate scales with rate_j = xi_l * k_s; dk/dtau = -k/tau
    col_contrib = np.sum(grad_M * A, axis=0)       # (n,)
    xi_rep = np.repeat(xi, S)
    k_rep = np.tile(k, L)
    scaled_rep = np.tile(cfg.tau_scaled_pools, L)
    g[2] = np.sum(col_contrib[scaled_rep] * xi_rep[scaled_rep]
                  * (-k_rep[scaled_rep] / extras["tau_scale"]))
    g[3] = np.sum(grad_M * extras["V_unit"])
    return g


def steady_state(cfg, p, forcing):
    """Solve the steady-state stocks Y with M Y = -u.

    Returns (Y, cache); backward via steady_state_vjp chains into p.
    """
    M, u, extras = assemble_system(cfg, p, forcing)
    Y, solve_cache = solve_linear(M, -u)
    if np.any(Y < -1e-9):
        import logging
        logging.getLogger(__name__).warning(
            "negative steady-state stock (min %.3e): inconsistent "
            "parameterization", float(Y.min()))
    return Y, {"solve": solve_cache, "extras": extras, "M": M, "u": u}


def steady_state_vjp(cfg, cache, upstream):
    """Gradients of the steady state wrt the four latent parameters."""
    grad_M, grad_neg_u = solve_linear_vjp(cache["solve"], upstream)
    return assemble_vjp(cfg, cache["extras"], grad_M)


def depth_interpolation_matrix(cfg, observed_depths):
    """(n_depths, n_layers) linear map from per-layer totals to observed
    depths: piecewise linear between layer midpoints, constant beyond."""
    depths = np.asarray(observed_depths, dtype=np.float64)
    if np.any(depths < 0) or np.any(depths > cfg.total_depth):
        raise DepthOutOfRange(
            f"observed depths must lie in [0, {cfg.total_depth}]")
    mids = cfg.midpoints
    W = np.zeros((depths.size, cfg.n_layers))
    for r, d in enumerate(depths):
        if d <= mids[0]:
            W[r, 0] = 1.0
        elif d >= mids[-1]:
            W[r, -1] = 1.0
        else:
            j = np.searchsorted(mids, d) - 1
            t = (d - mids[j]) / (mids[j + 1] - mids[j])
            W[r, j] = 1.0 - t
            W[r, j + 1] = t
    return W


def aggregate_and_interpolate(Y, cfg, observed_depths):
    """Sum pools per layer and interpolate stocks to observed depths."""
    W = depth_interpolation_matrix(cfg, observed_depths)
    totals = Y.reshape(cfg.n_layers, cfg.n_pools).sum(axis=1)
    return W @ totals


class SoilDecoder:
    """Batched wrapper: latent parameters + per-site forcing -> SOC at
    observed depths. Sites whose solve fails raise; callers may skip."""

    def __init__(self, cfg, observed_depths):
        self.cfg = cfg
        self.observed_depths = np.asarray(observed_depths, dtype=np.float64)
        self.W_interp = depth_interpolation_matrix(cfg, self.observed_depths)

    def forward(self, P, forcings):
        """P: (B, 4) constrained parameters; forcings: list of B records."""
        P = np.asarray(P, dtype=np.float64)
        B = P.shape[0]
        preds = np.empty((B, self.observed_depths.size))
        caches = []
        for b in range(B):
            Y, cache = steady_state(self.cfg, P[b], forcings[b])
            totals = Y.reshape(self.cfg.n_layers,
                               self.cfg.n_pools).sum(axis=1)
            preds[b] = self.W_interp @ totals
            caches.append(cache)
        return preds, {"site_caches": caches}

    def backward(self, cache, upstream):
        """upstream: (B, n_depths); returns (B, 4) parameter gradients."""
        B = upstream.shape[0]
        grads = np.empty((B, 4))
        for b in range(B):
            g_totals = self.W_interp.T @ upstream[b]       # (n_layers,)
            g_Y = np.repeat(g_totals, self.cfg.n_pools)
            grads[b] = steady_state_vjp(self.cfg, cache["site_caches"][b],
                                        g_Y)
        return grads
