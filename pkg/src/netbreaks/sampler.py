"""Gibbs sampler for the regime-switching bilinear network tensor model.

Each layer ``t`` of a (degree-corrected) network tensor is modeled as

    B[i, j, t] = beta + sum_r U[S_t][i, r] * V[t, r] * U[S_t][j, r] + eps,

where ``S`` is a forward-moving hidden state sequence over ``M`` regimes
(states only stay or advance by one, start in regime 1, end in regime M),
``U[m]`` holds regime-specific latent node positions, ``V[t]`` holds
layer-specific generation weights, and the noise is Gaussian with a
regime-specific variance (optionally scaled per layer by a latent gamma
precision multiplier, which yields Student-t errors marginally).

The likelihood is evaluated over the strictly-upper-triangular cells of each
layer; self-ties are never modeled.  The sampler cycles through closed-form
conditionals for the latent-position hierarchy, the weight hierarchy, the
optional intercept, the noise variances, the hidden states (by
forward-filtering backward-sampling) and the transition probabilities.

Any parameter block can be clamped at a fixed value via ``HmtmConfig.fixed``;
clamped blocks are treated as point masses (never re-sampled, and excluded
from prior/posterior ordinates in the marginal-likelihood computation).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensor import CorrectedTensor, NetworkTensor

__all__ = [
    "Priors",
    "HmtmConfig",
    "RegimePath",
    "HmtmState",
    "McmcTrace",
    "gram_schmidt",
    "sample_psi_u",
    "sample_mu_u",
    "sample_U",
    "sample_psi_v",
    "sample_mu_v",
    "sample_V",
    "sample_sigma2",
    "sample_beta",
    "sample_gamma",
    "ffbs_states",
    "perturb_singletons",
    "sample_transition",
    "initialize_state",
    "gibbs_sweep",
    "fit_hmtm",
    "layer_logdensities",
    "make_rng",
]

FIXABLE_BLOCKS = ("U", "V", "mu_u", "psi_u", "mu_v", "psi_v", "sigma2", "beta", "gamma", "path", "P")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class Priors:
    """Hyperparameters; all scale-type entries must be positive.

    ``u0, u1`` / ``v0, v1``: inverse-gamma priors IG(u0/2, u1/2) on the
    latent-position / weight variances.  ``c0, d0``: IG(c0/2, d0/2) on the
    noise variances.  ``a0, b0``: Beta prior on the stay probabilities.
    ``nu0, nu1``: Gamma(nu0/2, nu1/2) prior on the per-layer precision
    multipliers under Student-t errors.  ``mu0_u, mu0_v``: prior means of the
    position/weight means (default zero vectors).  ``b_beta0, B_beta0``:
    normal prior mean/variance of the intercept.
    """

    u0: float = 10.0
    u1: float = 1.0
    v0: float = 10.0
    v1: float = 1.0
    c0: float = 1.0
    d0: float = 1.0
    a0: float = 1.0
    b0: float = 1.0
    nu0: float = 5.0
    nu1: float = 5.0
    mu0_u: np.ndarray | None = None
    mu0_v: np.ndarray | None = None
    b_beta0: float = 0.0
    B_beta0: float = 10.0

    def validate(self, rank: int) -> None:
        for name in ("u0", "u1", "v0", "v1", "c0", "d0", "a0", "b0", "nu0", "nu1", "B_beta0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"prior parameter {name} must be positive")
        for name in ("mu0_u", "mu0_v"):
            v = getattr(self, name)
            if v is not None and np.asarray(v, dtype=float).shape != (rank,):
                raise ValueError(f"{name} must have length {rank}")

    def mean_u(self, rank: int) -> np.ndarray:
        return np.zeros(rank) if self.mu0_u is None else np.asarray(self.mu0_u, dtype=float)

    def mean_v(self, rank: int) -> np.ndarray:
        return np.zeros(rank) if self.mu0_v is None else np.asarray(self.mu0_v, dtype=float)


@dataclass
class HmtmConfig:
    """Sampler settings. ``n_breaks`` is the number of change points (M - 1)."""

    n_breaks: int = 1
    rank: int = 2
    burnin: int = 500
    mcmc: int = 500
    thin: int = 1
    priors: Priors = field(default_factory=Priors)
    error_kind: str = "normal"  # "normal" | "t"
    with_intercept: bool = False
    perturb_weights: np.ndarray | None = None
    seed: int = 0
    fixed: dict = field(default_factory=dict)

    @property
    def n_regimes(self) -> int:
        return self.n_breaks + 1

    def validate(self) -> None:
        if self.n_breaks < 0:
            raise ValueError("n_breaks must be non-negative")
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if self.mcmc < 1 or self.thin < 1 or self.burnin < 0:
            raise ValueError("need mcmc >= 1, thin >= 1, burnin >= 0")
        if self.error_kind not in ("normal", "t"):
            raise ValueError(f"unknown error kind {self.error_kind!r}")
        self.priors.validate(self.rank)
        w = self.resolved_perturb_weights()
        if w.shape != (self.n_regimes,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("perturb_weights must be a probability vector of length M")
        for key in self.fixed:
            if key not in FIXABLE_BLOCKS:
                raise ValueError(f"unknown fixed block {key!r}; choose from {FIXABLE_BLOCKS}")

    def resolved_perturb_weights(self) -> np.ndarray:
        if self.perturb_weights is None:
            return np.full(self.n_regimes, 1.0 / self.n_regimes)
        return np.asarray(self.perturb_weights, dtype=float)


# ---------------------------------------------------------------------------
# state containers


@dataclass
class RegimePath:
    """Hidden state sequence (labels 1..M) plus its transition matrix.

    The chain is forward-moving: states start at 1, end at M, and only stay
    or advance by one; the transition matrix is upper-bidiagonal with
    ``P[M-1, M-1] == 1``.
    """

    states: np.ndarray
    transition: np.ndarray

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=np.int64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        m = self.transition.shape[0]
        if self.transition.shape != (m, m):
            raise ValueError("transition matrix must be square")
        if self.states.ndim != 1 or self.states.size == 0:
            raise ValueError("states must be a non-empty vector")
        if self.states[0] != 1:
            raise ValueError("path must start in regime 1")
        if self.states[-1] != m:
            raise ValueError(f"path must end in regime {m}")
        steps = np.diff(self.states)
        if np.any((steps != 0) & (steps != 1)):
            raise ValueError("states may only stay or advance by one")
        if np.any(self.states < 1) or np.any(self.states > m):
            raise ValueError("state labels out of range")
        for k in range(m):
            row = self.transition[k]
            mask = np.ones(m, dtype=bool)
            mask[k] = False
            if k + 1 < m:
                mask[k + 1] = False
            if np.any(row[mask] != 0.0):
                raise ValueError("transition matrix must be upper-bidiagonal")
            if abs(row.sum() - 1.0) > 1e-9:
                raise ValueError("transition rows must sum to one")
        if abs(self.transition[m - 1, m - 1] - 1.0) > 1e-12:
            raise ValueError("last regime must be absorbing")

    @property
    def n_regimes(self) -> int:
        return self.transition.shape[0]

    @property
    def break_times(self) -> np.ndarray:
        """1-based index of the last layer of each regime but the final one."""
        taus = [int(np.flatnonzero(self.states == m)[-1]) + 1 for m in range(1, self.n_regimes)]
        return np.asarray(taus, dtype=np.int64)


@dataclass
class HmtmState:
    """One full parameter configuration of the sampler."""

    U: list[np.ndarray]  # per regime, (N, R)
    mu_u: np.ndarray  # (M, R)
    psi_u: np.ndarray  # (M, R)
    V: np.ndarray  # (T, R)
    mu_v: np.ndarray  # (M, R)
    psi_v: np.ndarray  # (M, R)
    sigma2: np.ndarray  # (M,)
    beta: float
    gamma: np.ndarray  # (T,)
    path: RegimePath

    def copy(self) -> "HmtmState":
        return HmtmState(
            U=[u.copy() for u in self.U],
            mu_u=self.mu_u.copy(),
            psi_u=self.psi_u.copy(),
            V=self.V.copy(),
            mu_v=self.mu_v.copy(),
            psi_v=self.psi_v.copy(),
            sigma2=self.sigma2.copy(),
            beta=float(self.beta),
            gamma=self.gamma.copy(),
            path=RegimePath(self.path.states.copy(), self.path.transition.copy()),
        )

    def validate(self, check_orthogonal: bool = True) -> None:
        if np.any(self.sigma2 <= 0) or np.any(self.psi_u <= 0) or np.any(self.psi_v <= 0):
            raise ValueError("variance parameters must be strictly positive")
        if np.any(self.gamma <= 0):
            raise ValueError("precision multipliers must be strictly positive")
        if check_orthogonal:
            for m, u in enumerate(self.U):
                _check_orthogonal(u, context=f"regime {m + 1}")


def _check_orthogonal(u: np.ndarray, context: str = "", rtol: float = 1e-8) -> None:
    gram = u.T @ u
    norms = np.sqrt(np.clip(np.diag(gram), 0.0, None))
    scale = np.outer(norms, norms)
    off = np.abs(gram - np.diag(np.diag(gram)))
    bad = off > rtol * np.maximum(scale, 1e-300)
    if np.any(bad):
        raise ValueError(f"latent position columns are not orthogonal ({context})")


@dataclass
class McmcTrace:
    """Stored draws plus per-layer log densities and sampled break points."""

    draws: list[HmtmState]
    loglayer: np.ndarray  # (G, T)
    breakpoints: np.ndarray  # (G, M-1)
    states: np.ndarray  # (G, T)
    config: HmtmConfig
    final_state: HmtmState
    n_nodes: int
    n_layers: int
    node_labels: list[str] | None = None
    input_info: dict | None = None

    @property
    def n_draws(self) -> int:
        return self.loglayer.shape[0]

    @property
    def n_regimes(self) -> int:
        return self.config.n_regimes

    def save(self, path: str | Path) -> None:
        payload = {
            "schema": "netbreaks-trace-v1",
            "config": _config_to_dict(self.config),
            "n_nodes": self.n_nodes,
            "n_layers": self.n_layers,
            "node_labels": self.node_labels,
            "input": self.input_info,
            "loglayer": self.loglayer.tolist(),
            "breakpoints": self.breakpoints.tolist(),
            "states": self.states.tolist(),
            "draws": [_state_to_dict(s) for s in self.draws],
            "final_state": _state_to_dict(self.final_state),
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "McmcTrace":
        payload = json.loads(Path(path).read_text())
        if payload.get("schema") != "netbreaks-trace-v1":
            raise ValueError(f"{path}: not a netbreaks trace file")
        config = _config_from_dict(payload["config"])
        g = len(payload["loglayer"])
        breakpoints = np.asarray(payload["breakpoints"], dtype=np.int64).reshape(g, -1)
        if config.n_breaks == 0:
            breakpoints = breakpoints.reshape(g, 0)
        return cls(
            draws=[_state_from_dict(d) for d in payload["draws"]],
            loglayer=np.asarray(payload["loglayer"], dtype=np.float64),
            breakpoints=breakpoints,
            states=np.asarray(payload["states"], dtype=np.int64),
            config=config,
            final_state=_state_from_dict(payload["final_state"]),
            n_nodes=int(payload["n_nodes"]),
            n_layers=int(payload["n_layers"]),
            node_labels=payload.get("node_labels"),
            input_info=payload.get("input"),
        )


def _state_to_dict(state: HmtmState) -> dict:
    return {
        "U": [u.tolist() for u in state.U],
        "mu_u": state.mu_u.tolist(),
        "psi_u": state.psi_u.tolist(),
        "V": state.V.tolist(),
        "mu_v": state.mu_v.tolist(),
        "psi_v": state.psi_v.tolist(),
        "sigma2": state.sigma2.tolist(),
        "beta": state.beta,
        "gamma": state.gamma.tolist(),
        "states": state.path.states.tolist(),
        "transition": state.path.transition.tolist(),
    }


def _state_from_dict(d: dict) -> HmtmState:
    return HmtmState(
        U=[np.asarray(u, dtype=np.float64) for u in d["U"]],
        mu_u=np.asarray(d["mu_u"], dtype=np.float64),
        psi_u=np.asarray(d["psi_u"], dtype=np.float64),
        V=np.asarray(d["V"], dtype=np.float64),
        mu_v=np.asarray(d["mu_v"], dtype=np.float64),
        psi_v=np.asarray(d["psi_v"], dtype=np.float64),
        sigma2=np.asarray(d["sigma2"], dtype=np.float64),
        beta=float(d["beta"]),
        gamma=np.asarray(d["gamma"], dtype=np.float64),
        path=RegimePath(
            np.asarray(d["states"], dtype=np.int64),
            np.asarray(d["transition"], dtype=np.float64),
        ),
    )


def _config_to_dict(config: HmtmConfig) -> dict:
    d = asdict(config)
    d["priors"]["mu0_u"] = None if config.priors.mu0_u is None else np.asarray(config.priors.mu0_u).tolist()
    d["priors"]["mu0_v"] = None if config.priors.mu0_v is None else np.asarray(config.priors.mu0_v).tolist()
    if config.perturb_weights is not None:
        d["perturb_weights"] = np.asarray(config.perturb_weights).tolist()
    d["fixed"] = {k: _fixed_to_jsonable(k, v) for k, v in config.fixed.items()}
    return d


def _fixed_to_jsonable(key: str, value) -> object:
    if key == "U":
        return [np.asarray(u).tolist() for u in value]
    if key == "beta":
        return float(value)
    return np.asarray(value).tolist()


def _fixed_from_jsonable(key: str, value) -> object:
    if key == "U":
        return [np.asarray(u, dtype=np.float64) for u in value]
    if key == "beta":
        return float(value)
    if key in ("path",):
        return np.asarray(value, dtype=np.int64)
    return np.asarray(value, dtype=np.float64)


def _config_from_dict(d: dict) -> HmtmConfig:
    priors = dict(d["priors"])
    if priors.get("mu0_u") is not None:
        priors["mu0_u"] = np.asarray(priors["mu0_u"], dtype=np.float64)
    if priors.get("mu0_v") is not None:
        priors["mu0_v"] = np.asarray(priors["mu0_v"], dtype=np.float64)
    pw = d.get("perturb_weights")
    return HmtmConfig(
        n_breaks=int(d["n_breaks"]),
        rank=int(d["rank"]),
        burnin=int(d["burnin"]),
        mcmc=int(d["mcmc"]),
        thin=int(d["thin"]),
        priors=Priors(**priors),
        error_kind=d["error_kind"],
        with_intercept=bool(d["with_intercept"]),
        perturb_weights=None if pw is None else np.asarray(pw, dtype=np.float64),
        seed=int(d["seed"]),
        fixed={k: _fixed_from_jsonable(k, v) for k, v in d.get("fixed", {}).items()},
    )


# ---------------------------------------------------------------------------
# small helpers


def make_rng(seed) -> np.random.Generator:
    """Counter-based Philox generator, seeded through ``SeedSequence``."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def data_values(B) -> np.ndarray:
    """Dense (N, N, T) array from a tensor object or a raw array."""
    if isinstance(B, (NetworkTensor, CorrectedTensor)):
        return B.values
    return np.asarray(B, dtype=np.float64)


def regime_layers(states: np.ndarray, m: int) -> np.ndarray:
    """0-based layer indices currently assigned to 0-based regime ``m``."""
    return np.flatnonzero(np.asarray(states) == m + 1)


def gram_schmidt(u: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt without normalization: columns are made mutually
    orthogonal in order while their scales are retained."""
    out = np.array(u, dtype=np.float64, copy=True)
    ncols = out.shape[1]
    for r in range(ncols):
        for s in range(r):
            denom = out[:, s] @ out[:, s]
            if denom > 0.0:
                out[:, r] -= ((out[:, s] @ out[:, r]) / denom) * out[:, s]
    return out


def _fix_signs(u: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    out = np.array(u, copy=True)
    for r in range(out.shape[1]):
        k = int(np.argmax(np.abs(out[:, r])))
        if out[k, r] < 0:
            out[:, r] = -out[:, r]
    return out


def _adjusted_data(Bv: np.ndarray, idx: np.ndarray, beta: float) -> np.ndarray:
    """Intercept-removed slab of layers with the (unmodeled) diagonal zeroed."""
    out = Bv[:, :, idx] - beta
    n = Bv.shape[0]
    out[np.arange(n), np.arange(n), :] = 0.0
    return out


def _invgamma_draw(rng: np.random.Generator, shape, scale):
    return np.asarray(scale) / rng.gamma(np.asarray(shape))


def _n_dyads(n: int) -> int:
    return n * (n - 1) // 2


def _lse(a: np.ndarray, axis: int | None = None):
    """Log-sum-exp that tolerates all-(-inf) slices (scipy-free hot path)."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(a - safe), axis=axis))
    if axis is None:
        return float(s + safe.reshape(()))
    return s + np.squeeze(safe, axis=axis)


# ---------------------------------------------------------------------------
# closed-form conditional parameters (shared by the draws, the tests and the
# marginal-likelihood ordinates)


def psi_u_conditional(U_m: np.ndarray, priors: Priors) -> tuple[np.ndarray, np.ndarray]:
    """IG(shape, scale) per column: ((u0 + N)/2, (col_ss + u1)/2)."""
    n = U_m.shape[0]
    shape = np.full(U_m.shape[1], (priors.u0 + n) / 2.0)
    scale = ((U_m * U_m).sum(axis=0) + priors.u1) / 2.0
    return shape, scale


def mu_u_conditional(U_m: np.ndarray, psi_u_m: np.ndarray, priors: Priors) -> tuple[np.ndarray, np.ndarray]:
    """Normal mean/variance per coordinate: ((colsum + mu0)/(N+1), psi/(N+1))."""
    n, r = U_m.shape
    mean = (U_m.sum(axis=0) + priors.mean_u(r)) / (n + 1.0)
    var = psi_u_m / (n + 1.0)
    return mean, var


def psi_v_conditional(V_m: np.ndarray, priors: Priors) -> tuple[np.ndarray, np.ndarray]:
    """IG(shape, scale) per column: ((v0 + T_m)/2, (col_ss + v1)/2).

    ``T_m`` is the number of layers currently in the regime (the row count of
    ``V_m``), which is what conjugacy with the regime-specific weight
    hierarchy requires.
    """
    t_m = V_m.shape[0]
    shape = np.full(V_m.shape[1], (priors.v0 + t_m) / 2.0)
    scale = ((V_m * V_m).sum(axis=0) + priors.v1) / 2.0
    return shape, scale


def mu_v_conditional(V_m: np.ndarray, psi_v_m: np.ndarray, priors: Priors) -> tuple[np.ndarray, np.ndarray]:
    t_m, r = V_m.shape
    mean = (V_m.sum(axis=0) + priors.mean_v(r)) / (t_m + 1.0)
    var = psi_v_m / (t_m + 1.0)
    return mean, var


def u_conditional(Bv: np.ndarray, state: HmtmState, m: int, config: HmtmConfig) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise normal for the regime's positions: returns (mean (N, R), cov (R, R))."""
    idx = regime_layers(state.path.states, m)
    if idx.size == 0:
        raise ValueError(f"regime {m + 1} has no layers")
    u = state.U[m]
    v_m = state.V[idx]
    g = state.gamma[idx]
    vg = v_m * g[:, None]
    q = (u.T @ u) * (v_m.T @ vg)
    badj = _adjusted_data(Bv, idx, state.beta)
    # L[i, r] = sum_{j, t} B[i, j, t] U[j, r] Vg[t, r]
    lmat = np.tensordot(badj, u[:, None, :] * vg[None, :, :], axes=([1, 2], [0, 1]))
    psi = state.psi_u[m]
    s2 = state.sigma2[m]
    prec = q / s2 + np.diag(1.0 / psi)
    cov = _pd_inverse(prec, context=f"positions, regime {m + 1}")
    mean = (lmat / s2 + state.mu_u[m] / psi) @ cov
    return mean, cov


def v_conditional_rows(
    Bv: np.ndarray, state: HmtmState, m: int, config: HmtmConfig
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Per-layer normal for the regime's weights: (means (T_m, R), covs list)."""
    idx = regime_layers(state.path.states, m)
    if idx.size == 0:
        raise ValueError(f"regime {m + 1} has no layers")
    u = state.U[m]
    q0 = (u.T @ u) ** 2
    badj = _adjusted_data(Bv, idx, state.beta)
    # L[t, r] = sum_{i, j} B[i, j, t] U[i, r] U[j, r]
    lrows = (np.tensordot(badj, u, axes=([1], [0])) * u[:, None, :]).sum(axis=0)
    psi = state.psi_v[m]
    s2 = state.sigma2[m]
    means = np.empty_like(lrows)
    covs: list[np.ndarray] = []
    for k, t in enumerate(idx):
        g = state.gamma[t]
        prec = g * q0 / s2 + np.diag(1.0 / psi)
        cov = _pd_inverse(prec, context=f"weights, regime {m + 1}, layer {t + 1}")
        means[k] = (g * lrows[k] / s2 + state.mu_v[m] / psi) @ cov
        covs.append(cov)
    return means, covs


def _pd_inverse(prec: np.ndarray, context: str) -> np.ndarray:
    try:
        np.linalg.cholesky(prec)
        cov = np.linalg.inv(prec)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"singular conditional precision ({context})") from exc
    return (cov + cov.T) / 2.0


def bilinear_means(U_m: np.ndarray, V_rows: np.ndarray) -> np.ndarray:
    """Model means ``U diag(v_t) U^T`` stacked over layers: (N, N, T_rows)."""
    n, r = U_m.shape
    pairs = (U_m[:, None, :] * U_m[None, :, :]).reshape(n * n, r)
    return (pairs @ V_rows.T).reshape(n, n, V_rows.shape[0])


def _regime_upper_residuals(
    Bv: np.ndarray, state: HmtmState, m: int, include_beta: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Upper-triangular residuals (D, T_m) and the regime's layer indices."""
    idx = regime_layers(state.path.states, m)
    u = state.U[m]
    means = bilinear_means(u, state.V[idx])
    iu, ju = np.triu_indices(Bv.shape[0], k=1)
    resid = Bv[iu, ju, :][:, idx] - means[iu, ju, :]
    if include_beta:
        resid = resid - state.beta
    return resid, idx


def sigma2_conditional(Bv: np.ndarray, state: HmtmState, m: int, config: HmtmConfig) -> tuple[float, float]:
    """IG(shape, scale): ((c0 + E_m)/2, (d0 + weighted SSR)/2) with
    ``E_m = T_m * N(N-1)/2`` upper-triangular cells."""
    resid, idx = _regime_upper_residuals(Bv, state, m)
    weights = state.gamma[idx]
    ss = float(((resid**2) * weights[None, :]).sum())
    e_m = _n_dyads(Bv.shape[0]) * idx.size
    p = config.priors
    return (p.c0 + e_m) / 2.0, (p.d0 + ss) / 2.0


def beta_conditional(Bv: np.ndarray, state: HmtmState, config: HmtmConfig) -> tuple[float, float]:
    """Normal (b1, B1) for the intercept; residuals exclude the intercept."""
    p = config.priors
    d = _n_dyads(Bv.shape[0])
    prec = 1.0 / p.B_beta0
    num = p.b_beta0 / p.B_beta0
    for m in range(config.n_regimes):
        resid, idx = _regime_upper_residuals(Bv, state, m, include_beta=False)
        w = state.gamma[idx]
        s2 = state.sigma2[m]
        prec += (w.sum() * d) / s2
        num += float((resid.sum(axis=0) * w).sum()) / s2
    b_var = 1.0 / prec
    return b_var * num, b_var


def gamma_conditional(Bv: np.ndarray, state: HmtmState, config: HmtmConfig) -> tuple[float, np.ndarray]:
    """Gamma(nu2/2, rate nu3_t/2): nu2 = nu0 + D, nu3_t = nu1 + SSR_t / sigma2."""
    p = config.priors
    t_total = Bv.shape[2]
    nu3 = np.empty(t_total)
    for m in range(config.n_regimes):
        resid, idx = _regime_upper_residuals(Bv, state, m)
        nu3[idx] = p.nu1 + (resid**2).sum(axis=0) / state.sigma2[m]
    nu2 = p.nu0 + _n_dyads(Bv.shape[0])
    return nu2, nu3


def transition_counts(states: np.ndarray, n_regimes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per non-terminal regime: (# stays k->k, # advances k->k+1)."""
    states = np.asarray(states)
    stays = np.zeros(n_regimes - 1, dtype=np.int64)
    advances = np.zeros(n_regimes - 1, dtype=np.int64)
    for k in range(1, n_regimes):
        here = states[:-1] == k
        stays[k - 1] = int(np.sum(here & (states[1:] == k)))
        advances[k - 1] = int(np.sum(here & (states[1:] == k + 1)))
    return stays, advances


# ---------------------------------------------------------------------------
# the Gibbs draws


def sample_psi_u(U_m: np.ndarray, config: HmtmConfig, rng: np.random.Generator) -> np.ndarray:
    shape, scale = psi_u_conditional(U_m, config.priors)
    return _invgamma_draw(rng, shape, scale)


def sample_mu_u(
    U_m: np.ndarray, psi_u_m: np.ndarray, config: HmtmConfig, rng: np.random.Generator
) -> np.ndarray:
    mean, var = mu_u_conditional(U_m, psi_u_m, config.priors)
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


def sample_U(B, state: HmtmState, m: int, config: HmtmConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw the regime's positions row-wise and orthogonalize the columns."""
    mean, cov = u_conditional(data_values(B), state, m, config)
    chol = np.linalg.cholesky(cov)
    draw = mean + rng.standard_normal(mean.shape) @ chol.T
    return gram_schmidt(draw)


def sample_psi_v(V_m: np.ndarray, config: HmtmConfig, rng: np.random.Generator) -> np.ndarray:
    shape, scale = psi_v_conditional(V_m, config.priors)
    return _invgamma_draw(rng, shape, scale)


def sample_mu_v(
    V_m: np.ndarray, psi_v_m: np.ndarray, config: HmtmConfig, rng: np.random.Generator
) -> np.ndarray:
    mean, var = mu_v_conditional(V_m, psi_v_m, config.priors)
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


def sample_V(B, state: HmtmState, m: int, config: HmtmConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw the generation weights of every layer in the regime: (T_m, R)."""
    means, covs = v_conditional_rows(data_values(B), state, m, config)
    rows = np.empty_like(means)
    for k in range(means.shape[0]):
        chol = np.linalg.cholesky(covs[k])
        rows[k] = means[k] + chol @ rng.standard_normal(means.shape[1])
    return rows


def sample_sigma2(B, state: HmtmState, m: int, config: HmtmConfig, rng: np.random.Generator) -> float:
    shape, scale = sigma2_conditional(data_values(B), state, m, config)
    return float(_invgamma_draw(rng, shape, scale))


def sample_beta(B, state: HmtmState, config: HmtmConfig, rng: np.random.Generator) -> float:
    b1, b_var = beta_conditional(data_values(B), state, config)
    return float(b1 + math.sqrt(b_var) * rng.standard_normal())


def sample_gamma(B, state: HmtmState, config: HmtmConfig, rng: np.random.Generator) -> np.ndarray:
    nu2, nu3 = gamma_conditional(data_values(B), state, config)
    return rng.gamma(nu2 / 2.0, 2.0 / nu3)


def sample_transition(
    states: np.ndarray,
    a0: float,
    b0: float,
    rng: np.random.Generator,
    n_regimes: int | None = None,
) -> np.ndarray:
    """Beta draws of the stay probabilities; the last regime is absorbing."""
    states = np.asarray(states)
    m_total = int(states.max()) if n_regimes is None else n_regimes
    p = np.zeros((m_total, m_total))
    p[m_total - 1, m_total - 1] = 1.0
    if m_total == 1:
        return p
    stays, advances = transition_counts(states, m_total)
    for k in range(m_total - 1):
        alpha = a0 + stays[k] - 1.0
        if alpha <= 0.0:
            raise ValueError(
                f"insufficient dwell count in regime {k + 1} for prior a0={a0}: "
                f"Beta shape {alpha} is not positive"
            )
        stay = rng.beta(alpha, b0 + advances[k])
        p[k, k] = stay
        p[k, k + 1] = 1.0 - stay
    return p


# ---------------------------------------------------------------------------
# layer densities, forward filter, FFBS


def layer_logdensities(B, state: HmtmState, config: HmtmConfig) -> np.ndarray:
    """Log density of each layer under each regime, over upper-triangular cells.

    Returns a (T, M) matrix; entry (t, m) conditions on the layer's own
    weights ``V[t]`` and precision multiplier ``gamma[t]`` but regime ``m``'s
    positions and noise variance.
    """
    bv = data_values(B)
    n, _, t_total = bv.shape
    d = _n_dyads(n)
    iu, ju = np.triu_indices(n, k=1)
    upper = bv[iu, ju, :] - state.beta  # (D, T)
    out = np.empty((t_total, config.n_regimes))
    for m in range(config.n_regimes):
        means = bilinear_means(state.U[m], state.V)[iu, ju, :]
        ss = ((upper - means) ** 2).sum(axis=0)
        var = state.sigma2[m] / state.gamma
        out[:, m] = -0.5 * d * np.log(2.0 * math.pi * var) - ss / (2.0 * var)
    return out


def forward_filter(logf: np.ndarray, transition: np.ndarray) -> tuple[np.ndarray, float]:
    """Normalized log filtering probabilities and the total log likelihood.

    ``logf[t, m]`` is the log density of layer ``t`` under regime ``m``; the
    initial distribution is a point mass on regime 1.  The returned log
    likelihood is the usual predictive decomposition, summing each layer's
    density over regimes weighted by the one-step-ahead state probabilities.
    """
    t_total, m_total = logf.shape
    with np.errstate(divide="ignore"):
        logp = np.where(transition > 0.0, np.log(np.maximum(transition, 1e-300)), -np.inf)
    log_filter = np.full((t_total, m_total), -np.inf)
    loglik = 0.0
    logpred = np.full(m_total, -np.inf)
    logpred[0] = 0.0  # chains start in regime 1
    for t in range(t_total):
        if t > 0:
            logpred = _lse(log_filter[t - 1][:, None] + logp, axis=0)
        joint = logpred + logf[t]
        norm = _lse(joint)
        if not np.isfinite(norm):
            raise RuntimeError(f"filter mass vanished at layer {t + 1}")
        loglik += norm
        log_filter[t] = joint - norm
    return log_filter, float(loglik)


def ffbs_states(B, state: HmtmState, config: HmtmConfig, rng: np.random.Generator) -> np.ndarray:
    """Joint draw of the hidden state path given all other parameters.

    Runs the forward filter in log space, pins the final layer to the last
    regime, and samples backwards; all arithmetic stays in log space, so very
    unlikely layers only fail when an entire filter row underflows to zero.
    """
    if config.n_regimes < 2:
        raise ValueError("state sampling needs at least two regimes")
    logf = layer_logdensities(B, state, config)
    trans = state.path.transition
    log_filter, _ = forward_filter(logf, trans)
    t_total, m_total = logf.shape
    states = np.empty(t_total, dtype=np.int64)
    if not np.isfinite(log_filter[t_total - 1, m_total - 1]):
        raise RuntimeError(f"terminal regime unreachable at layer {t_total}")
    states[-1] = m_total
    with np.errstate(divide="ignore"):
        logp = np.where(trans > 0.0, np.log(np.maximum(trans, 1e-300)), -np.inf)
    for t in range(t_total - 2, -1, -1):
        nxt = states[t + 1]
        if nxt == 1:
            states[t] = 1
            continue
        cand = np.array([nxt - 1, nxt])
        logw = log_filter[t, cand - 1] + logp[cand - 1, nxt - 1]
        norm = _lse(logw)
        if not np.isfinite(norm):
            raise RuntimeError(f"backward sampling stuck at layer {t + 1}")
        p_lower = math.exp(logw[0] - norm)
        states[t] = cand[0] if rng.random() < p_lower else cand[1]
    return states


def path_from_breaks(break_times: Sequence[int], t_total: int) -> np.ndarray:
    """State vector implied by 1-based break times (last layers of regimes)."""
    states = np.ones(t_total, dtype=np.int64)
    for tau in break_times:
        states[tau:] += 1
    return states


def perturb_singletons(
    states: np.ndarray, weights: np.ndarray | None, rng: np.random.Generator
) -> np.ndarray:
    """Burn-in fix for degenerate paths: if any regime occupies a single layer,
    redraw the break points uniformly among strictly-increasing positions.

    ``weights`` is reserved for a non-uniform preference over regimes and is
    currently unused.
    """
    states = np.asarray(states, dtype=np.int64)
    m_total = int(states[-1])
    if m_total < 2:
        return states.copy()
    counts = np.bincount(states, minlength=m_total + 1)[1:]
    if counts.min() >= 2:
        return states.copy()
    t_total = states.size
    taus = np.sort(rng.choice(np.arange(1, t_total), size=m_total - 1, replace=False))
    return path_from_breaks(taus, t_total)


# ---------------------------------------------------------------------------
# initialization, sweeps, fitting


def _eig_positions(matrix: np.ndarray, r: int, context: str, quartic: bool = False) -> np.ndarray:
    try:
        w, q = np.linalg.eigh(matrix)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigendecomposition failed for {context}") from exc
    order = np.argsort(-np.abs(w), kind="stable")[:r]
    scale = np.abs(w[order]) ** (0.25 if quartic else 0.5)
    return gram_schmidt(_fix_signs(q[:, order] * scale))


def _lstsq_weights(bv, u_by_layer, iu, ju, t_total, r) -> np.ndarray:
    v = np.zeros((t_total, r))
    for t in range(t_total):
        u_m = u_by_layer(t)
        design = u_m[iu] * u_m[ju]
        v[t], *_ = np.linalg.lstsq(design, bv[iu, ju, t], rcond=None)
    return v


def initialize_state(B, config: HmtmConfig) -> HmtmState:
    """Spectral starting point.

    Layers are split into M equal contiguous segments; each regime's positions
    come from the top-R eigenpairs (scaled by sqrt |eigenvalue|) of the
    segment's mean layer, weights from per-layer least squares given the
    positions, and noise variances from the residuals.  When layers inside a
    segment carry opposite-signed structure the mean layer cancels it, so a
    second candidate built from the segment's mean squared layer (which is
    sign-invariant) is also tried, and whichever start reconstructs the data
    better wins.  Hierarchy means and variances start at their prior means.
    Values in ``config.fixed`` override the corresponding blocks.
    """
    bv = data_values(B)
    n, _, t_total = bv.shape
    m_total = config.n_regimes
    r = config.rank
    p = config.priors
    fixed = config.fixed

    if "path" in fixed:
        states = np.asarray(fixed["path"], dtype=np.int64)
    else:
        segments = np.array_split(np.arange(t_total), m_total)
        states = np.concatenate([np.full(len(seg), m + 1) for m, seg in enumerate(segments)])

    iu, ju = np.triu_indices(n, k=1)

    def residual_scale(u_list, v):
        total = 0.0
        cells = 0
        for m in range(m_total):
            idx = regime_layers(states, m)
            means = bilinear_means(u_list[m], v[idx])
            resid = bv[iu, ju, :][:, idx] - means[iu, ju, :]
            total += float((resid**2).sum())
            cells += resid.size
        return total / cells

    candidates = []
    for mode in ("mean", "aligned", "square"):
        u_list = []
        for m in range(m_total):
            idx = regime_layers(states, m)
            layers = bv[:, :, idx]
            if mode == "square":
                mat = np.einsum("ikt,kjt->ij", layers, layers) / idx.size
            elif mode == "aligned":
                # flip layers anti-correlated with the strongest layer so
                # opposite-signed structure pools instead of cancelling
                ref = layers[:, :, int(np.argmax((layers**2).sum(axis=(0, 1))))]
                signs = np.sign(np.tensordot(layers, ref, axes=([0, 1], [0, 1])))
                signs[signs == 0] = 1.0
                mat = (layers * signs[None, None, :]).mean(axis=2)
            else:
                mat = layers.mean(axis=2)
            u_list.append(
                _eig_positions(mat, r, context=f"regime {m + 1}", quartic=mode == "square")
            )
        v = _lstsq_weights(bv, lambda t: u_list[states[t] - 1], iu, ju, t_total, r)
        candidates.append((residual_scale(u_list, v), u_list, v))
    _, u_list, v = min(candidates, key=lambda c: c[0])

    if "U" in fixed:
        u_list = [np.asarray(u, dtype=np.float64).copy() for u in fixed["U"]]
        v = _lstsq_weights(bv, lambda t: u_list[states[t] - 1], iu, ju, t_total, r)
    if "V" in fixed:
        v = np.asarray(fixed["V"], dtype=np.float64).copy()

    sigma2 = np.empty(m_total)
    for m in range(m_total):
        idx = regime_layers(states, m)
        means = bilinear_means(u_list[m], v[idx])
        resid = bv[iu, ju, :][:, idx] - means[iu, ju, :]
        sigma2[m] = max(float((resid**2).mean()), 1e-12)
    if "sigma2" in fixed:
        sigma2 = np.asarray(fixed["sigma2"], dtype=np.float64).copy()

    psi_prior_mean = p.u1 / (p.u0 - 2.0) if p.u0 > 2.0 else p.u1 / p.u0
    psi_v_prior_mean = p.v1 / (p.v0 - 2.0) if p.v0 > 2.0 else p.v1 / p.v0
    mu_u = np.tile(p.mean_u(r), (m_total, 1))
    psi_u = np.full((m_total, r), psi_prior_mean)
    mu_v = np.tile(p.mean_v(r), (m_total, 1))
    psi_v = np.full((m_total, r), psi_v_prior_mean)
    for key, arr in (("mu_u", mu_u), ("psi_u", psi_u), ("mu_v", mu_v), ("psi_v", psi_v)):
        if key in fixed:
            arr[:] = np.asarray(fixed[key], dtype=np.float64)

    beta = float(fixed.get("beta", 0.0))
    gamma = (
        np.asarray(fixed["gamma"], dtype=np.float64).copy()
        if "gamma" in fixed
        else np.ones(t_total)
    )

    if "P" in fixed:
        transition = np.asarray(fixed["P"], dtype=np.float64).copy()
    else:
        transition = np.zeros((m_total, m_total))
        transition[m_total - 1, m_total - 1] = 1.0
        stays, advances = transition_counts(states, m_total)
        for k in range(m_total - 1):
            alpha = max(p.a0 + stays[k] - 1.0, 0.5)
            stay = alpha / (alpha + p.b0 + advances[k])
            transition[k, k] = stay
            transition[k, k + 1] = 1.0 - stay

    state = HmtmState(
        U=u_list,
        mu_u=mu_u,
        psi_u=psi_u,
        V=v,
        mu_v=mu_v,
        psi_v=psi_v,
        sigma2=sigma2,
        beta=beta,
        gamma=gamma,
        path=RegimePath(states, transition),
    )
    state.validate(check_orthogonal="U" not in fixed)
    return state


def gibbs_sweep(
    B,
    state: HmtmState,
    config: HmtmConfig,
    rng: np.random.Generator,
    burnin_phase: bool = False,
    frozen: Iterable[str] = (),
) -> HmtmState:
    """One full sweep over all parameter blocks, mutating ``state`` in place.

    Blocks named in ``config.fixed`` or ``frozen`` are skipped (their current
    values keep conditioning everything else).
    """
    skip = set(config.fixed) | set(frozen)
    m_total = config.n_regimes
    p = config.priors
    for m in range(m_total):
        if "psi_u" not in skip:
            state.psi_u[m] = sample_psi_u(state.U[m], config, rng)
        if "mu_u" not in skip:
            state.mu_u[m] = sample_mu_u(state.U[m], state.psi_u[m], config, rng)
        if "U" not in skip:
            state.U[m] = sample_U(B, state, m, config, rng)
    for m in range(m_total):
        idx = regime_layers(state.path.states, m)
        if "psi_v" not in skip:
            state.psi_v[m] = sample_psi_v(state.V[idx], config, rng)
        if "mu_v" not in skip:
            state.mu_v[m] = sample_mu_v(state.V[idx], state.psi_v[m], config, rng)
        if "V" not in skip:
            state.V[idx] = sample_V(B, state, m, config, rng)
    if config.with_intercept and "beta" not in skip:
        state.beta = sample_beta(B, state, config, rng)
    for m in range(m_total):
        if "sigma2" not in skip:
            state.sigma2[m] = sample_sigma2(B, state, m, config, rng)
    if config.error_kind == "t" and "gamma" not in skip:
        state.gamma = sample_gamma(B, state, config, rng)
    if m_total >= 2 and "path" not in skip:
        states = ffbs_states(B, state, config, rng)
        if burnin_phase:
            states = perturb_singletons(states, config.resolved_perturb_weights(), rng)
        state.path = RegimePath(states, state.path.transition)
    if m_total >= 2 and "P" not in skip:
        state.path = RegimePath(
            state.path.states,
            sample_transition(state.path.states, p.a0, p.b0, rng, m_total),
        )
    return state


def fit_hmtm(B, config: HmtmConfig, progress: bool = False) -> McmcTrace:
    """Run the full sampler and collect thinned post-burn-in draws.

    Deterministic for a given ``(B, config)``: the generator is counter-based
    Philox seeded from ``config.seed``.
    """
    import sys

    bv = data_values(B)
    n, _, t_total = bv.shape
    config.validate()
    m_total = config.n_regimes
    if t_total < 2 * m_total:
        raise ValueError(f"need at least {2 * m_total} layers to host {m_total} regimes")
    if config.rank > n:
        raise ValueError(f"rank {config.rank} exceeds number of nodes {n}")

    rng = make_rng(config.seed)
    state = initialize_state(B, config)
    draws: list[HmtmState] = []
    loglayer_rows: list[np.ndarray] = []
    break_rows: list[np.ndarray] = []
    state_rows: list[np.ndarray] = []
    total = config.burnin + config.mcmc
    for sweep in range(total):
        gibbs_sweep(bv, state, config, rng, burnin_phase=sweep < config.burnin)
        if sweep >= config.burnin and (sweep - config.burnin) % config.thin == 0:
            logf = layer_logdensities(bv, state, config)
            loglayer_rows.append(logf[np.arange(t_total), state.path.states - 1])
            break_rows.append(state.path.break_times)
            state_rows.append(state.path.states.copy())
            draws.append(state.copy())
        if progress and (sweep + 1) % 100 == 0:
            print(f"sweep {sweep + 1}/{total}", file=sys.stderr)

    labels = None
    if isinstance(B, (NetworkTensor, CorrectedTensor)):
        labels = B.node_labels
    return McmcTrace(
        draws=draws,
        loglayer=np.vstack(loglayer_rows),
        breakpoints=np.asarray(break_rows, dtype=np.int64).reshape(len(draws), m_total - 1),
        states=np.vstack(state_rows),
        config=config,
        final_state=state.copy(),
        n_nodes=n,
        n_layers=t_total,
        node_labels=labels,
    )
