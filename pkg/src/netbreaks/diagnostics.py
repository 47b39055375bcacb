"""Model comparison across candidate break counts.

Three complementary diagnostics are provided:

* WAIC on the deviance scale, computed from stored per-layer log predictive
  densities (smaller is better);
* an approximate -2 log marginal likelihood via the candidate's identity
  ``log m(B) = log lik + log prior - log posterior`` evaluated at posterior
  means, with the posterior ordinate Rao-Blackwellized over a sequence of
  reduced Gibbs runs (one per parameter block, each freezing the blocks
  already evaluated);
* the average loss of break points (mean squared deviation of sampled break
  times around their means), which spikes when redundant breaks are imposed.

Marginal-likelihood estimates are known to reward regimes that occupy a
single layer; reports therefore carry a singleton flag so that such verdicts
can be discounted.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .postprocess import identify_columns, posterior_mode_path
from .sampler import (
    HmtmConfig,
    HmtmState,
    McmcTrace,
    RegimePath,
    beta_conditional,
    data_values,
    forward_filter,
    gibbs_sweep,
    layer_logdensities,
    make_rng,
    mu_u_conditional,
    mu_v_conditional,
    psi_u_conditional,
    psi_v_conditional,
    regime_layers,
    sigma2_conditional,
    transition_counts,
)

__all__ = [
    "DiagnosticsReport",
    "ModelComparison",
    "ChibResult",
    "waic",
    "average_loss",
    "regime_change_prob",
    "chib_marginal_likelihood",
    "build_report",
    "compare_models",
]


def waic(trace_or_loglayer) -> float:
    """Deviance-scale WAIC from per-layer log predictive densities.

    ``-2 * (sum_t lppd_t - sum_t var_t)`` where ``lppd_t`` is the log of the
    draw-averaged layer density (log-sum-exp stabilized) and ``var_t`` the
    sample variance (denominator G-1) of the layer's log density over draws.
    """
    ll = trace_or_loglayer.loglayer if isinstance(trace_or_loglayer, McmcTrace) else np.asarray(trace_or_loglayer)
    g = ll.shape[0]
    if g < 2:
        raise ValueError("WAIC needs at least two stored draws")
    lppd = logsumexp(ll, axis=0) - math.log(g)
    penalty = ll.var(axis=0, ddof=1)
    return float(-2.0 * (lppd.sum() - penalty.sum()))


def average_loss(trace_or_breakpoints) -> float:
    """Mean squared deviation of sampled break times around their means."""
    bp = (
        trace_or_breakpoints.breakpoints
        if isinstance(trace_or_breakpoints, McmcTrace)
        else np.asarray(trace_or_breakpoints)
    )
    if bp.ndim != 2 or bp.shape[1] < 1:
        raise ValueError("average loss is undefined for a model with no breaks")
    center = bp.mean(axis=0)
    return float(((bp - center) ** 2).mean())


def regime_change_prob(trace: McmcTrace) -> np.ndarray:
    """Per-layer posterior probability that the regime just changed (entry 1 is 0)."""
    if trace.n_regimes < 2:
        raise ValueError("regime change probabilities need at least two regimes")
    changed = trace.states[:, 1:] != trace.states[:, :-1]
    return np.concatenate([[0.0], changed.mean(axis=0)])


# ---------------------------------------------------------------------------
# approximate log marginal likelihood


@dataclass
class ChibResult:
    neg2_log_marginal: float
    neg2_log_lik: float
    log_lik: float
    log_prior: float
    log_posterior: float
    block_ordinates: dict[str, float]
    block_mcse: dict[str, float]


def _starred_values(trace: McmcTrace) -> dict:
    """Posterior means of every block (positions/weights identified first)."""
    m_total = trace.n_regimes
    g = trace.n_draws
    star: dict = {
        "mu_u": np.mean([d.mu_u for d in trace.draws], axis=0),
        "psi_u": np.mean([d.psi_u for d in trace.draws], axis=0),
        "mu_v": np.mean([d.mu_v for d in trace.draws], axis=0),
        "psi_v": np.mean([d.psi_v for d in trace.draws], axis=0),
        "sigma2": np.mean([d.sigma2 for d in trace.draws], axis=0),
        "beta": float(np.mean([d.beta for d in trace.draws])),
        "gamma": np.mean([d.gamma for d in trace.draws], axis=0),
    }
    u_sum = [np.zeros_like(trace.draws[0].U[m]) for m in range(m_total)]
    v_sum = np.zeros_like(trace.draws[0].V)
    for d in trace.draws:
        u_id, v_id = identify_columns(d.U, d.V)
        for m in range(m_total):
            u_sum[m] += u_id[m]
        v_sum += v_id
    star["U"] = [u / g for u in u_sum]
    star["V"] = v_sum / g
    stay = np.mean([np.diag(d.path.transition) for d in trace.draws], axis=0)
    p = np.zeros((m_total, m_total))
    p[m_total - 1, m_total - 1] = 1.0
    for k in range(m_total - 1):
        p[k, k] = stay[k]
        p[k, k + 1] = 1.0 - stay[k]
    star["P"] = p
    return star


def _ordinate_mu_u(bv, state, star, config) -> float:
    total = 0.0
    for m in range(config.n_regimes):
        mean, var = mu_u_conditional(state.U[m], state.psi_u[m], config.priors)
        total += float(stats.norm.logpdf(star["mu_u"][m], mean, np.sqrt(var)).sum())
    return total


def _ordinate_psi_u(bv, state, star, config) -> float:
    total = 0.0
    for m in range(config.n_regimes):
        shape, scale = psi_u_conditional(state.U[m], config.priors)
        total += float(stats.invgamma.logpdf(star["psi_u"][m], shape, scale=scale).sum())
    return total


def _ordinate_mu_v(bv, state, star, config) -> float:
    total = 0.0
    for m in range(config.n_regimes):
        idx = regime_layers(state.path.states, m)
        mean, var = mu_v_conditional(state.V[idx], state.psi_v[m], config.priors)
        total += float(stats.norm.logpdf(star["mu_v"][m], mean, np.sqrt(var)).sum())
    return total


def _ordinate_psi_v(bv, state, star, config) -> float:
    total = 0.0
    for m in range(config.n_regimes):
        idx = regime_layers(state.path.states, m)
        shape, scale = psi_v_conditional(state.V[idx], config.priors)
        total += float(stats.invgamma.logpdf(star["psi_v"][m], shape, scale=scale).sum())
    return total


def _ordinate_beta(bv, state, star, config) -> float:
    b1, b_var = beta_conditional(bv, state, config)
    return float(stats.norm.logpdf(star["beta"], b1, math.sqrt(b_var)))


def _ordinate_sigma2(bv, state, star, config) -> float:
    total = 0.0
    for m in range(config.n_regimes):
        shape, scale = sigma2_conditional(bv, state, m, config)
        total += float(stats.invgamma.logpdf(star["sigma2"][m], shape, scale=scale))
    return total


def _ordinate_P(bv, state, star, config) -> float:
    p = config.priors
    m_total = config.n_regimes
    stays, advances = transition_counts(state.path.states, m_total)
    total = 0.0
    for k in range(m_total - 1):
        alpha = p.a0 + stays[k] - 1.0
        if alpha <= 0.0:
            raise ValueError(
                f"insufficient dwell count in regime {k + 1} for prior a0={p.a0} "
                "while evaluating the transition ordinate"
            )
        total += float(stats.beta.logpdf(star["P"][k, k], alpha, p.b0 + advances[k]))
    return total


_ORDINATES = {
    "mu_u": _ordinate_mu_u,
    "psi_u": _ordinate_psi_u,
    "mu_v": _ordinate_mu_v,
    "psi_v": _ordinate_psi_v,
    "beta": _ordinate_beta,
    "sigma2": _ordinate_sigma2,
    "P": _ordinate_P,
}


def _log_prior_at_star(star: dict, config: HmtmConfig, blocks: list[str]) -> float:
    p = config.priors
    r = config.rank
    total = 0.0
    if "mu_u" in blocks:
        total += float(
            stats.norm.logpdf(star["mu_u"], p.mean_u(r)[None, :], np.sqrt(star["psi_u"])).sum()
        )
    if "psi_u" in blocks:
        total += float(stats.invgamma.logpdf(star["psi_u"], p.u0 / 2.0, scale=p.u1 / 2.0).sum())
    if "mu_v" in blocks:
        total += float(
            stats.norm.logpdf(star["mu_v"], p.mean_v(r)[None, :], np.sqrt(star["psi_v"])).sum()
        )
    if "psi_v" in blocks:
        total += float(stats.invgamma.logpdf(star["psi_v"], p.v0 / 2.0, scale=p.v1 / 2.0).sum())
    if "beta" in blocks:
        total += float(stats.norm.logpdf(star["beta"], p.b_beta0, math.sqrt(p.B_beta0)))
    if "sigma2" in blocks:
        total += float(stats.invgamma.logpdf(star["sigma2"], p.c0 / 2.0, scale=p.d0 / 2.0).sum())
    if "P" in blocks:
        for k in range(config.n_regimes - 1):
            total += float(stats.beta.logpdf(star["P"][k, k], p.a0, p.b0))
    return total


def _logmeanexp_and_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    g = values.size
    peak = values.max()
    w = np.exp(values - peak)
    mean_w = w.mean()
    est = peak + math.log(mean_w)
    if g < 2:
        return est, math.inf
    se = float(w.std(ddof=1) / (mean_w * math.sqrt(g)))
    return est, se


def _starred_state(trace: McmcTrace, star: dict) -> HmtmState:
    """A state at the posterior means, used for the likelihood ordinate."""
    state = trace.final_state.copy()
    state.U = [u.copy() for u in star["U"]]
    state.V = star["V"].copy()
    state.mu_u = star["mu_u"].copy()
    state.psi_u = star["psi_u"].copy()
    state.mu_v = star["mu_v"].copy()
    state.psi_v = star["psi_v"].copy()
    state.sigma2 = star["sigma2"].copy()
    state.beta = star["beta"]
    state.gamma = star["gamma"].copy()
    state.path = RegimePath(state.path.states, star["P"])
    return state


def chib_marginal_likelihood(
    B,
    config: HmtmConfig,
    trace: McmcTrace,
    reduced_mcmc: int | None = None,
    seed: int | None = None,
    mcse_warn: float = 0.5,
    details: bool = False,
):
    """Approximate ``-2 log m(B)`` at the posterior means.

    The likelihood ordinate marginalizes the hidden states through the
    forward filter at the posterior means; the posterior ordinate is built
    from one reduced Gibbs run per block, in the order ``mu_u, psi_u, mu_v,
    psi_v[, beta], sigma2[, P]``, each run freezing the blocks already
    evaluated at their posterior means and Rao-Blackwellizing the block's
    full-conditional density over the run's draws.  Blocks clamped in
    ``config.fixed`` are point masses: they are skipped and contribute to
    neither the prior nor the posterior ordinate.

    A reduced-run ordinate with large Monte-Carlo error triggers a warning,
    not a failure.  Deterministic given ``seed`` (default: derived from
    ``config.seed``).
    """
    bv = data_values(B)
    n_keep = reduced_mcmc if reduced_mcmc is not None else config.mcmc
    reburn = max(10, n_keep // 10)
    star = _starred_values(trace)

    blocks = ["mu_u", "psi_u", "mu_v", "psi_v"]
    if config.with_intercept:
        blocks.append("beta")
    blocks.append("sigma2")
    if config.n_regimes >= 2:
        blocks.append("P")
    blocks = [b for b in blocks if b not in config.fixed]

    star_state = _starred_state(trace, star)
    logf = layer_logdensities(bv, star_state, config)
    _, log_lik = forward_filter(logf, star["P"])
    log_prior = _log_prior_at_star(star, config, blocks)

    if seed is None:
        seed_seq = np.random.SeedSequence(entropy=config.seed, spawn_key=(1,))
    else:
        seed_seq = np.random.SeedSequence(entropy=seed)
    rng = make_rng(seed_seq)

    state = trace.final_state.copy()
    frozen: list[str] = []
    ordinates: dict[str, float] = {}
    mcses: dict[str, float] = {}
    log_posterior = 0.0
    for block in blocks:
        for _ in range(reburn):
            gibbs_sweep(bv, state, config, rng, burnin_phase=False, frozen=frozen)
        values = np.empty(n_keep)
        for g in range(n_keep):
            gibbs_sweep(bv, state, config, rng, burnin_phase=False, frozen=frozen)
            values[g] = _ORDINATES[block](bv, state, star, config)
        est, se = _logmeanexp_and_se(values)
        ordinates[block] = est
        mcses[block] = se
        log_posterior += est
        if se > mcse_warn:
            warnings.warn(
                f"ordinate for block {block!r} has Monte-Carlo SE {se:.3f} "
                f"(> {mcse_warn}); the marginal-likelihood estimate may be unstable",
                RuntimeWarning,
                stacklevel=2,
            )
        _install_block(state, block, star)
        frozen.append(block)

    log_marg = log_lik + log_prior - log_posterior
    result = ChibResult(
        neg2_log_marginal=-2.0 * log_marg,
        neg2_log_lik=-2.0 * log_lik,
        log_lik=log_lik,
        log_prior=log_prior,
        log_posterior=log_posterior,
        block_ordinates=ordinates,
        block_mcse=mcses,
    )
    return result if details else result.neg2_log_marginal


def _install_block(state: HmtmState, block: str, star: dict) -> None:
    if block == "beta":
        state.beta = star["beta"]
    elif block == "P":
        state.path = RegimePath(state.path.states, star["P"].copy())
    elif block == "mu_u":
        state.mu_u = star["mu_u"].copy()
    elif block == "psi_u":
        state.psi_u = star["psi_u"].copy()
    elif block == "mu_v":
        state.mu_v = star["mu_v"].copy()
    elif block == "psi_v":
        state.psi_v = star["psi_v"].copy()
    elif block == "sigma2":
        state.sigma2 = star["sigma2"].copy()
    else:  # pragma: no cover
        raise KeyError(block)


# ---------------------------------------------------------------------------
# reports and model comparison


@dataclass
class DiagnosticsReport:
    n_breaks: int
    waic: float
    neg2_log_marginal: float | None
    neg2_log_lik_at_means: float | None
    average_loss: float | None
    regime_change_prob: np.ndarray
    breakpoint_summary: list[dict]
    singleton_flag: bool

    def to_dict(self) -> dict:
        return {
            "n_breaks": self.n_breaks,
            "waic": self.waic,
            "neg2_log_marginal": self.neg2_log_marginal,
            "neg2_log_lik_at_means": self.neg2_log_lik_at_means,
            "average_loss": self.average_loss,
            "regime_change_prob": np.asarray(self.regime_change_prob).tolist(),
            "breakpoint_summary": self.breakpoint_summary,
            "singleton_flag": self.singleton_flag,
        }


def build_report(
    trace: McmcTrace,
    B=None,
    marglik: bool = True,
    reduced_mcmc: int | None = None,
    seed: int | None = None,
) -> DiagnosticsReport:
    """Assemble every diagnostic for one fitted model.

    The marginal likelihood needs the data; pass ``marglik=False`` (or no
    ``B``) to skip the reduced runs.
    """
    m_total = trace.n_regimes
    w = waic(trace)
    loss = average_loss(trace) if m_total >= 2 else None
    rcp = regime_change_prob(trace) if m_total >= 2 else np.zeros(trace.n_layers)
    bp_summary = []
    for k in range(m_total - 1):
        col = trace.breakpoints[:, k]
        bp_summary.append(
            {"break": k + 1, "mean": float(col.mean()), "sd": float(col.std(ddof=0))}
        )
    mode = posterior_mode_path(trace.states, m_total)
    counts = np.bincount(mode, minlength=m_total + 1)[1:]
    singleton = bool(counts.min() == 1) if m_total >= 2 else False
    neg2_marg = None
    neg2_ll = None
    if marglik and B is not None:
        res = chib_marginal_likelihood(
            B, trace.config, trace, reduced_mcmc=reduced_mcmc, seed=seed, details=True
        )
        neg2_marg = res.neg2_log_marginal
        neg2_ll = res.neg2_log_lik
    return DiagnosticsReport(
        n_breaks=trace.config.n_breaks,
        waic=w,
        neg2_log_marginal=neg2_marg,
        neg2_log_lik_at_means=neg2_ll,
        average_loss=loss,
        regime_change_prob=rcp,
        breakpoint_summary=bp_summary,
        singleton_flag=singleton,
    )


@dataclass
class ModelComparison:
    rows: list[DiagnosticsReport]  # sorted by WAIC, best first
    verdict_n_breaks: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "verdict_n_breaks": self.verdict_n_breaks,
            "notes": self.notes,
            "models": [r.to_dict() for r in self.rows],
        }

    def to_text(self) -> str:
        headers = ["breaks", "WAIC", "-2logML", "-2loglik", "avg loss", "singleton"]
        body = []
        for r in self.rows:
            body.append(
                [
                    str(r.n_breaks),
                    f"{r.waic:.2f}",
                    "-" if r.neg2_log_marginal is None else f"{r.neg2_log_marginal:.2f}",
                    "-" if r.neg2_log_lik_at_means is None else f"{r.neg2_log_lik_at_means:.2f}",
                    "-" if r.average_loss is None else f"{r.average_loss:.3f}",
                    "yes" if r.singleton_flag else "no",
                ]
            )
        widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(headers)]
        lines = ["  ".join(h.rjust(widths[i]) for i, h in enumerate(headers))]
        for row in body:
            lines.append("  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row)))
        lines.append(f"verdict: {self.verdict_n_breaks} break(s) (smallest WAIC)")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def compare_models(reports: list[DiagnosticsReport]) -> ModelComparison:
    """Rank candidate models by WAIC and annotate diagnostic disagreements.

    The verdict always follows WAIC.  When the marginal likelihood prefers a
    different model, the disagreement is noted, and when the marginal-
    likelihood winner contains a singleton regime the note says the verdict
    can be discounted on those grounds.
    """
    if not reports:
        raise ValueError("no reports to compare")
    rows = sorted(reports, key=lambda r: r.waic)
    verdict = rows[0].n_breaks
    notes: list[str] = []
    with_ml = [r for r in reports if r.neg2_log_marginal is not None]
    if with_ml:
        ml_best = min(with_ml, key=lambda r: r.neg2_log_marginal)
        if ml_best.n_breaks != verdict:
            msg = (
                f"-2*log marginal prefers the {ml_best.n_breaks}-break model while WAIC "
                f"prefers {verdict} break(s)"
            )
            if ml_best.singleton_flag:
                msg += (
                    "; the marginal-likelihood winner contains a singleton regime "
                    "(one layer), which inflates likelihood ordinates, so the "
                    "disagreement can be ignored"
                )
            notes.append(msg)
    singletons = [r.n_breaks for r in reports if r.singleton_flag]
    if singletons:
        pretty = ", ".join(str(k) for k in sorted(singletons))
        notes.append(f"models with a singleton regime at the posterior mode: {pretty} break(s)")
    return ModelComparison(rows=rows, verdict_n_breaks=verdict, notes=notes)
