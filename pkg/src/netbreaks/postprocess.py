"""Turn traces into interpretable structure: regime summaries, block recovery,
and CSV exports of latent positions and generation weights."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import orthogonal_procrustes

from .sampler import McmcTrace

__all__ = [
    "RegimeSummary",
    "identify_columns",
    "posterior_mode_path",
    "summarize_regimes",
    "kmeans_blocks",
    "export_latent",
    "export_rules",
]


@dataclass
class RegimeSummary:
    """Posterior summary of one regime under the posterior-mode path."""

    regime_id: int  # 1-based
    U_mean: np.ndarray  # (N, R)
    v_regime_avg: np.ndarray  # (R,)
    layer_range: tuple[int, int]  # 1-based, inclusive
    cluster_labels: np.ndarray | None = None


def identify_columns(U_list: list[np.ndarray], V: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Resolve column order/sign ambiguity for reporting.

    Columns are reordered jointly in the positions and the weights by
    descending time-averaged absolute weight, then every position column is
    sign-flipped so that its largest-magnitude loading is positive.  Both
    operations leave the model means unchanged (a position sign flip cancels
    in ``u_i * u_j``, and permutations are applied to U and V together), and
    applying the convention twice is a no-op.
    """
    order = np.argsort(-np.abs(V).mean(axis=0), kind="stable")
    v_out = V[:, order]
    u_out = []
    for u in U_list:
        u_perm = u[:, order]
        flipped = u_perm.copy()
        for r in range(flipped.shape[1]):
            k = int(np.argmax(np.abs(flipped[:, r])))
            if flipped[k, r] < 0:
                flipped[:, r] = -flipped[:, r]
        u_out.append(flipped)
    return u_out, v_out


def posterior_mode_path(states: np.ndarray, n_regimes: int) -> np.ndarray:
    """Pointwise majority-vote path, repaired to a valid forward-moving path.

    Each break is placed at the latest layer whose vote is still in the
    earlier regime, then break positions are clipped to be strictly
    increasing and to leave room for every regime.
    """
    states = np.asarray(states)
    g, t_total = states.shape
    votes = np.empty(t_total, dtype=np.int64)
    for t in range(t_total):
        counts = np.bincount(states[:, t], minlength=n_regimes + 1)
        votes[t] = int(np.argmax(counts[1:])) + 1
    if n_regimes == 1:
        return np.ones(t_total, dtype=np.int64)
    taus = np.empty(n_regimes - 1, dtype=np.int64)
    for m in range(1, n_regimes):
        feasible = np.flatnonzero(votes <= m)
        taus[m - 1] = feasible[-1] + 1 if feasible.size else m
    for m in range(n_regimes - 2, -1, -1):
        upper = t_total - (n_regimes - 1 - m)
        taus[m] = min(taus[m], upper)
        if m + 1 < n_regimes - 1:
            taus[m] = min(taus[m], taus[m + 1] - 1)
    for m in range(n_regimes - 1):
        lower = m + 1 if m == 0 else taus[m - 1] + 1
        taus[m] = max(taus[m], lower)
    from .sampler import path_from_breaks

    return path_from_breaks(taus, t_total)


def _identified_stacks(trace: McmcTrace) -> tuple[np.ndarray, np.ndarray]:
    """Per-draw identified positions (G, M, N, R) and weights (G, T, R)."""
    g = trace.n_draws
    m_total = trace.n_regimes
    u_stack = np.empty((g, m_total, trace.n_nodes, trace.config.rank))
    v_stack = np.empty((g, trace.n_layers, trace.config.rank))
    for i, draw in enumerate(trace.draws):
        u_id, v_id = identify_columns(draw.U, draw.V)
        for m in range(m_total):
            u_stack[i, m] = u_id[m]
        v_stack[i] = v_id
    return u_stack, v_stack


def summarize_regimes(trace: McmcTrace) -> list[RegimeSummary]:
    """Posterior-mode regimes with identified position means and average weights."""
    if trace.n_draws == 0:
        raise ValueError("empty trace")
    m_total = trace.n_regimes
    mode = posterior_mode_path(trace.states, m_total)
    u_stack, v_stack = _identified_stacks(trace)
    u_mean = u_stack.mean(axis=0)
    v_mean = v_stack.mean(axis=0)
    out = []
    for m in range(m_total):
        layers = np.flatnonzero(mode == m + 1)
        first, last = int(layers[0]) + 1, int(layers[-1]) + 1
        out.append(
            RegimeSummary(
                regime_id=m + 1,
                U_mean=u_mean[m],
                v_regime_avg=v_mean[layers].mean(axis=0),
                layer_range=(first, last),
            )
        )
    return out


def kmeans_blocks(
    U_mean: np.ndarray, k: int, restarts: int = 10, seed: int = 0
) -> np.ndarray:
    """Lloyd's k-means with random restarts; labels are 1..k.

    Each restart initializes centers from ``k`` distinct rows, iterates until
    the assignment is stable, and the restart with the smallest within-cluster
    sum of squares wins.  Deterministic given ``seed``.
    """
    x = np.asarray(U_mean, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} out of range for {n} points")
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    distinct = np.unique(x, axis=0)
    if distinct.shape[0] < k:
        raise ValueError(f"k={k} exceeds the {distinct.shape[0]} distinct rows")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    best_labels: np.ndarray | None = None
    best_wcss = np.inf
    for _ in range(restarts):
        pick = rng.choice(distinct.shape[0], size=k, replace=False)
        centers = distinct[pick].copy()
        labels = np.zeros(n, dtype=np.int64)
        for _ in range(300):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = np.argmin(d2, axis=1)
            for c in range(k):
                members = new_labels == c
                if not np.any(members):
                    # re-seed an empty cluster at the worst-fit point
                    far = int(np.argmax(d2[np.arange(n), new_labels]))
                    centers[c] = x[far]
                    new_labels[far] = c
                else:
                    centers[c] = x[members].mean(axis=0)
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        wcss = float(d2[np.arange(n), labels].sum())
        if wcss < best_wcss - 1e-12:
            best_wcss = wcss
            best_labels = labels.copy()
    assert best_labels is not None
    # canonical labels by first appearance, 1-based
    remap: dict[int, int] = {}
    out = np.empty(n, dtype=np.int64)
    for i, lab in enumerate(best_labels):
        remap.setdefault(int(lab), len(remap) + 1)
        out[i] = remap[int(lab)]
    return out


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def export_latent(
    summaries: list[RegimeSummary],
    out_dir: str | Path,
    node_labels: list[str] | None = None,
) -> list[Path]:
    """One CSV per regime: ``node,label,dim_1..dim_R,cluster``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for summ in summaries:
        n, r = summ.U_mean.shape
        rows = []
        for i in range(n):
            label = node_labels[i] if node_labels else f"n{i}"
            cluster = "" if summ.cluster_labels is None else int(summ.cluster_labels[i])
            rows.append([i, label] + [repr(float(v)) for v in summ.U_mean[i]] + [cluster])
        header = ["node", "label"] + [f"dim_{d + 1}" for d in range(r)] + ["cluster"]
        path = out_dir / f"latent_regime{summ.regime_id}.csv"
        _write_csv(path, header, rows)
        written.append(path)
    return written


def export_rules(trace: McmcTrace, out_dir: str | Path) -> Path:
    """Per-layer weight summary: ``t,regime,v_r,v_r_lo,v_r_hi`` for each dimension.

    Bounds are the central 95% posterior interval across draws, after the
    identification convention is applied to every draw.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, v_stack = _identified_stacks(trace)
    mode = posterior_mode_path(trace.states, trace.n_regimes)
    v_mean = v_stack.mean(axis=0)
    v_lo = np.quantile(v_stack, 0.025, axis=0)
    v_hi = np.quantile(v_stack, 0.975, axis=0)
    r = v_mean.shape[1]
    header = ["t", "regime"]
    for d in range(r):
        header += [f"v_{d + 1}", f"v_{d + 1}_lo", f"v_{d + 1}_hi"]
    rows = []
    for t in range(trace.n_layers):
        row: list = [t + 1, int(mode[t])]
        for d in range(r):
            row += [repr(float(v_mean[t, d])), repr(float(v_lo[t, d])), repr(float(v_hi[t, d]))]
        rows.append(row)
    path = out_dir / "rules.csv"
    _write_csv(path, header, rows)
    return path
