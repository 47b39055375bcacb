"""Planted-partition generators for longitudinal networks with regime changes.

Each scenario plants a schedule of block memberships over ``T`` layers; within
a layer, dyads inside the same block connect with probability ``p_in`` and
dyads across blocks with ``p_out``.  Schedules change by splitting the largest
block into equal halves or merging the two smallest blocks, so group counts
evolve deterministically:

* ``constant``    one regime, two blocks of sizes ``(n, 2n)``
* ``split``       ``(n, 2n)`` -> three blocks of ``n``
* ``merge``       three blocks of ``n`` -> ``(2n, n)``
* ``merge_split`` 3 -> 2 -> 3 blocks
* ``split_merge`` 2 -> 3 -> 2 blocks

Randomness comes from numpy's counter-based Philox(4x64-10) bit generator,
seeded through ``SeedSequence(seed)``; per layer, dyads are drawn in row-major
upper-triangular order, so streams are reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import NetworkTensor

__all__ = [
    "Scenario",
    "BlockSchedule",
    "EdgeProbabilities",
    "default_schedule",
    "make_block_network_change",
    "planted_partition_layer",
]


class Scenario(str, Enum):
    CONSTANT = "constant"
    SPLIT = "split"
    MERGE = "merge"
    MERGE_SPLIT = "merge_split"
    SPLIT_MERGE = "split_merge"


_N_BREAKS = {
    Scenario.CONSTANT: 0,
    Scenario.SPLIT: 1,
    Scenario.MERGE: 1,
    Scenario.MERGE_SPLIT: 2,
    Scenario.SPLIT_MERGE: 2,
}


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel blocks by first occurrence so schedules compare structurally."""
    out = np.empty_like(labels)
    mapping: dict[int, int] = {}
    for idx, lab in enumerate(labels):
        mapping.setdefault(int(lab), len(mapping))
        out[idx] = mapping[int(lab)]
    return out


def _block_sizes(labels: np.ndarray) -> dict[int, int]:
    uniq, counts = np.unique(labels, return_counts=True)
    return {int(u): int(c) for u, c in zip(uniq, counts)}


def _split_largest(labels: np.ndarray) -> np.ndarray:
    sizes = _block_sizes(labels)
    target = max(sizes, key=lambda lab: (sizes[lab], -lab))
    if sizes[target] % 2 != 0:
        raise ValueError(f"cannot split block {target} of odd size {sizes[target]}")
    out = labels.copy()
    members = np.flatnonzero(labels == target)
    new_label = max(sizes) + 1
    out[members[len(members) // 2 :]] = new_label
    return _canonical(out)


def _merge_smallest(labels: np.ndarray) -> np.ndarray:
    sizes = _block_sizes(labels)
    if len(sizes) < 2:
        raise ValueError("cannot merge a single block")
    order = sorted(sizes, key=lambda lab: (sizes[lab], lab))
    a, b = order[0], order[1]
    out = labels.copy()
    out[out == max(a, b)] = min(a, b)
    return _canonical(out)


def _is_split(before: np.ndarray, after: np.ndarray) -> bool:
    pairs = {(int(x), int(y)) for x, y in zip(before, after)}
    image: dict[int, set[int]] = {}
    for x, y in pairs:
        image.setdefault(x, set()).add(y)
    split_sources = [x for x, ys in image.items() if len(ys) == 2]
    if len(split_sources) != 1 or any(len(ys) != 1 for x, ys in image.items() if x != split_sources[0]):
        return False
    y1, y2 = sorted(image[split_sources[0]])
    sizes = _block_sizes(after)
    return sizes[y1] == sizes[y2]


def _is_merge(before: np.ndarray, after: np.ndarray) -> bool:
    return _is_split(after, before)


@dataclass
class BlockSchedule:
    """Block memberships per regime plus the layer indices after which they change.

    ``break_times`` holds 1-based layer indices: a break at ``tau`` means the
    next regime starts at layer ``tau + 1``.  ``memberships`` has one row per
    regime and one column per node.
    """

    scenario: Scenario
    base_block_size: int
    n_layers: int
    break_times: list[int]
    memberships: np.ndarray

    def __post_init__(self) -> None:
        self.scenario = Scenario(self.scenario)
        self.memberships = np.asarray(self.memberships, dtype=np.int64)
        if self.memberships.ndim != 2:
            raise ValueError("memberships must be a (regimes, nodes) array")
        if self.base_block_size < 2:
            raise ValueError("base block size must be at least 2")
        expected = _N_BREAKS[self.scenario]
        if len(self.break_times) != expected:
            raise ValueError(
                f"scenario {self.scenario.value} needs {expected} break(s), "
                f"got {len(self.break_times)}"
            )
        if self.memberships.shape[0] != expected + 1:
            raise ValueError("memberships must have one row per regime")
        prev = 0
        for tau in self.break_times:
            if not (1 <= tau <= self.n_layers - 1):
                raise ValueError(f"break time {tau} outside [1, {self.n_layers - 1}]")
            if tau <= prev:
                raise ValueError("break times must be strictly increasing")
            prev = tau
        for r in range(1, self.memberships.shape[0]):
            before, after = self.memberships[r - 1], self.memberships[r]
            if not (_is_split(before, after) or _is_merge(before, after)):
                raise ValueError(
                    f"regimes {r} -> {r + 1} are not related by one equal-size split or merge"
                )

    @property
    def n_nodes(self) -> int:
        return self.memberships.shape[1]

    @property
    def n_regimes(self) -> int:
        return self.memberships.shape[0]

    def regime_of_layer(self, t: int) -> int:
        """0-based regime index active at 1-based layer ``t``."""
        r = 0
        for tau in self.break_times:
            if t > tau:
                r += 1
        return r


@dataclass
class EdgeProbabilities:
    p_in: float
    p_out: float
    allow_dissortative: bool = False

    def __post_init__(self) -> None:
        for name, p in (("p_in", self.p_in), ("p_out", self.p_out)):
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name}={p} is not a probability")
        if self.p_out > self.p_in and not self.allow_dissortative:
            raise ValueError(
                "p_out > p_in is dissortative; pass allow_dissortative=True if intended"
            )


def default_schedule(scenario: Scenario | str, n: int, T: int) -> BlockSchedule:
    """Standard schedule: one break at T//2, or two breaks at T//4 and 3T//4."""
    scenario = Scenario(scenario)
    if n < 2:
        raise ValueError("base block size n must be at least 2")
    if T < 4:
        raise ValueError("need at least 4 layers")
    n_breaks = _N_BREAKS[scenario]
    if n_breaks == 0:
        breaks: list[int] = []
    elif n_breaks == 1:
        breaks = [T // 2]
    else:
        breaks = [T // 4, (3 * T) // 4]
        if breaks[0] < 1 or breaks[1] > T - 1 or breaks[0] >= breaks[1]:
            raise ValueError(f"T={T} is too short to host two breaks")
    two_groups = np.array([0] * n + [1] * (2 * n))
    three_groups = np.array([0] * n + [1] * n + [2] * n)
    if scenario is Scenario.CONSTANT:
        memberships = [two_groups]
    elif scenario is Scenario.SPLIT:
        memberships = [two_groups, _split_largest(two_groups)]
    elif scenario is Scenario.MERGE:
        memberships = [three_groups, _merge_smallest(three_groups)]
    elif scenario is Scenario.MERGE_SPLIT:
        merged = _merge_smallest(three_groups)
        memberships = [three_groups, merged, _split_largest(merged)]
    else:  # SPLIT_MERGE
        split = _split_largest(two_groups)
        memberships = [two_groups, split, _merge_smallest(split)]
    return BlockSchedule(
        scenario=scenario,
        base_block_size=n,
        n_layers=T,
        break_times=breaks,
        memberships=np.vstack(memberships),
    )


def planted_partition_layer(
    labels: np.ndarray, p_in: float, p_out: float, rng: np.random.Generator
) -> np.ndarray:
    """One symmetric binary layer; upper-triangular dyads drawn in row-major order."""
    labels = np.asarray(labels)
    n = labels.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    probs = np.where(labels[iu] == labels[ju], p_in, p_out)
    draws = (rng.random(iu.shape[0]) < probs).astype(np.float64)
    layer = np.zeros((n, n))
    layer[iu, ju] = draws
    layer[ju, iu] = draws
    return layer


def make_block_network_change(
    schedule: BlockSchedule, probs: EdgeProbabilities, seed: int
) -> NetworkTensor:
    """Draw the full binary tensor for a schedule; deterministic given ``seed``."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    n, t_total = schedule.n_nodes, schedule.n_layers
    values = np.empty((n, n, t_total))
    for t in range(1, t_total + 1):
        labels = schedule.memberships[schedule.regime_of_layer(t)]
        values[:, :, t - 1] = planted_partition_layer(labels, probs.p_in, probs.p_out, rng)
    return NetworkTensor(values)
