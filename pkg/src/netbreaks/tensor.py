"""Symmetric network tensors, spectral/modularity null models, degree correction.

A longitudinal network with ``N`` nodes observed over ``T`` layers is stored
densely as an ``(N, N, T)`` float array of symmetric, zero-diagonal layers.
Degree correction subtracts a per-layer null model from each layer so that
downstream latent-position estimates pick up group structure instead of raw
degree/density effects.  Two null models are supported:

* principal eigenpair: ``omega_t = lambda_t * outer(u_t, u_t)`` built from the
  eigenvalue of largest magnitude of layer ``t``;
* modularity expectation: ``omega_t[i, j] = k_i * k_j / (2m)`` with ``k`` the
  per-layer weighted degrees and ``2m`` their sum.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "NullKind",
    "NetworkTensor",
    "NullModel",
    "CorrectedTensor",
    "load_tensor",
    "principal_eigen",
    "degree_correct",
    "read_edge_list",
    "save_tensor_json",
    "load_tensor_json",
]


class NullKind(str, Enum):
    """Which per-layer null model to subtract."""

    PRINCIPAL_EIGEN = "eigen"
    MODULARITY = "modularity"


def _validate_layers(values: np.ndarray) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim != 3 or values.shape[0] != values.shape[1]:
        raise ValueError(f"expected an (N, N, T) array, got shape {values.shape}")
    if values.shape[2] < 1:
        raise ValueError("tensor needs at least one layer")
    if not np.all(np.isfinite(values)):
        raise ValueError("tensor contains non-finite entries")
    if not np.array_equal(values, values.transpose(1, 0, 2)):
        raise ValueError("layers must be symmetric")
    diag = values[np.arange(values.shape[0]), np.arange(values.shape[0]), :]
    if np.any(diag != 0.0):
        raise ValueError("layer diagonals must be zero (self-ties are not modeled)")
    return values


def _validate_labels(labels: list[str] | None, n_nodes: int) -> None:
    if labels is not None and len(labels) != n_nodes:
        raise ValueError(f"got {len(labels)} node labels for {n_nodes} nodes")


@dataclass
class NetworkTensor:
    """Raw dyadic data: ``values[i, j, t]`` is the weight of dyad (i, j) in layer t."""

    values: np.ndarray
    node_labels: list[str] | None = None

    def __post_init__(self) -> None:
        self.values = _validate_layers(self.values)
        _validate_labels(self.node_labels, self.n_nodes)

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_layers(self) -> int:
        return self.values.shape[2]

    def layer(self, t: int) -> np.ndarray:
        return self.values[:, :, t]


@dataclass
class NullModel:
    """Per-layer null expectations removed from a tensor.

    For ``PRINCIPAL_EIGEN`` the fields are ``lambdas`` (T,) and unit ``vectors``
    (T, N); for ``MODULARITY`` they are ``degrees`` (T, N) and ``total_m`` (T,)
    with ``total_m[t] == degrees[t].sum() / 2``.
    """

    kind: NullKind
    lambdas: np.ndarray | None = None
    vectors: np.ndarray | None = None
    degrees: np.ndarray | None = None
    total_m: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.kind = NullKind(self.kind)
        if self.kind is NullKind.PRINCIPAL_EIGEN:
            if self.lambdas is None or self.vectors is None:
                raise ValueError("eigen null model needs lambdas and vectors")
            self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
            self.vectors = np.asarray(self.vectors, dtype=np.float64)
            norms = np.linalg.norm(self.vectors, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-10):
                raise ValueError("eigen null vectors must have unit norm")
        else:
            if self.degrees is None or self.total_m is None:
                raise ValueError("modularity null model needs degrees and total_m")
            self.degrees = np.asarray(self.degrees, dtype=np.float64)
            self.total_m = np.asarray(self.total_m, dtype=np.float64)
            if np.any(np.abs(self.total_m - self.degrees.sum(axis=1) / 2.0) > 1e-10):
                raise ValueError("total_m must equal sum(degrees)/2 per layer")

    @property
    def n_layers(self) -> int:
        arr = self.lambdas if self.kind is NullKind.PRINCIPAL_EIGEN else self.total_m
        return int(arr.shape[0])

    def omega(self, t: int) -> np.ndarray:
        """Null expectation matrix for layer ``t`` (symmetric, diagonal included)."""
        if self.kind is NullKind.PRINCIPAL_EIGEN:
            u = self.vectors[t]
            return self.lambdas[t] * np.outer(u, u)
        k = self.degrees[t]
        return np.outer(k, k) / (2.0 * self.total_m[t])


@dataclass
class CorrectedTensor:
    """Degree-corrected data ``B`` together with the null model that was removed.

    Off-diagonal entries reconstruct the source tensor:
    ``B[i, j, t] + omega_t[i, j] == Y[i, j, t]`` for ``i != j``.
    """

    values: np.ndarray
    null_model: NullModel
    node_labels: list[str] | None = None

    def __post_init__(self) -> None:
        self.values = _validate_layers(self.values)
        _validate_labels(self.node_labels, self.n_nodes)
        if self.null_model.n_layers != self.n_layers:
            raise ValueError("null model layer count does not match tensor")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_layers(self) -> int:
        return self.values.shape[2]

    def layer(self, t: int) -> np.ndarray:
        return self.values[:, :, t]

    def reconstruct(self) -> NetworkTensor:
        """Undo the correction (off-diagonal entries; diagonal stays zero)."""
        out = np.empty_like(self.values)
        for t in range(self.n_layers):
            out[:, :, t] = self.values[:, :, t] + self.null_model.omega(t)
            np.fill_diagonal(out[:, :, t], 0.0)
        return NetworkTensor(out, node_labels=self.node_labels)


def load_tensor(
    edges: Iterable[tuple[int, int, int, float]],
    n_nodes: int,
    n_layers: int,
    one_based: bool = False,
    node_labels: list[str] | None = None,
) -> NetworkTensor:
    """Build a symmetric tensor from ``(i, j, t, value)`` records.

    Indices are 0-based unless ``one_based`` is set (then i, j and t all start
    at 1).  Both orientations of a dyad may appear; repeating a dyad-layer with
    a different value is an error, as are self-loops, out-of-range indices and
    non-finite values.  Unlisted dyads are zero.
    """
    if n_nodes < 1 or n_layers < 1:
        raise ValueError("n_nodes and n_layers must be positive")
    off = 1 if one_based else 0
    values = np.zeros((n_nodes, n_nodes, n_layers), dtype=np.float64)
    seen: dict[tuple[int, int, int], float] = {}
    for rec in edges:
        try:
            i, j, t, w = int(rec[0]) - off, int(rec[1]) - off, int(rec[2]) - off, float(rec[3])
        except (TypeError, ValueError, IndexError) as exc:
            raise ValueError(f"malformed edge record {rec!r}") from exc
        if not math.isfinite(w):
            raise ValueError(f"non-finite value for dyad ({i}, {j}) in layer {t}")
        if i == j:
            raise ValueError(f"self-loop ({i}, {i}) in layer {t} is not allowed")
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise ValueError(f"node index out of range in record {rec!r}")
        if not (0 <= t < n_layers):
            raise ValueError(f"layer index out of range in record {rec!r}")
        key = (min(i, j), max(i, j), t)
        if key in seen and seen[key] != w:
            raise ValueError(
                f"conflicting duplicate for dyad ({key[0]}, {key[1]}) in layer {t}: "
                f"{seen[key]} vs {w}"
            )
        seen[key] = w
        values[i, j, t] = w
        values[j, i, t] = w
    return NetworkTensor(values, node_labels=node_labels)


def principal_eigen(layer: np.ndarray) -> tuple[float, np.ndarray]:
    """Eigenpair of largest absolute eigenvalue of a symmetric matrix.

    Ties between the extreme positive and negative eigenvalues resolve toward
    the positive one, and the returned unit vector is sign-fixed so that its
    largest-magnitude component is positive.
    """
    a = np.asarray(layer, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=1e-12, atol=1e-12):
        raise ValueError("matrix is not symmetric")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    try:
        w, q = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("eigendecomposition did not converge") from exc
    # eigh sorts ascending; the extreme eigenvalue is at one of the ends
    lam = w[-1] if abs(w[-1]) >= abs(w[0]) else w[0]
    idx = -1 if abs(w[-1]) >= abs(w[0]) else 0
    vec = q[:, idx].copy()
    k = int(np.argmax(np.abs(vec)))
    if vec[k] < 0:
        vec = -vec
    return float(lam), vec


def degree_correct(tensor: NetworkTensor, kind: NullKind | str) -> CorrectedTensor:
    """Subtract a per-layer null model; the diagonal of the result is zeroed."""
    kind = NullKind(kind)
    n, t_total = tensor.n_nodes, tensor.n_layers
    values = np.empty_like(tensor.values)
    if kind is NullKind.PRINCIPAL_EIGEN:
        lambdas = np.empty(t_total)
        vectors = np.empty((t_total, n))
        for t in range(t_total):
            lam, vec = principal_eigen(tensor.values[:, :, t])
            lambdas[t] = lam
            vectors[t] = vec
            # outer(vec, vec) first keeps the layer bitwise symmetric
            values[:, :, t] = tensor.values[:, :, t] - lam * np.outer(vec, vec)
            np.fill_diagonal(values[:, :, t], 0.0)
        null = NullModel(kind, lambdas=lambdas, vectors=vectors)
    else:
        degrees = np.empty((t_total, n))
        total_m = np.empty(t_total)
        for t in range(t_total):
            k = tensor.values[:, :, t].sum(axis=0)
            two_m = k.sum()
            if two_m == 0.0:
                raise ValueError(f"degenerate layer {t}: all degrees are zero under modularity")
            degrees[t] = k
            total_m[t] = two_m / 2.0
            values[:, :, t] = tensor.values[:, :, t] - np.outer(k, k) / two_m
            np.fill_diagonal(values[:, :, t], 0.0)
        null = NullModel(kind, degrees=degrees, total_m=total_m)
    return CorrectedTensor(values, null, node_labels=tensor.node_labels)


# ---------------------------------------------------------------------------
# file formats


def read_edge_list(path: str | Path) -> list[tuple[int, int, int, float]]:
    """Parse an edge-list file with columns i, j, t, value (0-based indices).

    Accepts comma-separated (optionally with an ``i,j,t,value`` header) or
    whitespace-delimited rows; lines starting with ``#`` are skipped.
    """
    path = Path(path)
    rows: list[tuple[int, int, int, float]] = []
    with path.open(newline="") as fh:
        text_rows: list[list[str]] = []
        sample = fh.read()
        for line in sample.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "," in line:
                text_rows.append(next(csv.reader([line])))
            else:
                text_rows.append(line.split())
    for lineno, fields in enumerate(text_rows, start=1):
        fields = [f.strip() for f in fields if f.strip() != ""]
        if lineno == 1:
            try:
                float(fields[0])
            except ValueError:
                continue  # header row
        if len(fields) != 4:
            raise ValueError(f"{path}: expected 4 columns, got {len(fields)} on row {lineno}")
        try:
            rows.append((int(fields[0]), int(fields[1]), int(fields[2]), float(fields[3])))
        except ValueError as exc:
            raise ValueError(f"{path}: malformed row {lineno}: {fields!r}") from exc
    return rows


def _tensor_payload(tensor: NetworkTensor | CorrectedTensor) -> dict:
    n, t_total = tensor.n_nodes, tensor.n_layers
    payload: dict = {
        "n_nodes": n,
        "n_layers": t_total,
        "layers": [tensor.values[:, :, t].reshape(n * n).tolist() for t in range(t_total)],
    }
    if tensor.node_labels is not None:
        payload["node_labels"] = list(tensor.node_labels)
    if isinstance(tensor, CorrectedTensor):
        nm = tensor.null_model
        if nm.kind is NullKind.PRINCIPAL_EIGEN:
            payload["null_model"] = {
                "kind": nm.kind.value,
                "lambdas": nm.lambdas.tolist(),
                "vectors": nm.vectors.tolist(),
            }
        else:
            payload["null_model"] = {
                "kind": nm.kind.value,
                "degrees": nm.degrees.tolist(),
                "total_m": nm.total_m.tolist(),
            }
    return payload


def save_tensor_json(path: str | Path, tensor: NetworkTensor | CorrectedTensor) -> None:
    """Dump a tensor as JSON: ``{n_nodes, n_layers, layers: [row-major N*N, ...]}``."""
    path = Path(path)
    path.write_text(json.dumps(_tensor_payload(tensor), sort_keys=True) + "\n")


def load_tensor_json(path: str | Path) -> NetworkTensor | CorrectedTensor:
    """Load a tensor dumped by :func:`save_tensor_json`.

    Returns a :class:`CorrectedTensor` when the file carries a null model,
    otherwise a :class:`NetworkTensor`.
    """
    path = Path(path)
    payload = json.loads(path.read_text())
    n = int(payload["n_nodes"])
    t_total = int(payload["n_layers"])
    layers = payload["layers"]
    if len(layers) != t_total:
        raise ValueError(f"{path}: expected {t_total} layers, found {len(layers)}")
    values = np.empty((n, n, t_total), dtype=np.float64)
    for t, flat in enumerate(layers):
        values[:, :, t] = np.asarray(flat, dtype=np.float64).reshape(n, n)
    labels = payload.get("node_labels")
    nm = payload.get("null_model")
    if nm is None:
        return NetworkTensor(values, node_labels=labels)
    kind = NullKind(nm["kind"])
    if kind is NullKind.PRINCIPAL_EIGEN:
        null = NullModel(kind, lambdas=np.asarray(nm["lambdas"]), vectors=np.asarray(nm["vectors"]))
    else:
        null = NullModel(kind, degrees=np.asarray(nm["degrees"]), total_m=np.asarray(nm["total_m"]))
    return CorrectedTensor(values, null, node_labels=labels)
