import json

import numpy as np
import pytest

from netbreaks import (
    CorrectedTensor,
    NetworkTensor,
    NullKind,
    degree_correct,
    load_tensor,
    load_tensor_json,
    principal_eigen,
    read_edge_list,
    save_tensor_json,
)


def random_tensor(rng, n=6, t=4, density=0.4):
    vals = np.zeros((n, n, t))
    iu, ju = np.triu_indices(n, 1)
    for k in range(t):
        draws = (rng.random(iu.size) < density).astype(float)
        vals[iu, ju, k] = draws
        vals[ju, iu, k] = draws
    return NetworkTensor(vals)


class TestLoadTensor:
    def test_symmetry_closure(self):
        t = load_tensor([(0, 1, 0, 1.0)], n_nodes=3, n_layers=1)
        assert t.values[0, 1, 0] == 1.0
        assert t.values[1, 0, 0] == 1.0
        assert t.values.sum() == 2.0

    def test_empty_edge_list_gives_zero_tensor(self):
        t = load_tensor([], n_nodes=2, n_layers=2)
        assert t.values.shape == (2, 2, 2)
        assert np.all(t.values == 0.0)

    def test_conflicting_duplicate_raises(self):
        with pytest.raises(ValueError, match="conflicting duplicate"):
            load_tensor([(0, 1, 0, 1.0), (1, 0, 0, 2.0)], n_nodes=2, n_layers=1)

    def test_consistent_duplicate_allowed(self):
        t = load_tensor([(0, 1, 0, 1.0), (1, 0, 0, 1.0)], n_nodes=2, n_layers=1)
        assert t.values[0, 1, 0] == 1.0

    def test_self_loop_rejected(self):
        with pytest.raises(ValueError, match="self-loop"):
            load_tensor([(1, 1, 0, 1.0)], n_nodes=2, n_layers=1)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            load_tensor([(0, 5, 0, 1.0)], n_nodes=2, n_layers=1)
        with pytest.raises(ValueError, match="out of range"):
            load_tensor([(0, 1, 3, 1.0)], n_nodes=2, n_layers=1)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            load_tensor([(0, 1, 0, float("nan"))], n_nodes=2, n_layers=1)

    def test_one_based_indices(self):
        t = load_tensor([(1, 2, 1, 3.5)], n_nodes=2, n_layers=1, one_based=True)
        assert t.values[0, 1, 0] == 3.5


class TestNetworkTensorInvariants:
    def test_asymmetric_rejected(self):
        vals = np.zeros((2, 2, 1))
        vals[0, 1, 0] = 1.0
        with pytest.raises(ValueError, match="symmetric"):
            NetworkTensor(vals)

    def test_nonzero_diagonal_rejected(self):
        vals = np.zeros((2, 2, 1))
        vals[0, 0, 0] = 1.0
        with pytest.raises(ValueError, match="diagonal"):
            NetworkTensor(vals)

    def test_label_length_checked(self):
        with pytest.raises(ValueError, match="labels"):
            NetworkTensor(np.zeros((2, 2, 1)), node_labels=["a"])


class TestPrincipalEigen:
    def test_zero_matrix(self):
        lam, vec = principal_eigen(np.zeros((3, 3)))
        assert lam == 0.0
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-12
        # deterministic output
        lam2, vec2 = principal_eigen(np.zeros((3, 3)))
        assert np.array_equal(vec, vec2)

    def test_tie_prefers_positive_eigenvalue(self):
        # eigenvalues of [[0,1],[1,0]] are -1 and +1
        lam, vec = principal_eigen(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert lam == pytest.approx(1.0)
        assert vec == pytest.approx(np.array([1.0, 1.0]) / np.sqrt(2.0))

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a = rng.normal(size=(5, 5))
            a = (a + a.T) / 2.0
            lam, vec = principal_eigen(a)
            w, q = np.linalg.eigh(a)
            k = np.argmax(np.abs(w))
            assert abs(abs(lam) - abs(w[k])) < 1e-8
            resid = np.max(np.abs(a @ vec - lam * vec))
            assert resid <= 1e-8 * max(1.0, abs(lam))

    def test_sign_convention(self):
        a = np.diag([0.0, -3.0])
        a = np.array([[2.0, 0.5], [0.5, 1.0]])
        _, vec = principal_eigen(a)
        assert vec[np.argmax(np.abs(vec))] > 0

    def test_non_symmetric_rejected(self):
        with pytest.raises(ValueError, match="not symmetric"):
            principal_eigen(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestDegreeCorrect:
    def test_zero_layer_eigen_stays_zero(self):
        t = NetworkTensor(np.zeros((3, 3, 1)))
        b = degree_correct(t, NullKind.PRINCIPAL_EIGEN)
        assert np.all(b.values == 0.0)

    def test_triangle_modularity_value(self):
        # 3-node triangle: every off-diagonal entry becomes 1 - (2*2)/(2*3) = 1/3
        vals = np.ones((3, 3, 1)) - np.eye(3)[:, :, None]
        b = degree_correct(NetworkTensor(vals), NullKind.MODULARITY)
        off = b.values[0, 1, 0]
        assert off == pytest.approx(1.0 / 3.0, abs=1e-12)
        iu, ju = np.triu_indices(3, 1)
        assert np.allclose(b.values[iu, ju, 0], 1.0 / 3.0)

    def test_modularity_degenerate_layer(self):
        with pytest.raises(ValueError, match="degenerate layer"):
            degree_correct(NetworkTensor(np.zeros((3, 3, 1))), NullKind.MODULARITY)

    @pytest.mark.parametrize("kind", [NullKind.PRINCIPAL_EIGEN, NullKind.MODULARITY])
    def test_symmetry_and_roundtrip(self, kind):
        rng = np.random.default_rng(11)
        y = random_tensor(rng, n=7, t=3)
        b = degree_correct(y, kind)
        assert np.array_equal(b.values, b.values.transpose(1, 0, 2))
        iu, ju = np.triu_indices(7, 1)
        for t in range(3):
            recon = b.values[:, :, t] + b.null_model.omega(t)
            assert np.max(np.abs(recon[iu, ju] - y.values[iu, ju, t])) < 1e-10

    def test_rank1_null_property(self):
        rng = np.random.default_rng(13)
        y = random_tensor(rng, n=6, t=2)
        b = degree_correct(y, NullKind.PRINCIPAL_EIGEN)
        for t in range(2):
            omega = b.null_model.omega(t)
            assert np.linalg.matrix_rank(omega, tol=1e-10) <= 1
            u = b.null_model.vectors[t]
            lam = b.null_model.lambdas[t]
            assert np.max(np.abs(omega @ u - lam * u)) < 1e-10


class TestFileFormats:
    def test_json_roundtrip_raw(self, tmp_path):
        rng = np.random.default_rng(3)
        y = random_tensor(rng, n=5, t=3)
        y.node_labels = [f"v{i}" for i in range(5)]
        p = tmp_path / "t.json"
        save_tensor_json(p, y)
        loaded = load_tensor_json(p)
        assert isinstance(loaded, NetworkTensor)
        assert np.array_equal(loaded.values, y.values)
        assert loaded.node_labels == y.node_labels

    @pytest.mark.parametrize("kind", [NullKind.PRINCIPAL_EIGEN, NullKind.MODULARITY])
    def test_json_roundtrip_corrected(self, tmp_path, kind):
        rng = np.random.default_rng(4)
        b = degree_correct(random_tensor(rng, n=5, t=2), kind)
        p = tmp_path / "b.json"
        save_tensor_json(p, b)
        loaded = load_tensor_json(p)
        assert isinstance(loaded, CorrectedTensor)
        assert np.array_equal(loaded.values, b.values)
        assert loaded.null_model.kind == kind

    def test_json_schema_is_row_major(self, tmp_path):
        vals = np.zeros((2, 2, 1))
        vals[0, 1, 0] = vals[1, 0, 0] = 7.0
        p = tmp_path / "t.json"
        save_tensor_json(p, NetworkTensor(vals))
        payload = json.loads(p.read_text())
        assert payload["n_nodes"] == 2 and payload["n_layers"] == 1
        assert payload["layers"][0] == [0.0, 7.0, 7.0, 0.0]

    def test_edge_list_csv_with_header(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("i,j,t,value\n0,1,0,1.0\n1,2,0,2.5\n")
        rows = read_edge_list(p)
        assert rows == [(0, 1, 0, 1.0), (1, 2, 0, 2.5)]

    def test_edge_list_whitespace(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("# comment\n0 1 0 1.0\n2 1 1 0.5\n")
        rows = read_edge_list(p)
        assert rows == [(0, 1, 0, 1.0), (2, 1, 1, 0.5)]
