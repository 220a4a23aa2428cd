import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collabrep.crc import batch_classify, fit_crc_l2
from collabrep.dataset import LabeledDataset
from collabrep.dictlearn import (BlockDictionary, CoeffMatrix, DlConfig, DlnscrModel,
                                 classify_sample, classify_set, fit_dlnscr,
                                 init_dictionary_pca, load_dictionary, objective,
                                 save_dictionary, update_coefficients, update_subdictionary)
from collabrep.exceptions import NumericalError

from conftest import random_dataset


def selector(sizes, i):
    """K x K_i matrix picking the rows of block ``i`` (0-based)."""
    K = sum(sizes)
    off = np.concatenate([[0], np.cumsum(sizes)])
    S = np.zeros((K, sizes[i]))
    S[off[i]:off[i + 1], :] = np.eye(sizes[i])
    return S


def objective_oracle(X, labels, D, A, lam, sizes):
    total = np.linalg.norm(X - D @ A) ** 2
    for i in range(len(sizes)):
        S = selector(sizes, i)
        Ai = A[:, labels == i + 1]
        total += np.linalg.norm(X[:, labels == i + 1] - D @ S @ S.T @ Ai) ** 2
        for j in range(len(sizes)):
            if j != i:
                total += np.linalg.norm(D @ S @ S.T @ A[:, labels == j + 1]) ** 2
    return total + lam * np.linalg.norm(A) ** 2


def stacked_oracle(X, labels, D, lam, sizes):
    """Per class: Z_i = [D; D S_i S_i^T; D S_\\i S_\\i^T], R_i = [X_i; X_i; 0]."""
    K = sum(sizes)
    A = np.zeros((K, X.shape[1]))
    for i in range(len(sizes)):
        S = selector(sizes, i)
        rest = [selector(sizes, j) for j in range(len(sizes)) if j != i]
        Sr = np.hstack(rest)
        Xi = X[:, labels == i + 1]
        Z = np.vstack([D, D @ S @ S.T, D @ Sr @ Sr.T])
        R = np.vstack([Xi, Xi, np.zeros_like(Xi)])
        A[:, labels == i + 1] = np.linalg.solve(Z.T @ Z + lam * np.eye(K), Z.T @ R)
    return A


def exact_oracle(X, labels, D, lam, sizes):
    """Same stacking but every other block gets its own zero target rows."""
    K = sum(sizes)
    A = np.zeros((K, X.shape[1]))
    for i in range(len(sizes)):
        S = selector(sizes, i)
        Xi = X[:, labels == i + 1]
        rows = [D, D @ S @ S.T]
        targets = [Xi, Xi]
        for j in range(len(sizes)):
            if j != i:
                Sj = selector(sizes, j)
                rows.append(D @ Sj @ Sj.T)
                targets.append(np.zeros_like(Xi))
        Z, R = np.vstack(rows), np.vstack(targets)
        A[:, labels == i + 1] = np.linalg.solve(Z.T @ Z + lam * np.eye(K), Z.T @ R)
    return A


def d_step_oracle(X, labels, D, A, i, sizes):
    """Normal equations of the objective in D_i, derived term by term."""
    off = np.concatenate([[0], np.cumsum(sizes)])
    sl = slice(off[i], off[i + 1])
    rest = np.ones(D.shape[1], dtype=bool)
    rest[sl] = False
    Ai = A[sl]
    own = labels == i + 1
    E = X - D[:, rest] @ A[rest]
    lhs = Ai @ Ai.T + Ai[:, own] @ Ai[:, own].T + Ai[:, ~own] @ Ai[:, ~own].T
    rhs = E @ Ai.T + X[:, own] @ Ai[:, own].T
    return np.linalg.solve(lhs, rhs.T).T


def problem(rng, d=7, sizes=(4, 3, 5), K=(2, 3, 2)):
    ds = random_dataset(rng, d=d, sizes=sizes)
    D = BlockDictionary(rng.standard_normal((d, sum(K))), K)
    return ds, D


class TestTypes:
    def test_block_accessors(self, rng):
        D = BlockDictionary(rng.standard_normal((3, 6)), (1, 2, 3))
        assert D.cols(2) == slice(1, 3)
        np.testing.assert_array_equal(D.block(3), D.matrix[:, 3:])
        assert D.n_classes == 3

    @pytest.mark.parametrize("shape, sizes", [((3, 5), (2, 2)), ((3, 2), (0, 2)),
                                              ((3,), (3,))])
    def test_invalid(self, shape, sizes):
        with pytest.raises(ValueError):
            BlockDictionary(np.ones(shape), sizes)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DlConfig(0.0, (1,))
        with pytest.raises(ValueError):
            DlConfig(1.0, (0,))
        with pytest.raises(ValueError):
            DlConfig(1.0, (1,), a_step="other")


class TestObjective:
    def test_matches_selector_form(self, rng):
        ds, D = problem(rng)
        A = rng.standard_normal((7, ds.n_samples))
        got = objective(ds, D, A, 0.3)
        ref = objective_oracle(ds.features, ds.labels, D.matrix, A, 0.3, D.block_sizes)
        assert got == pytest.approx(ref, rel=1e-12)

    def test_zero_coefficients(self, rng):
        ds, D = problem(rng)
        A = np.zeros((7, ds.n_samples))
        X = ds.features
        own = sum(np.linalg.norm(ds.class_block(i)) ** 2 for i in (1, 2, 3))
        assert objective(ds, D, A, 1.0) == pytest.approx(np.linalg.norm(X) ** 2 + own)

    def test_shape_errors(self, rng):
        ds, D = problem(rng)
        with pytest.raises(ValueError):
            objective(ds, D, np.zeros((7, 3)), 1.0)


class TestCoefficientStep:
    @pytest.mark.parametrize("mode, oracle", [("stacked", stacked_oracle),
                                              ("exact", exact_oracle)])
    def test_matches_explicit_stacking(self, rng, mode, oracle):
        for _ in range(5):
            ds, D = problem(rng)
            A = update_coefficients(ds, D, 0.2, a_step=mode)
            ref = oracle(ds.features, ds.labels, D.matrix, 0.2, D.block_sizes)
            np.testing.assert_allclose(A.matrix, ref, rtol=1e-10, atol=1e-10)

    def test_two_classes_modes_coincide(self, rng):
        ds, D = problem(rng, sizes=(5, 4), K=(3, 2))
        a = update_coefficients(ds, D, 0.1, "exact").matrix
        b = update_coefficients(ds, D, 0.1, "stacked").matrix
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)

    def test_exact_step_is_the_minimizer(self, rng):
        ds, D = problem(rng)
        A = update_coefficients(ds, D, 0.2, "exact").matrix
        f0 = objective(ds, D, A, 0.2)
        for _ in range(50):
            dA = 1e-3 * rng.standard_normal(A.shape)
            assert objective(ds, D, A + dA, 0.2) >= f0 - 1e-12 * f0

    def test_stacked_step_is_not_for_three_classes(self, rng):
        # the stacked cross-class row block penalizes a sum of block
        # reconstructions, not the sum of their energies
        ds, D = problem(rng)
        fe = objective(ds, D, update_coefficients(ds, D, 0.2, "exact"), 0.2)
        fs = objective(ds, D, update_coefficients(ds, D, 0.2, "stacked"), 0.2)
        assert fe < fs

    def test_row_blocks_follow_dictionary(self, rng):
        ds, D = problem(rng)
        A = update_coefficients(ds, D, 0.2)
        assert isinstance(A, CoeffMatrix)
        assert A.row_block(2).shape == (3, ds.n_samples)


class TestDictionaryStep:
    def test_matches_normal_equations(self, rng):
        ds, D = problem(rng)
        A = rng.standard_normal((7, ds.n_samples))
        for i in (1, 2, 3):
            Di, fb = update_subdictionary(ds, D, A, i, block_sizes=D.block_sizes)
            assert not fb
            ref = d_step_oracle(ds.features, ds.labels, D.matrix, A, i - 1, D.block_sizes)
            np.testing.assert_allclose(Di, ref, rtol=1e-9, atol=1e-10)

    def test_survives_perturbations(self, rng):
        ds, D = problem(rng)
        A = update_coefficients(ds, D, 0.1).matrix
        Dm = D.matrix.copy()
        Di, _ = update_subdictionary(ds, D, A, 2, block_sizes=D.block_sizes)
        Dm[:, D.cols(2)] = Di
        f0 = objective(ds, Dm, A, 0.1, D.block_sizes)
        for _ in range(100):
            P = Dm.copy()
            P[:, D.cols(2)] += 1e-3 * rng.standard_normal(Di.shape)
            assert objective(ds, P, A, 0.1, D.block_sizes) >= f0 - 1e-12 * f0

    def test_zero_coefficients_fall_back(self, rng):
        ds, D = problem(rng)
        Di, fb = update_subdictionary(ds, D, np.zeros((7, ds.n_samples)), 1,
                                      block_sizes=D.block_sizes)
        assert fb and not np.any(Di)


class TestInit:
    def test_pca_blocks_span_class_data(self, rng):
        ds = random_dataset(rng, d=6, sizes=(4, 4))
        D = init_dictionary_pca(ds, (2, 3))
        U, _, _ = np.linalg.svd(ds.class_block(1), full_matrices=False)
        np.testing.assert_allclose(np.abs(D.block(1).T @ U[:, :2]), np.eye(2), atol=1e-10)

    def test_padding_beyond_rank(self):
        X = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
        D = init_dictionary_pca(LabeledDataset(X, [1, 1, 2]), (2, 1), seed=3)
        np.testing.assert_allclose(np.linalg.norm(D.matrix, axis=0), 1.0)
        assert D.matrix.shape == (2, 3)

    def test_block_count_checked(self, rng):
        with pytest.raises(ValueError):
            init_dictionary_pca(random_dataset(rng), (2, 2))


class TestFit:
    def test_trace_structure_and_monotone(self, benchmark_split):
        train, _ = benchmark_split
        D, A, trace = fit_dlnscr(train, DlConfig(1e-4, (5,) * 5))
        assert trace.steps[0] == "init"
        assert trace.steps[1:] == ["A", "D"] * trace.n_iter
        assert trace.is_monotone()
        assert trace.converged and trace.n_iter <= 50
        assert objective(train, D, A, 1e-4) == pytest.approx(trace.objective[-1], rel=1e-12)

    @pytest.mark.parametrize("mode, extrapolate", [("exact", False), ("stacked", True)])
    def test_other_variants_monotone(self, rng, mode, extrapolate):
        ds = random_dataset(rng, d=8, sizes=(6, 5, 7))
        _, _, trace = fit_dlnscr(ds, DlConfig(1e-3, (2, 2, 2), max_iters=30, a_step=mode,
                                              extrapolate=extrapolate))
        if mode == "exact":
            assert trace.is_monotone()
        assert np.all(np.isfinite(trace.objective))

    def test_deterministic(self, rng):
        ds = random_dataset(rng, d=8, sizes=(6, 5))
        a = fit_dlnscr(ds, DlConfig(1e-3, (2, 2), seed=4))[0].matrix
        b = fit_dlnscr(ds, DlConfig(1e-3, (2, 2), seed=4))[0].matrix
        np.testing.assert_array_equal(a, b)

    def test_zero_iterations(self, rng):
        ds = random_dataset(rng, d=8, sizes=(6, 5))
        D, A, trace = fit_dlnscr(ds, DlConfig(1e-3, (2, 2), max_iters=0))
        np.testing.assert_array_equal(D.matrix, init_dictionary_pca(ds, (2, 2)).matrix)
        assert not np.any(A.matrix) and not trace.converged and trace.steps == ["init"]

    def test_custom_init(self, rng):
        ds, D = problem(rng)
        _, _, trace = fit_dlnscr(ds, DlConfig(0.1, D.block_sizes, max_iters=3), init=D)
        assert trace.objective[0] == pytest.approx(objective(ds, D, np.zeros((7, 12)), 0.1))

    def test_overflow_raises(self):
        X = np.array([[1e200, 2e200, -1e200, 3e200]])
        with pytest.raises(NumericalError):
            fit_dlnscr(LabeledDataset(X, [1, 1, 2, 2]), DlConfig(1.0, (1, 1)))

    def test_block_count_checked(self, rng):
        with pytest.raises(ValueError):
            fit_dlnscr(random_dataset(rng), DlConfig(0.1, (1, 1)))

    def test_accuracy_close_to_crc(self, benchmark_split):
        train, test = benchmark_split
        D, _, _ = fit_dlnscr(train, DlConfig(1e-4, (5,) * 5))
        acc_dl = batch_classify(DlnscrModel(D, 1e-4), test).accuracy
        acc_l2 = batch_classify(fit_crc_l2(train, 1e-4), test).accuracy
        assert acc_dl >= acc_l2 - 0.02


def sample_oracle(D, lam, y):
    Dm = D.matrix
    a = np.linalg.solve(Dm.T @ Dm + lam * np.eye(Dm.shape[1]), Dm.T @ y)
    out = []
    for i in range(1, D.n_classes + 1):
        ai = a[D.cols(i)]
        e = y - D.block(i) @ ai
        out.append(e @ e / max(np.linalg.norm(ai), 1e-12))
    return np.array(out)


class TestClassify:
    def test_sample_matches_oracle(self, rng):
        D = BlockDictionary(rng.standard_normal((6, 5)), (2, 3))
        for _ in range(10):
            y = rng.standard_normal(6)
            p = classify_sample(D, 0.05, y)
            np.testing.assert_allclose(p.residuals, sample_oracle(D, 0.05, y), rtol=1e-10)

    def test_identical_blocks_tie(self, rng):
        B = rng.standard_normal((4, 2))
        D = BlockDictionary(np.hstack([B, B]), (2, 2))
        p = classify_sample(D, 0.1, rng.standard_normal(4))
        assert p.label == 1
        assert p.residuals[0] == pytest.approx(p.residuals[1], rel=1e-10)

    def test_set_energy_rule(self, rng):
        D = BlockDictionary(rng.standard_normal((6, 6)), (2, 2, 2))
        Y = rng.standard_normal((6, 4))
        A = np.linalg.solve(D.matrix.T @ D.matrix + 0.1 * np.eye(6), D.matrix.T @ Y)
        parts = [D.block(i) @ A[D.cols(i)] for i in (1, 2, 3)]
        expected = [np.linalg.norm(Y - parts[i]) ** 2
                    + sum(np.linalg.norm(parts[j]) ** 2 for j in range(3) if j != i)
                    for i in range(3)]
        p = classify_set(D, 0.1, Y)
        np.testing.assert_allclose(p.residuals, expected, rtol=1e-10)
        assert p.label == int(np.argmin(expected)) + 1

    def test_set_normalized_rule_single_column(self, rng):
        D = BlockDictionary(rng.standard_normal((5, 4)), (2, 2))
        y = rng.standard_normal(5)
        a = classify_set(D, 0.1, y[:, None], rule="normalized").residuals
        np.testing.assert_allclose(a, classify_sample(D, 0.1, y).residuals, rtol=1e-12)

    def test_set_of_training_class(self, benchmark_split):
        train, test = benchmark_split
        model = DlnscrModel(fit_dlnscr(train, DlConfig(1e-4, (5,) * 5))[0], 1e-4)
        for i in range(1, 6):
            assert model.classify_set(test.class_block(i)).label == i

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-2, 1e2))
    def test_sample_scale_invariant(self, seed, a):
        g = np.random.default_rng(seed)
        D = BlockDictionary(g.standard_normal((5, 4)), (2, 2))
        y = g.standard_normal(5)
        assert classify_sample(D, 0.1, y).label == classify_sample(D, 0.1, a * y).label

    def test_errors(self, rng):
        D = BlockDictionary(rng.standard_normal((4, 2)), (1, 1))
        with pytest.raises(ValueError):
            classify_sample(D, 0.1, np.ones(3))
        with pytest.raises(ValueError):
            classify_set(D, 0.1, np.ones((4, 0)))
        with pytest.raises(ValueError):
            classify_set(D, 0.1, np.ones((4, 2)), rule="max")


class TestPersistence:
    def test_bit_exact_round_trip(self, tmp_path, rng):
        M = rng.standard_normal((5, 4)) * 10.0 ** rng.integers(-300, 300, size=(5, 4))
        D = BlockDictionary(M, (1, 3))
        save_dictionary(tmp_path / "d.json", D, 1e-4, {"note": "x"})
        back, lam, meta = load_dictionary(tmp_path / "d.json")
        assert back.matrix.tobytes() == D.matrix.tobytes()
        assert back.block_sizes == (1, 3) and lam == 1e-4 and meta == {"note": "x"}
        save_dictionary(tmp_path / "e.json", back, lam, meta)
        assert (tmp_path / "d.json").read_bytes() == (tmp_path / "e.json").read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x.json").write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            load_dictionary(tmp_path / "x.json")
