import numpy as np
import pytest
from hypothesis import given, strategies as st

from linident.analysis import (
    InconsistentNormalizerError,
    InsufficientDiversityError,
    InsufficientTargetsError,
    RankDeficiencyError,
    ReprDump,
    augmented_f,
    cca,
    context_recover,
    diversity_check_f,
    fit_linear_map,
    mean_pairwise_svcca,
    pca_project,
    svcca,
    theorem1_recover,
)
from linident.linalg import SingularMatrixError, random_invertible
from linident.model import (
    CandidateBatch,
    EmbeddingTable,
    MlpArch,
    apply_linear_transform,
    encode_f,
    init_model,
)
from linident.train import build_candidates


def _pair(seed=0, M=3, n_labels=8, n=200):
    rng = np.random.default_rng(seed)
    star = init_model(MlpArch((5, 16, M), "tanh"), EmbeddingTable(n_labels, M), seed + 1)
    A0 = random_invertible(rng, M)
    prime = apply_linear_transform(star, A0, np.linalg.inv(A0).T)
    X = rng.standard_normal((n, 5))
    batch = build_candidates("supervised", (X, rng.integers(0, n_labels, n)), n_labels)
    return star, prime, A0, batch


def _cca_oracle(X, Y):
    """Canonical correlations as square roots of eigenvalues of Sxx^-1 Sxy Syy^-1 Syx."""
    c = np.cov(np.hstack([X, Y]).T)
    p = X.shape[1]
    sxx, syy, sxy = c[:p, :p], c[p:, p:], c[:p, p:]
    ev = np.linalg.eigvals(np.linalg.solve(sxx, sxy) @ np.linalg.solve(syy, sxy.T))
    return np.sqrt(np.clip(np.sort(ev.real)[::-1], 0, None))[: min(p, Y.shape[1])]


class TestPca:
    def test_full_rank_preserves_distances(self, rng):
        X = rng.standard_normal((50, 4))
        P, explained = pca_project(X, 4)
        Xc = X - X.mean(axis=0)
        d = lambda Z: np.linalg.norm(Z[:, None] - Z[None], axis=-1)
        np.testing.assert_allclose(d(P), d(Xc), atol=1e-10)
        assert explained.sum() == pytest.approx(1.0)

    def test_planar_data(self, rng):
        X = np.zeros((40, 3))
        X[:, :2] = rng.standard_normal((40, 2))
        P, explained = pca_project(X, 2)
        assert explained.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(np.linalg.norm(P, axis=1), np.linalg.norm(X[:, :2] - X[:, :2].mean(0), axis=1))

    def test_tail_energy(self, rng):
        X = rng.standard_normal((100, 5)) * [5, 3, 2, 1, 0.5]
        P, explained = pca_project(X, 2)
        ev = np.sort(np.linalg.eigvalsh(np.cov(X.T)))[::-1]
        np.testing.assert_allclose(explained, ev[:2] / ev.sum(), rtol=1e-10)
        np.testing.assert_allclose(P.var(axis=0, ddof=1), ev[:2], rtol=1e-10)

    @pytest.mark.parametrize("k", [0, 4])
    def test_bad_k(self, rng, k):
        with pytest.raises(ValueError):
            pca_project(rng.standard_normal((10, 3)), k)


class TestCca:
    def test_identical(self, rng):
        X = rng.standard_normal((100, 3))
        np.testing.assert_allclose(cca(X, X).correlations, 1.0, atol=1e-10)

    def test_invertible_transform(self, rng):
        X = rng.standard_normal((100, 3))
        Y = X @ random_invertible(rng, 3).T + 2.0
        assert cca(X, Y).mean_rho == pytest.approx(1.0, abs=1e-10)

    def test_independent(self):
        rng = np.random.default_rng(0)
        X, Y = rng.standard_normal((20000, 3)), rng.standard_normal((20000, 3))
        assert cca(X, Y).mean_rho < 0.05

    def test_against_eigen_oracle(self, rng):
        Z = rng.standard_normal((300, 3))
        X = Z + 0.5 * rng.standard_normal((300, 3))
        Y = Z[:, :2] @ rng.standard_normal((2, 2)) + rng.standard_normal((300, 2))
        np.testing.assert_allclose(cca(X, Y).correlations, _cca_oracle(X, Y), rtol=1e-8)

    def test_directions_give_correlations(self, rng):
        X = rng.standard_normal((200, 3))
        Y = X[:, ::-1] + 0.3 * rng.standard_normal((200, 3))
        rep = cca(X, Y)
        u, v = (X - X.mean(0)) @ rep.C, (Y - Y.mean(0)) @ rep.D
        for i, r in enumerate(rep.correlations):
            assert np.corrcoef(u[:, i], v[:, i])[0, 1] == pytest.approx(r, rel=1e-8)

    def test_zero_variance(self, rng):
        with pytest.raises(RankDeficiencyError):
            cca(np.ones((10, 2)), rng.standard_normal((10, 2)))

    def test_duplicate_column_uses_ridge(self, rng):
        x = rng.standard_normal((50, 1))
        rep = cca(np.hstack([x, x]), rng.standard_normal((50, 2)))
        assert rep.ridge[0] > 0 and rep.ridge[1] == 0

    def test_row_mismatch(self, rng):
        with pytest.raises(ValueError):
            cca(rng.standard_normal((5, 2)), rng.standard_normal((6, 2)))


class TestSvcca:
    def test_full_k_equals_cca(self, rng):
        X, Y = rng.standard_normal((80, 3)), rng.standard_normal((80, 3))
        np.testing.assert_allclose(svcca(X, Y, 3).correlations, cca(X, Y).correlations, atol=1e-10)

    def test_noise_dimension_fixture(self):
        rng = np.random.default_rng(5)
        z = rng.standard_normal(500)
        X = np.column_stack([3 * z, 0.1 * rng.standard_normal(500)])
        Y = np.column_stack([0.1 * rng.standard_normal(500), -2 * z + 0.2 * rng.standard_normal(500)])
        top = lambda A: (A - A.mean(0)) @ np.linalg.eigh(np.cov(A.T))[1][:, -1]
        expected = abs(np.corrcoef(top(X), top(Y))[0, 1])
        assert svcca(X, Y, 1).mean_rho == pytest.approx(expected, rel=1e-10)
        assert svcca(X, Y, 1).mean_rho > svcca(X, Y, 2).mean_rho

    @given(st.integers(0, 10_000))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        X, Y = rng.standard_normal((30, 4)), rng.standard_normal((30, 3))
        np.testing.assert_allclose(svcca(X, Y, 2).correlations, svcca(Y, X, 2).correlations, atol=1e-9)

    @given(st.integers(0, 10_000))
    def test_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        rho = svcca(rng.standard_normal((20, 3)), rng.standard_normal((20, 3)), 2).correlations
        assert np.all((rho >= 0) & (rho <= 1))

    def test_mean_pairwise(self, rng):
        reprs = [rng.standard_normal((40, 3)) for _ in range(3)]
        mean, vals = mean_pairwise_svcca(reprs, 2)
        assert len(vals) == 3
        assert vals[1] == pytest.approx(svcca(reprs[0], reprs[2], 2).mean_rho)
        assert mean == pytest.approx(np.mean(vals))


class TestFitLinearMap:
    def test_exact(self, rng):
        X = rng.standard_normal((30, 3))
        A0 = rng.standard_normal((3, 3))
        rep = fit_linear_map(X, X @ A0.T)
        np.testing.assert_allclose(rep.map, A0, atol=1e-10)
        assert rep.residual < 1e-12

    def test_noisy_matches_lstsq(self, rng):
        X = rng.standard_normal((100, 3))
        Y = X @ rng.standard_normal((2, 3)).T + 0.1 * rng.standard_normal((100, 2))
        rep = fit_linear_map(X, Y)
        np.testing.assert_allclose(rep.map.T, np.linalg.pinv(X) @ Y, atol=1e-10)
        assert 0 < rep.residual < 0.2

    def test_rank_deficient(self, rng):
        x = rng.standard_normal((10, 1))
        with pytest.raises(RankDeficiencyError):
            fit_linear_map(np.hstack([x, 2 * x]), rng.standard_normal((10, 2)))


class TestDiversity:
    def _batch(self, n_labels, n=60, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, 5))
        return build_candidates("supervised", (X, rng.integers(0, n_labels, n)), n_labels)

    def test_constant_g(self):
        m = init_model(MlpArch((5, 3)), EmbeddingTable(6, 3), 0)
        m.params["g.W"][:] = 1.0
        rep = diversity_check_f(m, self._batch(6), attempts=5)
        assert rep.rank == 0 and not rep.satisfied

    def test_basis_embedding(self):
        m = init_model(MlpArch((5, 3)), EmbeddingTable(4, 3), 0)
        m.params["g.W"][:] = np.vstack([np.zeros(3), np.eye(3)])
        rep = diversity_check_f(m, self._batch(4))
        assert rep.satisfied and rep.rank == 3

    def test_random_mlp_context(self, rng):
        m = init_model(MlpArch((5, 4)), MlpArch((6, 8, 4), "tanh"), 1)
        X = rng.standard_normal((30, 5))
        batch = build_candidates("contrastive", (X, rng.standard_normal((30, 6))))
        assert diversity_check_f(m, batch).satisfied

    def test_insufficient_targets(self):
        m = init_model(MlpArch((5, 3)), EmbeddingTable(3, 3), 0)
        with pytest.raises(InsufficientTargetsError):
            diversity_check_f(m, self._batch(3))

    def test_reorder_keeps_verdict(self):
        m = init_model(MlpArch((5, 3)), EmbeddingTable(8, 3), 0)
        batch = self._batch(8)
        perm = np.random.default_rng(1).permutation(len(batch))
        shuffled = CandidateBatch(batch.inputs[perm], batch.pool, batch.candidates[perm], batch.positives[perm])
        assert diversity_check_f(m, batch).satisfied == diversity_check_f(m, shuffled).satisfied is True


class TestTheorem1Recover:
    def test_exact_transform(self):
        star, prime, A0, batch = _pair()
        rep = theorem1_recover(prime, star, batch)
        np.testing.assert_allclose(rep.map, A0, rtol=1e-8, atol=1e-10)
        assert rep.residual < 1e-10

    def test_identity(self):
        star, _, _, batch = _pair()
        np.testing.assert_allclose(theorem1_recover(star, star, batch).map, np.eye(3), atol=1e-10)

    def test_transitive(self):
        star, p1, A1, batch = _pair(seed=2)
        A2 = random_invertible(np.random.default_rng(9), 3)
        p2 = apply_linear_transform(p1, A2, np.linalg.inv(A2).T)
        a21 = theorem1_recover(p2, p1, batch).map
        a1s = theorem1_recover(p1, star, batch).map
        np.testing.assert_allclose(theorem1_recover(p2, star, batch).map, a21 @ a1s, atol=1e-8)

    def test_agrees_with_fit(self):
        star, prime, _, batch = _pair(seed=4)
        fit = fit_linear_map(encode_f(star, batch.inputs), encode_f(prime, batch.inputs))
        np.testing.assert_allclose(theorem1_recover(prime, star, batch).map, fit.map, atol=1e-8)

    def test_degenerate_context_raises(self):
        star, prime, _, batch = _pair()
        star.params["g.W"][:] = 0.5
        with pytest.raises(SingularMatrixError):
            theorem1_recover(prime, star, batch, attempts=3)

    @given(st.integers(0, 500))
    def test_random_transforms(self, seed):
        star, prime, A0, batch = _pair(seed=seed, n=60)
        np.testing.assert_allclose(theorem1_recover(prime, star, batch).map, A0, rtol=1e-6, atol=1e-8)


class TestContextRecover:
    def test_exact_transform(self):
        star, prime, A0, batch = _pair()
        rep = context_recover(prime, star, batch)
        np.testing.assert_allclose(rep.map, np.linalg.inv(A0).T, atol=1e-8)
        assert rep.details["first_row_deviation"] < 1e-8

    def test_identity(self):
        star, _, _, batch = _pair(seed=3)
        rep = context_recover(star, star, batch)
        np.testing.assert_allclose(rep.map, np.eye(3), atol=1e-10)
        np.testing.assert_allclose(rep.details["affine_offset"], 0, atol=1e-8)

    def test_augmented_shape(self):
        star, _, _, batch = _pair()
        assert augmented_f(star, batch).shape == (4, len(batch))

    def test_constant_context(self):
        star, prime, _, batch = _pair()
        star.params["g.W"][:] = 1.0
        with pytest.raises(InsufficientDiversityError):
            context_recover(prime, star, batch)

    def test_inconsistent_models(self):
        star, _, _, batch = _pair(seed=0)
        other = init_model(MlpArch((5, 16, 3), "tanh"), EmbeddingTable(8, 3), 77)
        with pytest.raises(InconsistentNormalizerError):
            context_recover(other, star, batch)
        assert context_recover(other, star, batch, tol=None).details["first_row_deviation"] > 1e-6


class TestReprDump:
    def test_round_trip(self, tmp_path, rng):
        d = ReprDump(rng.standard_normal((7, 3)), {"side": "f", "layer": "output"})
        d.save(tmp_path / "r.csv")
        back = ReprDump.load(tmp_path / "r.csv")
        np.testing.assert_array_equal(back.data, d.data)
        assert back.meta == d.meta

    def test_first_line_is_json(self, tmp_path):
        ReprDump(np.ones((2, 2)), {"a": 1}).save(tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == '{"a": 1}'

    def test_accepted_by_cca(self, rng):
        d = ReprDump(rng.standard_normal((20, 2)))
        assert cca(d, d).mean_rho == pytest.approx(1.0)
