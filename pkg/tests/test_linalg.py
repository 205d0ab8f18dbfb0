import numpy as np
import pytest

from cape import autodiff as ad
from cape.autodiff import Tensor, backward, grad_check
from cape.linalg import (R0Bounds, SingularMatrixError, eigenvalues,
                         jacobi_eigh, r0_bounds, singular_values,
                         singular_values_op, spectral_radius)


def oracle_singular_values(M):
    """Brute-force route: eigendecomposition of the Gram matrix (numpy)."""
    M = np.asarray(M, dtype=float)
    gram = M.T @ M if M.shape[0] >= M.shape[1] else M @ M.T
    w = np.linalg.eigvalsh(gram)
    return np.sqrt(np.maximum(w, 0.0))[::-1]


class TestSingularValues:
    def test_identity(self):
        np.testing.assert_allclose(singular_values(np.eye(4)), np.ones(4), atol=1e-12)

    def test_diagonal(self):
        np.testing.assert_allclose(singular_values(np.diag([3.0, 1.0])), [3.0, 1.0],
                                   atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_random_matches_gram_eigendecomposition(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(8, 8))
        np.testing.assert_allclose(singular_values(m), oracle_singular_values(m),
                                   atol=1e-9)

    @pytest.mark.parametrize("shape", [(5, 3), (3, 5), (6, 6)])
    def test_transpose_invariance(self, shape):
        rng = np.random.default_rng(11)
        m = rng.normal(size=shape)
        np.testing.assert_allclose(singular_values(m), singular_values(m.T),
                                   atol=1e-10)

    def test_jacobi_eigh_orthogonality(self):
        rng = np.random.default_rng(12)
        a = rng.normal(size=(10, 10))
        s = a + a.T
        w, v = jacobi_eigh(s)
        np.testing.assert_allclose(v.T @ v, np.eye(10), atol=1e-12)
        np.testing.assert_allclose(s @ v, v @ np.diag(w), atol=1e-10)
        np.testing.assert_allclose(np.sort(w), np.sort(np.linalg.eigvalsh(s)),
                                   atol=1e-10)


class TestSpectralRadius:
    def test_diagonal(self):
        assert spectral_radius(np.diag([2.0, -5.0])) == pytest.approx(5.0, abs=1e-12)

    def test_rotation_unit_modulus(self):
        rot = np.array([[0.0, -1.0], [1.0, 0.0]])
        assert spectral_radius(rot) == pytest.approx(1.0, abs=1e-10)

    @pytest.mark.parametrize("seed", range(20))
    def test_random_matches_dense_eigensolver_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        m = rng.normal(size=(10, 10))
        expected = np.max(np.abs(np.linalg.eigvals(m)))
        assert spectral_radius(m) == pytest.approx(expected, abs=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_eigenvalue_sets_match_oracle(self, seed):
        rng = np.random.default_rng(200 + seed)
        m = rng.normal(size=(7, 7))
        ours = list(eigenvalues(m))
        ref = list(np.linalg.eigvals(m))
        for lam in ref:  # match as multisets; pair ordering is arbitrary
            dists = [abs(lam - mu) for mu in ours]
            k = int(np.argmin(dists))
            assert dists[k] < 1e-8
            ours.pop(k)

    def test_scaling_homogeneity(self):
        rng = np.random.default_rng(13)
        m = rng.normal(size=(6, 6))
        c = -3.7
        assert spectral_radius(c * m) == pytest.approx(
            abs(c) * spectral_radius(m), abs=1e-9)

    def test_defective_and_triangular(self):
        m = np.array([[2.0, 1.0], [0.0, 2.0]])  # defective Jordan block
        assert spectral_radius(m) == pytest.approx(2.0, abs=1e-6)
        assert spectral_radius(np.zeros((3, 3))) == 0.0


class TestR0Bounds:
    def test_identity_pair(self):
        b = r0_bounds(np.eye(3), np.eye(3))
        assert b.lower == pytest.approx(1.0, abs=1e-12)
        assert b.upper == pytest.approx(1.0, abs=1e-12)
        assert spectral_radius(np.eye(3)) == pytest.approx(1.0, abs=1e-12)

    def test_diagonal_arithmetic(self):
        F = np.diag([2.0, 8.0])
        V = np.diag([1.0, 4.0])
        b = r0_bounds(F, V)
        assert b.lower == pytest.approx(0.5, abs=1e-12)
        assert b.upper == pytest.approx(8.0, abs=1e-12)
        rho = spectral_radius(F @ np.linalg.inv(V))
        assert rho == pytest.approx(2.0, abs=1e-12)
        assert b.contains(rho)

    def test_singular_v_rejected(self):
        V = np.diag([1.0, 0.0])
        with pytest.raises(SingularMatrixError, match="singular"):
            r0_bounds(np.eye(2), V)

    def test_bound_holds_on_random_pairs(self):
        # oracle: rho via numpy's dense eigensolver, independent of our QR
        rng = np.random.default_rng(77)
        checked = 0
        while checked < 200:
            n = int(rng.integers(2, 17))
            F = rng.normal(size=(n, n))
            V = rng.normal(size=(n, n))
            sv = np.linalg.svd(V, compute_uv=False)
            if sv[-1] <= 0 or sv[0] / sv[-1] >= 1e6:
                continue
            b = r0_bounds(F, V)
            rho = np.max(np.abs(np.linalg.eigvals(F @ np.linalg.inv(V))))
            assert b.lower - rho <= 1e-9
            assert rho - b.upper <= 1e-9
            checked += 1

    def test_clamp_keeps_lower_below_upper(self):
        b = R0Bounds(lower=1.0 + 1e-12, upper=1.0)
        assert b.lower <= b.upper


class TestSingularValueGradients:
    @pytest.mark.parametrize("seed", range(10))
    def test_extreme_singular_value_gradients_match_fd(self, seed):
        rng = np.random.default_rng(300 + seed)
        m = rng.normal(size=(5, 5))
        # random matrices have distinct singular values almost surely
        def f_max(ts):
            return singular_values_op(ts[0])[0]

        def f_min(ts):
            return singular_values_op(ts[0])[4]

        for f in (f_max, f_min):
            report = grad_check(f, [m], step=1e-5, tolerance=1e-4)
            assert report.passed, report

    def test_gradient_direction_matches_uvt(self):
        rng = np.random.default_rng(14)
        m = rng.normal(size=(4, 4))
        t = Tensor(m, requires_grad=True)
        sig = singular_values_op(t)
        g = backward(sig[0], [t])[t]
        u, s, vt = np.linalg.svd(m)
        expected = np.outer(u[:, 0], vt[0])
        # sign convention of singular vectors may differ; u v^T is sign-free
        np.testing.assert_allclose(g, expected, atol=1e-8)

    def test_bound_ratio_gradient(self):
        rng = np.random.default_rng(15)
        f_mat = rng.normal(size=(4, 4))
        v_mat = rng.normal(size=(4, 4)) + 3 * np.eye(4)

        def upper_bound(ts):
            sf = singular_values_op(ts[0])
            sv = singular_values_op(ts[1])
            return ad.div(sf[0], sv[3])

        report = grad_check(upper_bound, [f_mat, v_mat], step=1e-5, tolerance=1e-4)
        assert report.passed, report
