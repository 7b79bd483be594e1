import numpy as np
import pytest

from helpers import jacobi_eigh, random_spd
from whitenlab import linalg
from whitenlab.errors import InputError, NumericError


class TestCovariance:
    def test_zero_centered_degenerate_batch(self):
        out = linalg.covariance(np.zeros((3, 4)), 1e-5)
        assert np.array_equal(out, 1e-5 * np.eye(3))

    def test_one_dimensional_variance(self):
        out = linalg.covariance(np.array([[1.0, -1.0]]), 0.0)
        assert np.array_equal(out, np.array([[1.0]]))

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((4, 64))
        x -= x.mean(axis=1, keepdims=True)
        out = linalg.covariance(x, 1e-5)
        oracle = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                oracle[i, j] = sum(x[i, k] * x[j, k] for k in range(64)) / 64
        oracle = 0.5 * (oracle + oracle.T) + 1e-5 * np.eye(4)
        assert np.abs(out - oracle).max() <= 1e-12

    def test_exactly_symmetric(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((6, 17))
        out = linalg.covariance(x, 1e-7)
        assert np.array_equal(out, out.T)

    def test_rejects_non_finite(self):
        x = np.ones((2, 3))
        x[0, 0] = np.nan
        with pytest.raises(InputError, match="non-finite"):
            linalg.covariance(x, 0.0)

    def test_rejects_negative_eps(self):
        with pytest.raises(InputError):
            linalg.covariance(np.ones((2, 2)), -1.0)


class TestSymEigen:
    def test_identity(self):
        pair = linalg.sym_eigen(np.eye(3))
        assert np.array_equal(pair.eigenvalues, np.ones(3))
        assert np.array_equal(pair.eigenvectors, np.eye(3))

    def test_diagonal_descending(self):
        pair = linalg.sym_eigen(np.diag([4.0, 1.0]))
        assert np.array_equal(pair.eigenvalues, [4.0, 1.0])
        assert np.array_equal(pair.eigenvectors, np.eye(2))

    def test_reconstruction_and_orthonormality(self):
        rng = np.random.default_rng(21)
        a = rng.standard_normal((8, 8))
        a = 0.5 * (a + a.T)
        evals, vecs = linalg.sym_eigen(a)
        recon = (vecs * evals[None, :]) @ vecs.T
        assert np.linalg.norm(recon - a) / max(1.0, np.linalg.norm(a)) <= 1e-9
        assert np.linalg.norm(vecs.T @ vecs - np.eye(8)) / np.sqrt(8) <= 1e-10
        assert np.all(np.diff(evals) <= 0)

    def test_sign_convention_deterministic(self):
        rng = np.random.default_rng(22)
        a = rng.standard_normal((5, 5))
        a = 0.5 * (a + a.T)
        p1 = linalg.sym_eigen(a)
        p2 = linalg.sym_eigen(a.copy())
        assert np.array_equal(p1.eigenvectors, p2.eigenvectors)
        anchors = np.abs(p1.eigenvectors).argmax(axis=0)
        assert np.all(p1.eigenvectors[anchors, np.arange(5)] > 0)

    def test_matches_independent_jacobi_oracle(self):
        rng = np.random.default_rng(23)
        for _ in range(5):
            a = rng.standard_normal((6, 6))
            a = 0.5 * (a + a.T)
            evals, vecs = linalg.sym_eigen(a)
            j_evals, j_vecs = jacobi_eigh(a)
            assert np.abs(evals - j_evals).max() <= 1e-9
            assert np.abs(vecs - j_vecs).max() <= 1e-7

    def test_rejects_asymmetric(self):
        with pytest.raises(InputError, match="symmetric"):
            linalg.sym_eigen(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestNewtonSchulz:
    def test_scalar_fixed_point(self):
        for t in (0, 1, 7):
            p, iterates = linalg.newton_schulz(np.array([[1.0]]), t)
            assert np.array_equal(p, np.array([[1.0]]))
            assert len(iterates) == t + 1

    def test_zero_iterations_identity(self):
        p, iterates = linalg.newton_schulz(np.eye(4) / 4.0, 0)
        assert np.array_equal(p, np.eye(4))
        assert len(iterates) == 1

    def test_converges_to_eigen_oracle(self):
        rng = np.random.default_rng(31)
        a = random_spd(rng, 8, cond=50.0)
        p, _ = linalg.newton_schulz(a, 100)
        assert np.linalg.norm(p @ p @ a - np.eye(8)) <= 1e-8
        evals, vecs = linalg.sym_eigen(a)
        oracle = (vecs * (evals ** -0.5)[None, :]) @ vecs.T
        rel = np.linalg.norm(p - oracle) / np.linalg.norm(oracle)
        assert rel <= 1e-6

    def test_rejects_negative_iterations(self):
        with pytest.raises(InputError):
            linalg.newton_schulz(np.eye(2) / 2.0, -1)

    def test_rejects_bad_trace(self):
        with pytest.raises(InputError, match="trace"):
            linalg.newton_schulz(np.eye(2), 5)

    def test_divergence_detected(self):
        # unit trace but an eigenvalue outside [0, 1]: the precondition
        # (spectrum within the unit ball around I) is violated
        bad = np.diag([1.5, -0.5])
        with pytest.raises(NumericError, match="diverged"):
            linalg.newton_schulz(bad, 200)

    def test_iterates_commute_with_input(self):
        rng = np.random.default_rng(32)
        a = random_spd(rng, 12, cond=100.0)
        _, iterates = linalg.newton_schulz(a, 20)
        bound = 1e-9 * np.linalg.norm(a)
        for p in iterates:
            assert np.linalg.norm(p @ a - a @ p) <= bound

    def test_monotone_residual(self):
        rng = np.random.default_rng(33)
        for d in (4, 16, 32):
            a = random_spd(rng, d, cond=100.0)
            _, iterates = linalg.newton_schulz(a, 30)
            residuals = [np.linalg.norm(p @ p @ a - np.eye(d)) for p in iterates]
            # absolute slack covers rounding wiggle once the residual plateaus
            assert all(r1 <= r0 + 1e-12 for r0, r1 in zip(residuals, residuals[1:]))

    def test_eigen_directional_rate(self):
        # the scalar recursion induced on each eigenvalue converges faster
        # for larger eigenvalues, at every step
        lam_a, lam_b = 0.6, 0.05

        def scalar_residuals(lam, t=12):
            x = 1.0
            out = []
            for _ in range(t):
                x = 0.5 * (3.0 * x - x**3 * lam)
                out.append(abs(x * x * lam - 1.0))
            return out

        for ra, rb in zip(scalar_residuals(lam_a), scalar_residuals(lam_b)):
            assert ra <= rb


class TestSpectralNormBound:
    def test_identity_is_zero(self):
        assert linalg.spectral_norm_bound(np.eye(3)) == 0.0

    def test_half_identity(self):
        assert linalg.spectral_norm_bound(np.diag([0.5, 0.5])) == pytest.approx(0.5)

    def test_trace_normalized_spd_satisfies_precondition(self):
        rng = np.random.default_rng(41)
        for i in range(100):
            d = int(rng.integers(2, 24))
            a = random_spd(rng, d, cond=float(rng.uniform(2, 1000)))
            evals = linalg.sym_eigen(a).eigenvalues
            assert evals[-1] > 0 and evals[0] <= 1 + 1e-12
            assert linalg.spectral_norm_bound(a) < 1.0
