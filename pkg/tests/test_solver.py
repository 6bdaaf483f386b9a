"""Outer refinement loop, CG and GMRES inner solvers, preconditioning."""

import mpmath
import numpy as np
import pytest
import scipy.sparse.linalg as spla
from hypothesis import given, settings
from hypothesis import strategies as st

from mpimc.errors import BreakdownError, DivergenceError, DomainError
from mpimc.pcm_device import NoiseModel
from mpimc.problems import generate_rhs, model_covariance
from mpimc.solver import (
    ExactOperator,
    InnerSolver,
    LinearProblem,
    MixedPrecisionSolver,
    cg_baseline,
    cg_inner,
    exact_inner,
    gmres_inner,
    hessenberg_lstsq,
    iterative_refine,
    precondition_split,
    residual,
)


def random_spd(n, seed, cond=10.0):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return q @ np.diag(np.linspace(1.0, cond, n)) @ q.T


def random_nonsym(n, seed):
    rng = np.random.default_rng(seed)
    return np.eye(n) * 3 + rng.normal(size=(n, n)) / np.sqrt(n)


def krylov_lstsq(A, r, m):
    """m-step GMRES iterate by brute force: min ||r - A z|| over span{r, Ar, ...}."""
    K = np.empty((r.size, m))
    K[:, 0] = r / np.linalg.norm(r)
    for j in range(1, m):
        K[:, j] = A @ K[:, j - 1]
        K[:, j] /= np.linalg.norm(K[:, j])
    Q, _ = np.linalg.qr(K)
    c, *_ = np.linalg.lstsq(A @ Q, r, rcond=None)
    return Q @ c


class TestResidual:
    def test_zero_iterate(self):
        prob = LinearProblem(np.eye(3) * 2, np.array([1.0, 2.0, 3.0]))
        assert np.array_equal(residual(prob, np.zeros(3)), prob.b)
        assert prob.hp_matvecs == 1

    def test_backward_error_bound(self):
        A = model_covariance(50)
        b = generate_rhs(50, 0)
        prob = LinearProblem(A, b)
        x = np.linalg.solve(A, b)
        eps = np.finfo(float).eps
        bound = 50 * eps * np.linalg.norm(A, 2) * np.linalg.norm(x)
        assert np.linalg.norm(residual(prob, x)) <= bound

    def test_matches_high_precision(self):
        rng = np.random.default_rng(3)
        A, b, x = rng.normal(size=(5, 5)), rng.normal(size=5), rng.normal(size=5)
        r = residual(LinearProblem(A, b), x)
        mpmath.mp.dps = 50
        for i in range(5):
            exact = mpmath.mpf(b[i]) - mpmath.fsum(mpmath.mpf(A[i, j]) * mpmath.mpf(x[j])
                                                   for j in range(5))
            assert r[i] == pytest.approx(float(exact), rel=1e-12, abs=1e-14)

    def test_problem_validation(self):
        with pytest.raises(DomainError):
            LinearProblem(np.ones((2, 3)), np.ones(2))
        with pytest.raises(DomainError):
            LinearProblem(np.eye(2), np.ones(3))
        with pytest.raises(DomainError):
            LinearProblem(np.eye(2), np.ones(2), M_inv_diag=np.array([1.0, 0.0]))


class TestCG:
    def test_identity_one_step(self):
        r = np.array([1.0, -2.0, 0.5])
        z, ws = cg_inner(lambda v: v, r, 1, full_output=True)
        assert ws.alphas == [1.0]
        assert np.array_equal(z, r)

    def test_finite_termination_4x4(self):
        A = random_spd(4, 0)
        r = np.random.default_rng(1).normal(size=4)
        z = cg_inner(lambda v: A @ v, r, 4)
        assert np.max(np.abs(z - np.linalg.solve(A, r))) < 1e-10

    def test_breakdown(self):
        # <w, v> = 0 for an indefinite operator with a null direction
        A = np.array([[1.0, 0.0], [0.0, -1.0]])
        with pytest.raises(BreakdownError):
            cg_inner(lambda v: A @ v, np.array([1.0, 1.0]), 2)

    def test_bad_m(self):
        with pytest.raises(DomainError):
            cg_inner(lambda v: v, np.ones(2), 0)

    @pytest.mark.parametrize("n,seed", [(5, 0), (20, 1), (50, 2)])
    def test_matches_scipy_partial_iterates(self, n, seed):
        A = random_spd(n, seed)
        r = np.random.default_rng(seed).normal(size=n)
        for k in (1, 3, 7):
            z = cg_inner(lambda v: A @ v, r, k)
            ref, _ = spla.cg(A, r, x0=np.zeros(n), rtol=0.0, atol=0.0, maxiter=k)
            assert np.max(np.abs(z - ref)) < 1e-10

    @pytest.mark.parametrize("n,seed", [(10, 3), (50, 4)])
    def test_refinement_with_full_cg_is_classical(self, n, seed):
        A = random_spd(n, seed)
        b = np.random.default_rng(seed).normal(size=n)
        prob = LinearProblem(A, b)
        x, trace = iterative_refine(prob, lambda r: cg_inner(lambda v: A @ v, r, n), 1e-12)
        ref, info = spla.cg(A, b, rtol=1e-14, atol=0.0, maxiter=10 * n)
        assert trace.converged and info == 0
        assert np.max(np.abs(x - ref)) < 1e-10
        assert np.max(np.abs(x - np.linalg.solve(A, b))) < 1e-10


class TestGMRES:
    def test_identity_happy_breakdown(self):
        r = np.array([0.3, -1.0, 2.0])
        z, ws = gmres_inner(lambda v: np.zeros_like(v), r, 1, add_identity=True,
                            full_output=True)
        assert ws.H[0, 0] == pytest.approx(1.0) and ws.H[1, 0] == 0.0
        assert ws.iterations == 1
        assert np.allclose(z, r, rtol=0, atol=1e-15)

    def test_eigenvector_breakdown(self):
        A = random_spd(6, 5)
        lam, Q = np.linalg.eigh(A)
        r = Q[:, 2] * 3.0
        z, ws = gmres_inner(lambda v: A @ v, r, 4, full_output=True)
        assert ws.iterations == 1
        assert np.max(np.abs(z - r / lam[2])) < 1e-10

    def test_nonsymmetric_3x3(self):
        A = np.array([[4.0, 1.0, -2.0], [0.5, 3.0, 1.0], [2.0, -1.0, 5.0]])
        r = np.array([1.0, 2.0, 3.0])
        z = gmres_inner(lambda v: A @ v, r, 3)
        assert np.max(np.abs(z - np.linalg.solve(A, r))) < 1e-10

    def test_zero_rhs(self):
        with pytest.raises(DomainError):
            gmres_inner(lambda v: v, np.zeros(3), 2)

    def test_basis_orthonormal(self):
        A = random_nonsym(40, 6)
        r = np.random.default_rng(6).normal(size=40)
        _, ws = gmres_inner(lambda v: A @ v, r, 10, full_output=True)
        assert np.max(np.abs(np.linalg.norm(ws.V, axis=0) - 1)) < 1e-10
        assert np.max(np.abs(ws.V.T @ ws.V - np.eye(ws.V.shape[1]))) < 1e-10

    @pytest.mark.parametrize("n,seed", [(8, 7), (30, 8), (50, 9)])
    def test_matches_reference_iterates(self, n, seed):
        A = random_nonsym(n, seed)
        r = np.random.default_rng(seed).normal(size=n)
        for m in (1, 4, 8):
            z = gmres_inner(lambda v: A @ v, r, m)
            assert np.max(np.abs(z - krylov_lstsq(A, r, m))) < 1e-10
            ref, _ = spla.gmres(A, r, x0=np.zeros(n), rtol=1e-15, atol=0.0,
                                restart=m, maxiter=1)
            assert np.max(np.abs(z - ref)) < 1e-10
        full = gmres_inner(lambda v: A @ v, r, n)
        assert np.max(np.abs(full - np.linalg.solve(A, r))) < 1e-10

    @settings(max_examples=50, deadline=None)
    @given(m=st.integers(1, 8), seed=st.integers(0, 2**32))
    def test_hessenberg_minimizer(self, m, seed):
        rng = np.random.default_rng(seed)
        H = np.triu(rng.normal(size=(m + 1, m)), k=-1)
        H[np.arange(1, m + 1), np.arange(m)] = np.abs(H[np.arange(1, m + 1), np.arange(m)]) + 0.1
        beta = float(rng.uniform(0.1, 10))
        e1 = np.zeros(m + 1)
        e1[0] = beta
        y = hessenberg_lstsq(H, beta)
        best = np.linalg.norm(e1 - H @ y)
        probes = y + rng.normal(size=(100, m)) * rng.uniform(1e-6, 1, size=(100, 1))
        assert np.all(np.linalg.norm(e1[None, :] - probes @ H.T, axis=1) >= best - 1e-12)
        ref, *_ = np.linalg.lstsq(H, e1, rcond=None)
        assert np.allclose(y, ref, atol=1e-9 * max(1, np.abs(ref).max()))


class TestPrecondition:
    def test_diagonal_matrix(self):
        off, minv = precondition_split(np.diag([2.0, 4.0, 5.0]))
        assert np.all(off == 0)
        assert np.allclose(minv, [0.5, 0.25, 0.2])

    def test_hand_example(self):
        off, minv = precondition_split(np.array([[2.0, 1.0], [1.0, 4.0]]))
        assert np.array_equal(off, np.array([[0.0, 0.5], [0.25, 0.0]]))
        assert np.array_equal(minv, np.array([0.5, 0.25]))

    def test_zero_diagonal(self):
        with pytest.raises(DomainError):
            precondition_split(np.array([[0.0, 1.0], [1.0, 1.0]]))

    def test_unit_diagonal_restored(self):
        A = model_covariance(6)
        off, _ = precondition_split(A)
        for i in range(6):
            e = np.zeros(6)
            e[i] = 1.0
            assert (off @ e + e)[i] == 1.0

    def test_preconditioned_gmres_solves_original(self):
        A = random_nonsym(12, 10)
        b = np.random.default_rng(10).normal(size=12)
        solver = MixedPrecisionSolver(A, method="gmres", m=12, analog=False, tol=1e-12)
        assert solver.meta["precondition"]
        x, trace = solver.solve(b)
        assert trace.converged
        assert np.max(np.abs(x - np.linalg.solve(A, b))) < 1e-10


class TestIterativeRefine:
    def test_exact_inner_one_refinement(self):
        A = model_covariance(30)
        b = generate_rhs(30, 1)
        x, trace = iterative_refine(LinearProblem(A, b), exact_inner(A), 1e-10)
        assert trace.converged and trace.refinements_used == 1
        assert trace.hp_matvecs == 2

    def test_bad_arguments(self):
        prob = LinearProblem(np.eye(2), np.ones(2))
        with pytest.raises(DomainError):
            iterative_refine(prob, exact_inner(np.eye(2)), 0.0)
        with pytest.raises(DomainError):
            iterative_refine(prob, exact_inner(np.eye(2)), 1e-3, max_refinements=0)

    def test_nonfinite_raises_with_index(self):
        prob = LinearProblem(np.eye(3), np.ones(3))
        calls = []

        def inner(r):
            calls.append(1)
            return r * (np.nan if len(calls) == 3 else 0.5)

        with pytest.raises(DivergenceError) as exc:
            iterative_refine(prob, inner, 1e-12)
        assert exc.value.refinement == 3

    def test_divergence_window(self):
        prob = LinearProblem(np.eye(3), np.ones(3))
        _, trace = iterative_refine(prob, lambda r: -0.5 * r, 1e-8)
        assert trace.diverged and not trace.converged
        assert trace.refinements_used == 10
        assert np.all(np.diff(trace.residual_norms) > 0)

    def test_budget_exhausted(self):
        prob = LinearProblem(np.eye(2), np.ones(2))
        _, trace = iterative_refine(prob, lambda r: 0.1 * r, 1e-12, max_refinements=5)
        assert not trace.converged and trace.refinements_used == 5

    def test_trace_exports(self):
        A = model_covariance(20)
        b = generate_rhs(20, 2)
        solver = MixedPrecisionSolver(A, method="cg", m=5, K=2, model=NoiseModel(seed=1))
        x, trace = solver.solve(b, x_exact=np.linalg.solve(A, b))
        csv_text = trace.to_csv()
        assert csv_text.splitlines()[0].startswith("refinement,residual_norm,error_norm")
        assert len(csv_text.splitlines()) == len(trace.records) + 1
        d = trace.to_dict()
        assert d["meta"]["K"] == 2 and d["meta"]["m"] == 5
        assert d["meta"]["noise"]["seed"] == 1
        assert trace.records[-1].residual_norm < trace.tol

    @pytest.mark.parametrize("n,band", [(100, None), (500, 12)])
    def test_default_noise_reaches_tol(self, n, band):
        A = model_covariance(n)
        b = generate_rhs(n, 1)
        solver = MixedPrecisionSolver(A, method="cg", m=5, K=4, band_halfwidth=band,
                                      model=NoiseModel(seed=3), tol=1e-5)
        _, trace = solver.solve(b)
        assert trace.converged and trace.residual_norms[-1] < 1e-5
        # residual falls on average: every window of 3 refinements shrinks it
        r = trace.residual_norms
        assert np.all(r[3:] < r[:-3])

    def test_matvec_accounting(self):
        A = model_covariance(60)
        b = generate_rhs(60, 4)
        solver = MixedPrecisionSolver(A, method="cg", m=5, K=2, model=NoiseModel(seed=2))
        _, trace = solver.solve(b)
        assert trace.hp_matvecs == trace.refinements_used + 1
        assert trace.analog_matvecs == 5 * trace.refinements_used
        assert solver.operator.matvecs == trace.analog_matvecs

    def test_accuracy_ceiling_independent_of_noise(self):
        """Final error at tol 1e-10 for noise sigma and sigma/10 over 20 seeds."""
        from scipy import stats

        A = model_covariance(100)
        b = generate_rhs(100, 1)
        x_exact = np.linalg.solve(A, b)

        def final_errors(factor):
            out = []
            for s in range(20):
                model = NoiseModel.low_noise(seed=s, factor=factor)
                x, trace = MixedPrecisionSolver(A, method="cg", m=5, K=4, model=model,
                                                tol=1e-10).solve(b)
                assert trace.converged
                out.append(np.linalg.norm(x - x_exact))
            return np.array(out)

        noisy, quiet = final_errors(1.0), final_errors(0.1)
        assert stats.mannwhitneyu(noisy, quiet).pvalue > 0.01
        assert np.all(noisy < 1e-9) and np.all(quiet < 1e-9)


class TestSolverPlumbing:
    def test_auto_method(self):
        assert MixedPrecisionSolver(model_covariance(5), analog=False).method == "cg"
        assert MixedPrecisionSolver(random_nonsym(5, 0), analog=False).method == "gmres"

    def test_cg_on_nonsymmetric_warns(self):
        with pytest.warns(UserWarning):
            MixedPrecisionSolver(random_nonsym(5, 0), method="cg", analog=False)

    def test_unknown_inner(self):
        with pytest.raises(DomainError):
            InnerSolver("bicgstab", ExactOperator(np.eye(2)), 3)

    def test_cg_baseline_counts(self):
        A = model_covariance(500)
        b = generate_rhs(500, 1)
        x, k = cg_baseline(A, b, 1e-5)
        assert np.linalg.norm(b - A @ x) < 1e-5
        _, k_prev = cg_baseline(A, b, 1e-5, max_iter=k - 1)
        assert k_prev == k - 1
        assert k == 29
