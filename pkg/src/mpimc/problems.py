"""Test problems and the gene-network statistics pipeline.

Pipeline: expression matrix -> sample covariance -> inverse covariance
(one mixed-precision solve per unit vector) -> partial correlations ->
thresholded interactome with group-level strengths.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConvergenceError, DomainError
from .rng import derive_rng


def model_covariance(n: int) -> np.ndarray:
    """Dense model covariance: ``1/|i-j|`` off the diagonal, ``1 + sqrt(i)`` on it.

    Indices are 1-based, so ``A[0, 0] == 2``.
    """
    if n < 1:
        raise DomainError("N must be >= 1")
    i = np.arange(1, n + 1, dtype=float)
    d = np.abs(i[:, None] - i[None, :])
    np.fill_diagonal(d, 1.0)
    A = 1.0 / d
    A[np.diag_indices(n)] = 1.0 + np.sqrt(i)
    return A


def generate_rhs(n: int, seed: int = 0) -> np.ndarray:
    """Right-hand side with entries uniform in [0, 1]."""
    return derive_rng(seed, "rhs").uniform(0.0, 1.0, size=n)


@dataclass
class ExpressionMatrix:
    """Samples x genes expression values, optionally labelled by cohort."""

    values: np.ndarray
    gene_ids: list
    cohorts: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise DomainError("expression values must be a samples x genes matrix")
        if len(self.gene_ids) != self.values.shape[1]:
            raise DomainError("one gene id per column required")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("expression values contain missing or non-finite entries")
        if self.cohorts is not None:
            self.cohorts = np.asarray(self.cohorts, dtype=object)
            if self.cohorts.shape != (self.values.shape[0],):
                raise DomainError("one cohort label per sample required")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return self.values.shape[1]

    def sample_count(self) -> dict:
        if self.cohorts is None:
            return {None: self.n_samples}
        labels, counts = np.unique(self.cohorts.astype(str), return_counts=True)
        return dict(zip(labels.tolist(), counts.tolist()))

    def cohort(self, label) -> "ExpressionMatrix":
        if self.cohorts is None:
            raise DomainError("no cohort labels present")
        mask = self.cohorts.astype(str) == str(label)
        if not mask.any():
            raise DomainError(f"no samples in cohort {label!r}")
        return ExpressionMatrix(self.values[mask], list(self.gene_ids), self.cohorts[mask])

    def subsample(self, n: int, seed: int = 0) -> "ExpressionMatrix":
        """Uniform subsample of ``n`` samples without replacement."""
        if n > self.n_samples:
            raise DomainError(f"cannot draw {n} of {self.n_samples} samples")
        idx = np.sort(derive_rng(seed, "subsample").choice(self.n_samples, n, replace=False))
        cohorts = None if self.cohorts is None else self.cohorts[idx]
        return ExpressionMatrix(self.values[idx], list(self.gene_ids), cohorts)


def load_expression_csv(path, cohort_column: Optional[str] = "cohort") -> ExpressionMatrix:
    """Read a genes-as-columns CSV with a header row of gene ids.

    If ``cohort_column`` is present in the header, that column labels each
    sample and is not treated as a gene.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    ci = header.index(cohort_column) if cohort_column in header else None
    genes = [h for k, h in enumerate(header) if k != ci]
    try:
        values = [[float(x) for k, x in enumerate(row) if k != ci] for row in rows]
    except ValueError as exc:
        raise DomainError(f"{path}: non-numeric expression value ({exc})") from None
    cohorts = [row[ci] for row in rows] if ci is not None else None
    return ExpressionMatrix(np.array(values, dtype=float).reshape(len(rows), len(genes)),
                            genes, cohorts)


def write_expression_csv(path, X: ExpressionMatrix, cohort_column: str = "cohort"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if X.cohorts is None:
            w.writerow(X.gene_ids)
            w.writerows([repr(float(x)) for x in row] for row in X.values)
        else:
            w.writerow([cohort_column, *X.gene_ids])
            for lab, row in zip(X.cohorts, X.values):
                w.writerow([lab, *(repr(float(x)) for x in row)])


def sample_covariance(X) -> np.ndarray:
    """Unbiased sample covariance of the gene columns (divisor ``n - 1``)."""
    values = X.values if isinstance(X, ExpressionMatrix) else np.asarray(X, dtype=float)
    n = values.shape[0]
    if n < 2:
        raise DomainError("sample covariance needs at least two samples")
    centered = values - values.mean(axis=0)
    return centered.T @ centered / (n - 1)


def inverse_covariance(A, solver=None, *, reference=None, return_traces: bool = False):
    """Invert ``A`` column by column with the mixed-precision solver.

    Parameters
    ----------
    A : (G, G) array
    solver : MixedPrecisionSolver, optional
        A solver already configured for ``A``. Defaults to GMRES with
        diagonal preconditioning, m = 5, K = 4 and tol = 1e-3.
    reference : (G, G) array, optional
        Exact inverse; when given, traces carry error norms.

    The column estimates are averaged with their transposes, since the
    inverse of a symmetric matrix is symmetric.
    """
    from .solver import MixedPrecisionSolver

    A = np.asarray(A, dtype=float)
    if solver is None:
        solver = MixedPrecisionSolver(A, method="gmres", m=5, K=4, tol=1e-3)
    elif solver.A.shape != A.shape or not np.array_equal(solver.A, A):
        raise DomainError("solver was configured for a different matrix")
    g = A.shape[0]
    sigma = np.empty((g, g))
    traces, failed = [], []
    for n in range(g):
        e = np.zeros(g)
        e[n] = 1.0
        x, trace = solver.solve(e, x_exact=None if reference is None else reference[:, n])
        trace.meta["column"] = n
        traces.append(trace)
        if not trace.converged:
            failed.append(n)
        sigma[:, n] = x
    if failed:
        raise ConvergenceError(f"columns {failed} did not converge", failed)
    if np.allclose(A, A.T):
        sigma = 0.5 * (sigma + sigma.T)
    return (sigma, traces) if return_traces else sigma


def partial_correlation(sigma) -> np.ndarray:
    """``rho_ij = -S_ij / sqrt(S_ii S_jj)`` off the diagonal, 1 on it."""
    sigma = np.asarray(sigma, dtype=float)
    d = np.diag(sigma)
    if np.any(d <= 0):
        raise DomainError("inverse covariance must have a positive diagonal")
    rho = -sigma / np.sqrt(np.outer(d, d))
    np.fill_diagonal(rho, 1.0)
    return rho


def percentile_threshold(rho_reference, percentile: float = 90.0) -> float:
    """Linear-interpolation percentile of ``|rho|`` over the strict upper triangle."""
    rho_reference = np.asarray(rho_reference, dtype=float)
    if not (0 < percentile < 100):
        raise DomainError("percentile must lie in (0, 100)")
    iu = np.triu_indices(rho_reference.shape[0], k=1)
    vals = np.abs(rho_reference[iu])
    if vals.size == 0:
        raise DomainError("reference matrix has no off-diagonal entries")
    return float(np.percentile(vals, percentile, method="linear"))


@dataclass
class GeneNetwork:
    partial_corr: np.ndarray
    threshold: float
    gene_ids: list
    groups: dict
    edges: list = field(default_factory=list)
    group_strengths: dict = field(default_factory=dict)

    def edge_set(self) -> set:
        return {frozenset((self.gene_ids[i], self.gene_ids[j])) for i, j, _ in self.edges}

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "nodes": [{"id": g, "group": self.groups[g]} for g in self.gene_ids],
            "edges": [{"source": self.gene_ids[i], "target": self.gene_ids[j],
                       "weight": w, "sign": int(np.sign(w))} for i, j, w in self.edges],
            "group_strengths": [{"group_a": a, "group_b": b, "strength": s, "pairs": n}
                                for (a, b), (s, n) in sorted(self.group_strengths.items())],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def write_matrix_csv(path, matrix, labels: Sequence[str]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["", *labels])
        for lab, row in zip(labels, np.asarray(matrix)):
            w.writerow([lab, *(repr(float(x)) for x in row)])


def build_interactome(rho_case, rho_reference, groups: Optional[Mapping] = None,
                      percentile: float = 90.0,
                      gene_ids: Optional[Sequence[str]] = None) -> GeneNetwork:
    """Threshold ``rho_case`` at a percentile of ``|rho_reference|``.

    ``groups`` maps gene id to group name (genes missing from the map form
    singleton groups). The strength between two groups is the mean partial
    correlation over gene pairs that straddle them and pass the threshold.
    """
    rho_case = np.asarray(rho_case, dtype=float)
    rho_reference = np.asarray(rho_reference, dtype=float)
    if rho_case.shape != rho_reference.shape or rho_case.ndim != 2:
        raise DomainError("case and reference matrices must have the same square shape")
    g = rho_case.shape[0]
    gene_ids = [f"g{i}" for i in range(g)] if gene_ids is None else list(gene_ids)
    if len(gene_ids) != g:
        raise DomainError("one gene id per row required")
    groups = dict(groups or {})
    membership = {gid: str(groups.get(gid, gid)) for gid in gene_ids}
    tau = percentile_threshold(rho_reference, percentile)

    iu, ju = np.triu_indices(g, k=1)
    keep = np.abs(rho_case[iu, ju]) > tau
    edges = [(int(i), int(j), float(rho_case[i, j])) for i, j in zip(iu[keep], ju[keep])]

    sums: dict = {}
    for i in range(g):
        for j in range(g):
            if i == j or not abs(rho_case[i, j]) > tau:
                continue
            a, b = membership[gene_ids[i]], membership[gene_ids[j]]
            # ordered pairs, so a within-group pair contributes (i,j) and (j,i)
            if a > b:
                continue
            s, n = sums.get((a, b), (0.0, 0))
            sums[(a, b)] = (s + rho_case[i, j], n + 1)
    strengths = {k: (float(s / n), int(n)) for k, (s, n) in sums.items()}
    return GeneNetwork(rho_case, tau, gene_ids, membership, edges, strengths)


def random_sparse_precision(n_genes: int, seed: int = 0, n_edges: Optional[int] = None,
                            strength=(0.25, 0.45)) -> np.ndarray:
    """Sparse symmetric positive-definite precision matrix with unit diagonal.

    Off-diagonal magnitudes are drawn from ``strength`` with random signs;
    the diagonal is then raised if needed to keep the matrix positive
    definite, and the result is rescaled to unit diagonal.
    """
    rng = derive_rng(seed, "precision")
    n_edges = n_genes if n_edges is None else n_edges
    theta = np.eye(n_genes)
    iu, ju = np.triu_indices(n_genes, k=1)
    pick = rng.choice(iu.size, size=n_edges, replace=False)
    w = rng.uniform(*strength, size=n_edges) * rng.choice([-1.0, 1.0], size=n_edges)
    theta[iu[pick], ju[pick]] = w
    theta[ju[pick], iu[pick]] = w
    lam = np.linalg.eigvalsh(theta)[0]
    if lam < 0.2:
        theta += (0.2 - lam) * np.eye(n_genes)
    d = np.sqrt(np.diag(theta))
    return theta / np.outer(d, d)


def sample_gaussian_cohort(precision, n_samples: int, seed: int = 0,
                           gene_ids: Optional[Sequence[str]] = None,
                           cohort: Optional[str] = None) -> ExpressionMatrix:
    """Draw samples from ``N(0, precision^{-1})``."""
    precision = np.asarray(precision, dtype=float)
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    rng = derive_rng(seed, "cohort", cohort or "")
    values = rng.multivariate_normal(np.zeros(cov.shape[0]), cov, size=n_samples,
                                     method="cholesky")
    gene_ids = [f"G{i + 1:02d}" for i in range(cov.shape[0])] if gene_ids is None else list(gene_ids)
    cohorts = None if cohort is None else [cohort] * n_samples
    return ExpressionMatrix(values, gene_ids, cohorts)
