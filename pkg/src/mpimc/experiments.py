"""Experiment recipes: scalar multiplication, model-matrix solves, gene networks.

Each ``run_*`` function takes an :class:`ExperimentConfig`, writes its
artifacts into ``cfg.out`` (when set) and returns a JSON-serializable
summary. Identical (config, seed) pairs produce byte-identical files.

Seeds: the master ``cfg.seed`` feeds :func:`mpimc.rng.derive_seed` with a
label per stage ("noise", "rhs", "pairs", "subsample", ...), so any stage
can be re-run on its own.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .crossbar import ARRAY_BUDGET, required_devices, scalar_multiply_batch
from .errors import ConfigError, ConvergenceError
from .pcm_device import NoiseModel
from .problems import (
    build_interactome,
    generate_rhs,
    inverse_covariance,
    load_expression_csv,
    model_covariance,
    partial_correlation,
    sample_covariance,
    write_matrix_csv,
)
from .rng import derive_rng, derive_seed
from .solver import MixedPrecisionSolver, cg_baseline

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

KINDS = ("scalar-mult", "solve-model", "gene-network")
# gene networks use GMRES with a looser tolerance than the model-matrix solves
KIND_SOLVER_DEFAULTS = {"gene-network": {"inner": "gmres", "tol": 1e-3}}


@dataclass
class SolverSettings:
    tol: float = 1e-5
    m: int = 5
    K: int = 4
    band_halfwidth: Optional[int] = None
    max_refinements: int = 200
    inner: str = "auto"
    calibrate: bool = True
    analog: bool = True


@dataclass
class ProblemSettings:
    # scalar-mult
    k_values: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    pairs: int = 1024
    histogram_bins: int = 41
    # solve-model
    n: int = 500
    baseline: bool = True
    # shared: independent repetitions (seeds) per experiment
    repeats: int = 1
    # gene-network
    expression_csv: Optional[str] = None
    cohort_column: str = "cohort"
    reference_cohort: str = "normal"
    case_cohort: str = "cancer"
    groups_json: Optional[str] = None
    percentile: float = 90.0
    equalize: bool = True


@dataclass
class ExperimentConfig:
    kind: str
    noise: NoiseModel = field(default_factory=NoiseModel)
    solver: SolverSettings = field(default_factory=SolverSettings)
    problem: ProblemSettings = field(default_factory=ProblemSettings)
    seed: int = 0
    out: Optional[str] = None
    device_budget: int = ARRAY_BUDGET

    @classmethod
    def from_dict(cls, d: dict, kind: Optional[str] = None) -> "ExperimentConfig":
        d = dict(d)
        file_kind = d.pop("kind", None)
        if kind and file_kind and kind != file_kind:
            raise ConfigError(f"config is for {file_kind!r}, not {kind!r}")
        kind = kind or file_kind
        if kind not in KINDS:
            raise ConfigError(f"experiment kind must be one of {KINDS}, got {kind!r}")
        solver_d = dict(KIND_SOLVER_DEFAULTS.get(kind, {}))
        solver_d.update(d.pop("solver", {}))
        try:
            noise = NoiseModel.from_dict(d.pop("noise", {}))
            solver = SolverSettings(**solver_d)
            problem = ProblemSettings(**d.pop("problem", {}))
            cfg = cls(kind, noise, solver, problem, **d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    @classmethod
    def default(cls, kind: str, **changes) -> "ExperimentConfig":
        return cls.from_dict(changes, kind)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "out": self.out,
            "device_budget": self.device_budget,
            "noise": self.noise.to_dict(),
            "solver": dataclasses.asdict(self.solver),
            "problem": dataclasses.asdict(self.problem),
        }

    def validate(self):
        """Check parameter domains and the device budget before any programming."""
        s, p = self.solver, self.problem
        if s.tol <= 0 or s.m < 1 or s.K < 1 or s.max_refinements < 1:
            raise ConfigError("solver needs tol > 0, m >= 1, K >= 1, max_refinements >= 1")
        if s.band_halfwidth is not None and s.band_halfwidth < 0:
            raise ConfigError("band_halfwidth must be >= 0")
        if s.inner not in ("auto", "cg", "gmres"):
            raise ConfigError("solver.inner must be auto, cg or gmres")
        if p.repeats < 1:
            raise ConfigError("problem.repeats must be >= 1")
        if self.kind == "scalar-mult":
            if not p.k_values or any(int(k) < 1 for k in p.k_values):
                raise ConfigError("k_values must be a non-empty list of integers >= 1")
            if p.pairs < 1:
                raise ConfigError("pairs must be >= 1")
            need = max(p.k_values) * p.pairs
        elif self.kind == "solve-model":
            if p.n < 1:
                raise ConfigError("problem.n must be >= 1")
            need = required_devices(p.n, s.K, s.band_halfwidth) if s.analog else 0
        else:
            if not p.expression_csv:
                raise ConfigError("gene-network needs problem.expression_csv")
            if not os.path.exists(p.expression_csv):
                raise ConfigError(f"expression CSV not found: {p.expression_csv}")
            if p.groups_json and not os.path.exists(p.groups_json):
                raise ConfigError(f"groups file not found: {p.groups_json}")
            if not (0 < p.percentile < 100):
                raise ConfigError("percentile must lie in (0, 100)")
            need = 0  # checked once the gene count is known
        self.check_budget(need)

    def check_budget(self, need: int):
        if need > self.device_budget:
            raise ConfigError(f"encoding needs {need:,} devices but the array budget "
                              f"is {self.device_budget:,}")


def load_config(path, kind: Optional[str] = None) -> ExperimentConfig:
    text = Path(path).read_text()
    if str(path).endswith(".toml"):
        try:
            d = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    else:
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(d, kind)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _outdir(cfg: ExperimentConfig) -> Optional[Path]:
    if cfg.out is None:
        return None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(_dump(cfg.to_dict()))
    return out


def loglog_slope(k_values, stds) -> float:
    return float(np.polyfit(np.log(np.asarray(k_values, float)), np.log(stds), 1)[0])


# --- scalar multiplication ---------------------------------------------------

def run_scalar_mult(cfg: ExperimentConfig) -> dict:
    """Error statistics of in-memory scalar products versus devices averaged."""
    cfg.validate()
    p = cfg.problem
    errors = {int(k): [] for k in p.k_values}
    for rep in range(p.repeats):
        prng = derive_rng(cfg.seed, "pairs", rep)
        beta = prng.uniform(0, 1, p.pairs)
        gamma = prng.uniform(0, 1, p.pairs)
        model = cfg.noise.replace(seed=derive_seed(cfg.seed, "noise", rep))
        for k in errors:
            rng = derive_rng(model.seed, "scalar", k)
            theta = scalar_multiply_batch(beta, gamma, k, model, rng)
            errors[k].append(theta - beta * gamma)
    ks = sorted(errors)
    err = {k: np.concatenate(errors[k]) for k in ks}
    stds = [float(np.std(err[k], ddof=1)) if err[k].size > 1 else 0.0 for k in ks]
    lim = max(float(np.max(np.abs(e))) for e in err.values())
    edges = np.linspace(-lim, lim, p.histogram_bins + 1) if lim > 0 else np.linspace(-1, 1, 2)
    report = {
        "k_values": ks,
        "pairs": p.pairs,
        "repeats": p.repeats,
        "std": stds,
        "mean": [float(np.mean(err[k])) for k in ks],
        "max_abs_error": [float(np.max(np.abs(err[k]))) for k in ks],
        "slope": loglog_slope(ks, stds) if all(s > 0 for s in stds) and len(ks) > 1 else None,
        "histogram_edges": edges.tolist(),
        "histograms": {str(k): np.histogram(err[k], edges)[0].tolist() for k in ks},
    }
    out = _outdir(cfg)
    if out is not None:
        (out / "summary.json").write_text(_dump(report))
        with open(out / "std_table.csv", "w") as fh:
            fh.write("K,std,mean\n")
            for k, s, m in zip(ks, stds, report["mean"]):
                fh.write(f"{k},{s!r},{m!r}\n")
    return report


# --- model covariance solve --------------------------------------------------

def run_solve_model(cfg: ExperimentConfig) -> dict:
    """Mixed-precision solve of the model covariance system, one trace per repeat."""
    cfg.validate()
    s, p = cfg.solver, cfg.problem
    A = model_covariance(p.n)
    b = generate_rhs(p.n, derive_seed(cfg.seed, "rhs"))
    x_exact = np.linalg.solve(A, b)
    out = _outdir(cfg)

    runs, traces = [], []
    for rep in range(p.repeats):
        model = cfg.noise.replace(seed=derive_seed(cfg.seed, "noise", rep))
        solver = MixedPrecisionSolver(
            A, method=s.inner, m=s.m, K=s.K, band_halfwidth=s.band_halfwidth,
            model=model, analog=s.analog, calibrate=s.calibrate, tol=s.tol,
            max_refinements=s.max_refinements)
        x, trace = solver.solve(b, x_exact=x_exact)
        trace.meta.update(repeat=rep, n=p.n, master_seed=cfg.seed,
                          device_count=0 if solver.encoding is None else solver.encoding.device_count)
        traces.append(trace)
        rec = trace.records[-1]
        runs.append({"repeat": rep, "converged": trace.converged, "diverged": trace.diverged,
                     "refinements": trace.refinements_used, "hp_matvecs": trace.hp_matvecs,
                     "analog_matvecs": trace.analog_matvecs, "final_residual": rec.residual_norm,
                     "final_error": rec.error_norm, "final_error_inf": rec.error_inf})
        if out is not None:
            (out / f"trace_{rep:03d}.csv").write_text(trace.to_csv())
            (out / f"trace_{rep:03d}.json").write_text(_dump(trace.to_dict()))

    summary = {
        "n": p.n,
        "method": traces[0].meta["method"],
        "all_converged": all(r["converged"] for r in runs),
        "median_refinements": float(np.median([r["refinements"] for r in runs])),
        "runs": runs,
    }
    if p.baseline:
        _, it_res = cg_baseline(A, b, s.tol)
        worst = max(r["final_error"] for r in runs)
        _, it_err = cg_baseline(A, b, s.tol, x_exact=x_exact, error_target=worst)
        summary["baseline_cg_iterations_residual"] = it_res
        summary["baseline_cg_iterations_error"] = it_err
    if out is not None:
        (out / "summary.json").write_text(_dump(summary))
    return summary


# --- gene network ------------------------------------------------------------

def _load_groups(path) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        d = json.load(fh)
    # accept {"gene": "group"} or {"group": ["gene", ...]}
    if all(isinstance(v, list) for v in d.values()):
        return {g: grp for grp, genes in d.items() for g in genes}
    return {str(k): str(v) for k, v in d.items()}


def gene_network_from_covariances(covariances: dict, cfg: ExperimentConfig, gene_ids,
                                  groups=None) -> dict:
    """Invert each cohort's covariance in mixed precision and build networks.

    Returns ``{"sigma": ..., "rho": ..., "traces": ..., "networks": ..., "failed": ...}``
    keyed by cohort. The threshold comes from the reference cohort.
    """
    s, p = cfg.solver, cfg.problem
    sigma, rho, traces, failed = {}, {}, {}, {}
    for label, A in covariances.items():
        g = A.shape[0]
        cfg.check_budget(s.K * g * (g - 1) if s.analog else 0)
        model = cfg.noise.replace(seed=derive_seed(cfg.seed, "noise", label))
        method = "gmres" if s.inner == "auto" else s.inner
        solver = MixedPrecisionSolver(A, method=method, m=s.m, K=s.K, model=model,
                                      analog=s.analog, calibrate=s.calibrate, tol=s.tol,
                                      max_refinements=s.max_refinements)
        try:
            sig, tr = inverse_covariance(A, solver, reference=np.linalg.inv(A),
                                         return_traces=True)
        except ConvergenceError as exc:
            failed[label] = exc.columns
            continue
        sigma[label], traces[label] = sig, tr
        rho[label] = partial_correlation(sig)
    networks = {}
    if not failed:
        ref = rho[p.reference_cohort]
        for label, r in rho.items():
            networks[label] = build_interactome(r, ref, groups, p.percentile, gene_ids)
    return {"sigma": sigma, "rho": rho, "traces": traces, "networks": networks,
            "failed": failed}


def run_gene_network(cfg: ExperimentConfig) -> dict:
    """Partial-correlation interactomes of two cohorts from expression data."""
    cfg.validate()
    p = cfg.problem
    X = load_expression_csv(p.expression_csv, p.cohort_column)
    cohorts = {lab: X.cohort(lab) for lab in (p.reference_cohort, p.case_cohort)}
    if p.equalize:
        n = min(c.n_samples for c in cohorts.values())
        cohorts = {lab: c if c.n_samples == n else
                   c.subsample(n, derive_seed(cfg.seed, "subsample", lab))
                   for lab, c in cohorts.items()}
    covs = {lab: sample_covariance(c) for lab, c in cohorts.items()}
    groups = _load_groups(p.groups_json)
    res = gene_network_from_covariances(covs, cfg, X.gene_ids, groups)

    out = _outdir(cfg)
    summary = {
        "genes": X.n_genes,
        "samples": {lab: c.n_samples for lab, c in cohorts.items()},
        "failed_columns": res["failed"],
        "converged": not res["failed"],
    }
    for lab, tr in res["traces"].items():
        summary[f"refinements_{lab}"] = [t.refinements_used for t in tr]
        if out is not None:
            with open(out / f"traces_{lab}.csv", "w") as fh:
                fh.write("column," + tr[0].to_csv().splitlines()[0] + "\n")
                for col, t in enumerate(tr):
                    for line in t.to_csv().splitlines()[1:]:
                        fh.write(f"{col},{line}\n")
    for lab, net in res["networks"].items():
        summary[f"edges_{lab}"] = len(net.edges)
        summary["threshold"] = net.threshold
        if out is not None:
            (out / f"network_{lab}.json").write_text(net.to_json())
            write_matrix_csv(out / f"rho_{lab}.csv", res["rho"][lab], X.gene_ids)
    if out is not None:
        (out / "summary.json").write_text(_dump(summary))
    summary["networks"] = res["networks"]
    return summary
