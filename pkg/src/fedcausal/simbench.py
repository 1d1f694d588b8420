"""Monte Carlo benchmark: multi-site data generation and method comparison.

Sites draw skew-normal covariates, with outcome and treatment models that are
linear either in the raw covariates or in their nonlinear transform, so that
an analyst modeling the raw covariates is correct at some sites and wrong at
others. Each replication generates all sites, runs every requested method
through the federated runtime, and records the effect estimate and confidence
interval. Replications are pure functions of (seed, replication index), so
results are identical for any worker-thread count.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .density_ratio import BasisSpec
from .errors import FedcausalError, ScenarioError
from .federation import DEFAULT_LAMBDA_GRID
from .fedruntime import ProtocolConfig, run_round
from .nuisance import CandidateSpec, FeatureMap, kang_schafer
from .numkit import expit
from .site_estimator import SiteFrame

BENCH_METHODS = ("target", "ss", "ivw", "aipw_l1", "mr_l1")
_RUNTIME_METHOD = {
    "target": "target_only",
    "ss": "ss",
    "ivw": "ivw",
    "aipw_l1": "aipw_l1",
    "mr_l1": "mr_l1",
}

OUTCOME_INTERCEPT = 210.0
OUTCOME_COEF = np.array([27.4, 13.7, 13.7, 13.7])
TREATMENT_COEF = np.array([-1.0, 0.5, -0.25, -0.1])
# Under covariate mismatch the target's models involve only the two covariates
# it observes.
MISMATCH_TARGET_OUTCOME_COEF = np.array([27.4, 13.7, 0.0, 0.0])
MISMATCH_TARGET_TREATMENT_COEF = np.array([-1.0, 0.5, 0.0, 0.0])

FAILURE_FRACTION_LIMIT = 0.01


@dataclass(frozen=True)
class SiteSpec:
    """Design of one simulated site."""

    id: str
    role: str  # target | source
    n: int
    skew: tuple[float, float, float, float]
    dgp: str  # x: models linear in raw covariates | z: linear in the transform


@dataclass(frozen=True)
class ScenarioSpec:
    """A full multi-site design plus the covariate-mismatch switch."""

    name: str
    sites: tuple[SiteSpec, ...]
    mismatch: bool = False
    true_delta: float = 0.0

    def __post_init__(self):
        targets = [s for s in self.sites if s.role == "target"]
        if len(targets) != 1:
            raise ScenarioError(f"scenario needs exactly one target, got {len(targets)}")
        ids = [s.id for s in self.sites]
        if len(set(ids)) != len(ids):
            raise ScenarioError("site ids must be unique")
        for s in self.sites:
            if s.role not in ("target", "source"):
                raise ScenarioError(f"bad role {s.role!r} for site {s.id}")
            if s.n < 10:
                raise ScenarioError(f"site {s.id} sample size {s.n} below 10")
            if len(s.skew) != 4:
                raise ScenarioError(f"site {s.id} needs 4 skew parameters")
            if s.dgp not in ("x", "z"):
                raise ScenarioError(f"site {s.id} dgp must be 'x' or 'z'")
        if self.mismatch and any(s.dgp == "z" for s in self.sites):
            raise ScenarioError("the mismatch design uses dgp 'x' at every site")

    @property
    def target(self) -> SiteSpec:
        return next(s for s in self.sites if s.role == "target")

    @property
    def shared_cols(self) -> tuple[int, ...]:
        return (0, 1) if self.mismatch else (0, 1, 2, 3)

    @staticmethod
    def from_dict(obj: dict) -> "ScenarioSpec":
        try:
            sites = tuple(
                SiteSpec(
                    id=str(s["id"]),
                    role=str(s["role"]),
                    n=int(s["n"]),
                    skew=tuple(float(v) for v in s["skew"]),
                    dgp=str(s["dgp"]),
                )
                for s in obj["sites"]
            )
            return ScenarioSpec(
                name=str(obj["name"]),
                sites=sites,
                mismatch=bool(obj.get("mismatch", False)),
                true_delta=float(obj.get("true_delta", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"malformed scenario: {exc}") from exc


def load_scenario(name_or_path: str) -> ScenarioSpec:
    """Load a bundled preset by name or a scenario JSON file by path."""
    preset = resources.files("fedcausal").joinpath("presets", f"{name_or_path}.json")
    if preset.is_file():
        text = preset.read_text(encoding="utf-8")
    elif os.path.isfile(name_or_path):
        with open(name_or_path, encoding="utf-8") as fh:
            text = fh.read()
    else:
        raise ScenarioError(f"no preset or file named {name_or_path!r}")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario JSON is invalid: {exc}") from exc
    return ScenarioSpec.from_dict(obj)


def list_presets() -> list[str]:
    folder = resources.files("fedcausal").joinpath("presets")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def sample_skew_normal(rng: np.random.Generator, n: int, shape: np.ndarray) -> np.ndarray:
    """Draw n rows of independent skew-normal(0, 1, shape_p) covariates.

    Uses the half-normal representation X = delta |U0| + sqrt(1 - delta^2) U1
    with delta = shape / sqrt(1 + shape^2).
    """
    shape = np.asarray(shape, dtype=float)
    delta = shape / np.sqrt(1.0 + shape**2)
    u0 = np.abs(rng.standard_normal((n, len(shape))))
    u1 = rng.standard_normal((n, len(shape)))
    return delta * u0 + np.sqrt(1.0 - delta**2) * u1


def generate_site(site: SiteSpec, scenario: ScenarioSpec, rng: np.random.Generator) -> SiteFrame:
    """Generate one site's frame; the true treatment effect is zero.

    Sites with dgp "z" build their outcome and treatment models on the
    standardized nonlinear transform of the covariates. Standardization keeps
    the logistic index on the same scale as the raw-covariate sites (the raw
    transform has columns near 400, which would drive every treatment
    probability to zero); a linear model in the untransformed columns still
    spans the generating model exactly.
    """
    X = sample_skew_normal(rng, site.n, np.asarray(site.skew))

    beta, alpha_coef = OUTCOME_COEF, TREATMENT_COEF
    if scenario.mismatch and site.role == "target":
        beta, alpha_coef = MISMATCH_TARGET_OUTCOME_COEF, MISMATCH_TARGET_TREATMENT_COEF
        features = X
    elif site.dgp == "x":
        features = X
    else:
        Z = kang_schafer(X)
        features = (Z - Z.mean(axis=0)) / Z.std(axis=0)

    p_treat = expit(features @ alpha_coef)
    a = (rng.random(site.n) < p_treat).astype(int)
    eps = rng.standard_normal(site.n)
    y = OUTCOME_INTERCEPT + features @ beta + eps

    shared = scenario.shared_cols
    X_obs = X[:, list(shared)] if site.role == "target" else X
    frame_shared = tuple(range(len(shared))) if site.role == "target" else shared
    return SiteFrame(
        site_id=site.id,
        role=site.role,
        y=y,
        a=a,
        X=X_obs,
        shared_cols=frame_shared,
    )


def _candidate_group(ids_and_maps: list[tuple[str, FeatureMap]], target: str) -> list[CandidateSpec]:
    return [CandidateSpec(id=i, target=target, feature_map=m) for i, m in ids_and_maps]


def method_config(
    method: str,
    scenario: ScenarioSpec,
    alpha: float = 0.05,
    lambda_grid=DEFAULT_LAMBDA_GRID,
    n_splits: int = 5,
    seed: int = 0,
) -> ProtocolConfig:
    """Candidate-model and runtime configuration for one benchmark method.

    The single-candidate methods model the raw covariates everywhere (the
    shared subset at sources under mismatch); the multiply-robust method adds
    a transformed-covariate candidate at every site (under mismatch, the
    sources' second candidate is the shared subset instead).
    """
    if method not in BENCH_METHODS:
        raise ScenarioError(f"unknown method {method!r}; choose from {BENCH_METHODS}")
    raw = FeatureMap("raw")
    if scenario.mismatch:
        sub = FeatureMap("subset", scenario.shared_cols)
        if method == "mr_l1":
            src_maps = [("x", raw), ("x-sub", sub)]
        else:
            src_maps = [("x-sub", sub)]
        tgt_maps = [("x", raw)]
    else:
        if method == "mr_l1":
            src_maps = [("x", raw), ("ks", kang_schafer_map())]
        else:
            src_maps = [("x", raw)]
        tgt_maps = src_maps
    candidates = {
        "default": {
            "treatment": _candidate_group(src_maps, "treatment"),
            "outcome": _candidate_group(src_maps, "outcome"),
        },
        scenario.target.id: {
            "treatment": _candidate_group(tgt_maps, "treatment"),
            "outcome": _candidate_group(tgt_maps, "outcome"),
        },
    }
    return ProtocolConfig(
        basis=BasisSpec("linear"),
        candidates=candidates,
        method=_RUNTIME_METHOD[method],
        alpha=alpha,
        lambda_grid=tuple(lambda_grid),
        n_splits=n_splits,
        seed=seed,
    )


def kang_schafer_map() -> FeatureMap:
    return FeatureMap("kangschafer")


@dataclass(frozen=True)
class ReplicationRow:
    method: str
    rep: int
    delta_hat: float
    se: float
    ci_low: float
    ci_high: float
    covered: int
    length: float


@dataclass(frozen=True)
class MetricsRow:
    method: str
    reps: int
    mae: float
    rmse: float
    coverage: float
    mean_length: float
    failures: int


@dataclass
class SimulationResult:
    scenario: str
    methods: tuple[str, ...]
    reps: int
    seed: int
    true_delta: float
    rows: list[ReplicationRow] = field(default_factory=list)
    failures: dict = field(default_factory=dict)  # method -> count

    def metrics(self) -> list[MetricsRow]:
        out = []
        for method in self.methods:
            rows = [r for r in self.rows if r.method == method]
            err = np.array([r.delta_hat - self.true_delta for r in rows])
            out.append(
                MetricsRow(
                    method=method,
                    reps=len(rows),
                    mae=float(np.mean(np.abs(err))),
                    rmse=float(np.sqrt(np.mean(err**2))),
                    coverage=float(np.mean([r.covered for r in rows])),
                    mean_length=float(np.mean([r.length for r in rows])),
                    failures=int(self.failures.get(method, 0)),
                )
            )
        return out

    def write_metrics_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "reps", "mae", "rmse", "coverage", "mean_length", "failures"])
            for m in self.metrics():
                w.writerow(
                    [m.method, m.reps, repr(m.mae), repr(m.rmse), repr(m.coverage),
                     repr(m.mean_length), m.failures]
                )

    def write_replications_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "rep", "delta_hat", "se", "ci_low", "ci_high", "covered", "length"])
            for r in sorted(self.rows, key=lambda r: (r.method, r.rep)):
                w.writerow(
                    [r.method, r.rep, repr(r.delta_hat), repr(r.se), repr(r.ci_low),
                     repr(r.ci_high), r.covered, repr(r.length)]
                )


def _rep_config_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence((seed, rep)).generate_state(1)[0] % (2**31))


def run_replication(
    scenario: ScenarioSpec,
    methods,
    seed: int,
    rep: int,
    alpha: float = 0.05,
    lambda_grid=DEFAULT_LAMBDA_GRID,
    n_splits: int = 5,
) -> tuple[list[ReplicationRow], dict]:
    """One replication: generate all sites, run each method, score coverage."""
    frames = [
        generate_site(
            site,
            scenario,
            np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, rep, idx)))),
        )
        for idx, site in enumerate(scenario.sites)
    ]
    cfg_seed = _rep_config_seed(seed, rep)
    rows: list[ReplicationRow] = []
    failed: dict[str, str] = {}
    for method in methods:
        config = method_config(
            method, scenario, alpha=alpha, lambda_grid=lambda_grid,
            n_splits=n_splits, seed=cfg_seed,
        )
        try:
            report = run_round(frames, config)
        except FedcausalError as exc:
            failed[method] = f"{type(exc).__name__}: {exc}"
            continue
        lo, hi = report.ci
        rows.append(
            ReplicationRow(
                method=method,
                rep=rep,
                delta_hat=report.delta_hat,
                se=math.sqrt(report.variance),
                ci_low=lo,
                ci_high=hi,
                covered=int(lo <= scenario.true_delta <= hi),
                length=hi - lo,
            )
        )
    return rows, failed


def thread_count() -> int:
    """Worker threads for the replication loop (FEDCAUSAL_THREADS, default 1)."""
    raw = os.environ.get("FEDCAUSAL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ScenarioError(f"FEDCAUSAL_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def run_scenario(
    scenario: ScenarioSpec,
    methods=BENCH_METHODS,
    reps: int = 500,
    seed: int = 0,
    alpha: float = 0.05,
    lambda_grid=DEFAULT_LAMBDA_GRID,
    n_splits: int = 5,
) -> SimulationResult:
    """Run the full Monte Carlo study.

    Aborts with :class:`ScenarioError` if more than 1 percent of replications
    fail for any method. Replication rows are aggregated in replication order
    regardless of the thread count.
    """
    methods = tuple(methods)
    for m in methods:
        if m not in BENCH_METHODS:
            raise ScenarioError(f"unknown method {m!r}")
    if reps < 1:
        raise ScenarioError("reps must be positive")

    def worker(rep: int):
        return run_replication(
            scenario, methods, seed, rep, alpha=alpha,
            lambda_grid=lambda_grid, n_splits=n_splits,
        )

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        n_threads = thread_count()
        if n_threads == 1:
            outcomes = [worker(rep) for rep in range(reps)]
        else:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                outcomes = list(pool.map(worker, range(reps)))

    result = SimulationResult(
        scenario=scenario.name,
        methods=methods,
        reps=reps,
        seed=seed,
        true_delta=scenario.true_delta,
    )
    for rows, failed in outcomes:
        result.rows.extend(rows)
        for method, reason in failed.items():
            result.failures[method] = result.failures.get(method, 0) + 1
    for method, count in result.failures.items():
        if count / reps > FAILURE_FRACTION_LIMIT:
            raise ScenarioError(
                f"method {method} failed in {count}/{reps} replications "
                f"(limit {FAILURE_FRACTION_LIMIT:.0%})"
            )
    return result
