"""Single-round simulated federation over in-memory site frames.

The target site acts as coordinator. One round consists of a configuration
broadcast, a moment-summary broadcast from the target, one summary-level
upload per source, and the target's own estimate, after which the coordinator
forms the global combination. Every cross-site payload is serialized to JSON
at the boundary and decoded on the receiving side, and every message is logged
so the ledger can be audited: only the declared summary-level schemas may
cross sites, never individual rows.
"""

from __future__ import annotations

import hashlib
import json
import warnings
import zlib
from dataclasses import dataclass, field

from .density_ratio import BasisSpec, MomentSummary, solve_tilt, target_moments
from .errors import (
    AllSourcesFailedWarning,
    FedcausalError,
    MissingTarget,
    PrivacyViolation,
)
from .federation import (
    DEFAULT_LAMBDA_GRID,
    GlobalReport,
    adaptive_ensemble,
    combine_fixed,
    global_estimate,
)
from .nuisance import DEFAULT_CLIP, CandidateSpec, fit_nuisances
from .site_estimator import (
    SiteFrame,
    SourceSiteReport,
    complete_source_estimate,
    estimate_target,
    source_report,
)

METHODS = ("target_only", "ss", "ivw", "aipw_l1", "mr_l1")
ADAPTIVE_METHODS = ("aipw_l1", "mr_l1")
MESSAGE_KINDS = ("config", "moment_summary", "site_estimate")

# Payload keys each message kind may carry; anything else is a violation.
_ALLOWED_KEYS = {
    "config": {
        "basis", "method", "alpha", "lambda_grid", "n_splits", "seed",
        "train_fraction", "clip", "kappa", "candidates",
    },
    "moment_summary": {"site_id", "n", "basis", "mean_basis"},
    "site_estimate": {
        # source upload
        "site_id", "n_k", "mu_own0", "mu_own1", "xi_own", "tau0", "tau1",
        "tilt_sens0", "tilt_sens1", "basis_kind", "diagnostics",
        # target's own estimate
        "mu0", "mu1", "n_T", "xi_on_target",
    },
}


@dataclass(frozen=True)
class MessageRecord:
    """One logged cross-site message with its serialized payload."""

    from_site: str
    to_site: str
    kind: str
    round: int
    payload_text: str = field(repr=False)

    @property
    def payload_bytes(self) -> int:
        return len(self.payload_text.encode("utf-8"))

    @property
    def payload_digest(self) -> str:
        return hashlib.sha256(self.payload_text.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {
            "from_site": self.from_site,
            "to_site": self.to_site,
            "kind": self.kind,
            "round": self.round,
            "bytes": self.payload_bytes,
            "digest": self.payload_digest,
        }


@dataclass(frozen=True)
class ProtocolConfig:
    """Round configuration broadcast by the coordinator.

    ``candidates`` maps site id to its treatment and outcome candidate model
    specs; sites absent from the map fall back to the ``"default"`` entry.
    """

    basis: BasisSpec
    candidates: dict
    method: str = "mr_l1"
    alpha: float = 0.05
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    n_splits: int = 5
    seed: int = 0
    train_fraction: float = 0.5
    clip: tuple[float, float] = DEFAULT_CLIP
    kappa: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    def specs_for(self, site_id: str) -> dict:
        if site_id in self.candidates:
            return self.candidates[site_id]
        if "default" in self.candidates:
            return self.candidates["default"]
        raise ValueError(f"no candidate specs for site {site_id!r}")

    def to_dict(self) -> dict:
        return {
            "basis": self.basis.kind,
            "method": self.method,
            "alpha": self.alpha,
            "lambda_grid": list(self.lambda_grid),
            "n_splits": self.n_splits,
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "clip": list(self.clip),
            "kappa": self.kappa,
            "candidates": {
                site: {
                    role: [spec.to_dict() for spec in specs]
                    for role, specs in groups.items()
                }
                for site, groups in self.candidates.items()
            },
        }

    @staticmethod
    def from_dict(obj: dict) -> "ProtocolConfig":
        return ProtocolConfig(
            basis=BasisSpec(kind=obj["basis"]),
            candidates={
                site: {
                    role: [CandidateSpec.from_dict(d) for d in specs]
                    for role, specs in groups.items()
                }
                for site, groups in obj["candidates"].items()
            },
            method=obj["method"],
            alpha=float(obj["alpha"]),
            lambda_grid=tuple(obj["lambda_grid"]),
            n_splits=int(obj["n_splits"]),
            seed=int(obj["seed"]),
            train_fraction=float(obj["train_fraction"]),
            clip=tuple(obj["clip"]),
            kappa=obj.get("kappa"),
        )


def site_split_seed(seed: int, site_id: str) -> int:
    """Deterministic per-site seed for the train/validation split."""
    return (int(seed) * 1_000_003 + zlib.crc32(site_id.encode("utf-8"))) % (2**31)


def _source_node(
    frame: SiteFrame, summary: MomentSummary, config: ProtocolConfig
) -> SourceSiteReport:
    """Everything a source computes locally from its data and the summary."""
    tilt = solve_tilt(frame.V, summary, config.basis)
    specs = config.specs_for(frame.site_id)
    fit = fit_nuisances(
        frame.X,
        frame.y,
        frame.a,
        specs["treatment"],
        specs["outcome"],
        fraction=config.train_fraction,
        seed=site_split_seed(config.seed, frame.site_id),
        kappa=config.kappa,
        clip=config.clip,
    )
    return source_report(frame, fit, tilt)


def run_round(frames: list[SiteFrame], config: ProtocolConfig) -> GlobalReport:
    """Execute one federated round and return the coordinator's report.

    Sources that raise a model-fitting or transport error are excluded from
    the combination (logged in the report diagnostics); if every source fails
    the round degrades to the target-only estimate with a warning.
    """
    targets = [f for f in frames if f.role == "target"]
    if len(targets) != 1:
        raise MissingTarget(f"expected exactly one target frame, got {len(targets)}")
    target = targets[0]
    sources = [f for f in frames if f.role == "source"]
    coordinator = target.site_id

    ledger: list[MessageRecord] = []
    if sources:
        ledger.append(
            MessageRecord(
                from_site=coordinator,
                to_site="*",
                kind="config",
                round=0,
                payload_text=json.dumps(config.to_dict()),
            )
        )

    summary_text = target_moments(target.V, config.basis, target.site_id).to_json()
    failures: dict[str, str] = {}
    estimates = []

    for src in sources:
        ledger.append(
            MessageRecord(
                from_site=coordinator,
                to_site=src.site_id,
                kind="moment_summary",
                round=0,
                payload_text=summary_text,
            )
        )
        summary = MomentSummary.from_json(summary_text)
        try:
            report = _source_node(src, summary, config)
        except FedcausalError as exc:
            failures[src.site_id] = f"{type(exc).__name__}: {exc}"
            continue
        report_text = report.to_json()
        ledger.append(
            MessageRecord(
                from_site=src.site_id,
                to_site=coordinator,
                kind="site_estimate",
                round=0,
                payload_text=report_text,
            )
        )
        estimates.append(
            complete_source_estimate(SourceSiteReport.from_json(report_text), target)
        )

    tgt_specs = config.specs_for(target.site_id)
    tgt_fit = fit_nuisances(
        target.X,
        target.y,
        target.a,
        tgt_specs["treatment"],
        tgt_specs["outcome"],
        fraction=config.train_fraction,
        seed=site_split_seed(config.seed, target.site_id),
        kappa=config.kappa,
        clip=config.clip,
    )
    tgt_est = estimate_target(target, tgt_fit)
    if sources:
        ledger.append(
            MessageRecord(
                from_site=coordinator,
                to_site=coordinator,
                kind="site_estimate",
                round=0,
                payload_text=tgt_est.to_json(),
            )
        )
    estimates = [tgt_est] + estimates

    method = config.method
    if sources and len(estimates) == 1:
        warnings.warn(
            "all source sites failed; falling back to the target-only estimate",
            AllSourcesFailedWarning,
            stacklevel=2,
        )
        method = "target_only"
    if len(estimates) == 1:
        solution = combine_fixed(estimates, "target_only")
    elif method in ADAPTIVE_METHODS:
        solution = adaptive_ensemble(
            estimates, grid=config.lambda_grid, n_splits=config.n_splits, seed=config.seed
        )
    else:
        solution = combine_fixed(estimates, method)

    result = global_estimate(estimates, solution, alpha=config.alpha, method=config.method)
    result.privacy_ledger = ledger
    result.diagnostics = {
        "n_sites": len(frames),
        "n_sources": len(sources),
        "n_sources_used": len(estimates) - 1,
        "failed_sources": failures,
        "effective_method": method,
    }
    return result


def audit_ledger(report: GlobalReport) -> dict:
    """Validate every logged message against the declared payload schemas.

    Raises :class:`PrivacyViolation` on an unknown message kind, an
    undeclared payload key, or a digest/size mismatch; otherwise returns a
    census of message counts and byte totals per kind.
    """
    by_kind: dict[str, dict] = {}
    for rec in report.privacy_ledger:
        if rec.kind not in MESSAGE_KINDS:
            raise PrivacyViolation(f"unknown message kind {rec.kind!r}")
        raw = rec.payload_text.encode("utf-8")
        if hashlib.sha256(raw).hexdigest() != rec.payload_digest:
            raise PrivacyViolation(f"payload digest mismatch on a {rec.kind} message")
        try:
            payload = json.loads(rec.payload_text)
        except json.JSONDecodeError as exc:
            raise PrivacyViolation(f"non-JSON payload on a {rec.kind} message") from exc
        if not isinstance(payload, dict):
            raise PrivacyViolation(f"payload of a {rec.kind} message is not an object")
        extra = set(payload) - _ALLOWED_KEYS[rec.kind]
        if extra:
            raise PrivacyViolation(
                f"undeclared keys {sorted(extra)} in a {rec.kind} message"
            )
        bucket = by_kind.setdefault(rec.kind, {"count": 0, "bytes": 0})
        bucket["count"] += 1
        bucket["bytes"] += rec.payload_bytes
    return {
        "n_messages": len(report.privacy_ledger),
        "by_kind": by_kind,
    }


def dump_ledger(records: list[MessageRecord], path) -> None:
    """Write one JSON object per message to ``path`` (JSONL)."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")
