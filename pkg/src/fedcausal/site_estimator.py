"""Site-level estimates of the target-population mean potential outcomes.

The target site uses a standard AIPW estimator on its own covariates. Each
source site transports its information through three pieces: density-ratio
weighting of its AIPW residuals, a projection of its outcome-model predictions
onto the covariates shared with the target, and the mean of that projection
over the target sample. The source side produces a :class:`SourceSiteReport`
(the wire payload: own-unit terms plus projection coefficients); evaluating
the projection on target units happens at the target, so no individual target
rows are ever needed at a source.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .density_ratio import BasisSpec, TiltCoefficients, ratio_weights, truncate_weights
from .errors import PositivityWarning
from .nuisance import NuisanceFit, predict_outcome, predict_propensity
from .numkit import add_intercept, fit_ols


@dataclass(frozen=True)
class SiteFrame:
    """One site's individual-level data.

    ``shared_cols`` indexes the columns of ``X`` observed at the target site;
    a target frame's ``X`` holds only those shared columns (in the same order
    the sources use).
    """

    site_id: str
    role: str  # target | source
    y: np.ndarray
    a: np.ndarray
    X: np.ndarray
    shared_cols: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "a", np.asarray(self.a))
        object.__setattr__(self, "X", np.atleast_2d(np.asarray(self.X, dtype=float)))
        if self.role not in ("target", "source"):
            raise ValueError(f"bad role {self.role!r}")
        n = len(self.y)
        if len(self.a) != n or self.X.shape[0] != n or n < 1:
            raise ValueError("y, a, X must share a positive length")
        if not self.shared_cols:
            raise ValueError("shared_cols must be non-empty")
        if self.role == "target" and tuple(self.shared_cols) != tuple(range(self.X.shape[1])):
            raise ValueError("a target frame's X must hold exactly the shared columns")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def V(self) -> np.ndarray:
        return self.X[:, list(self.shared_cols)]


@dataclass(frozen=True)
class TauModel:
    """Linear projection of outcome-model predictions onto (1, V)."""

    arm: int
    coefficients: np.ndarray

    def predict(self, V: np.ndarray) -> np.ndarray:
        return add_intercept(V) @ self.coefficients


@dataclass(frozen=True)
class SiteEstimate:
    """Per-arm mean estimates with per-unit influence parts.

    ``xi_own`` holds centered per-unit values on this site's own units (shape
    (2, n_k), arm-indexed); for a source estimate ``xi_on_target`` holds the
    centered projection values on target units (shape (2, n_T); empty for a
    target estimate). Values are stored without the site-probability scaling;
    see :func:`influence_values`.
    """

    site_id: str
    mu: tuple[float, float]  # (mu_0, mu_1)
    xi_own: np.ndarray
    xi_on_target: np.ndarray
    n_k: int
    n_T: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def is_target(self) -> bool:
        return self.xi_on_target.shape[1] == 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "site_id": self.site_id,
                "mu0": self.mu[0],
                "mu1": self.mu[1],
                "n_k": self.n_k,
                "n_T": self.n_T,
                "xi_own": [list(map(float, row)) for row in self.xi_own],
                "xi_on_target": [list(map(float, row)) for row in self.xi_on_target],
                "diagnostics": self.diagnostics,
            }
        )

    @staticmethod
    def from_json(payload: str) -> "SiteEstimate":
        obj = json.loads(payload)
        xi_on_target = np.asarray(obj["xi_on_target"], dtype=float)
        if xi_on_target.size == 0:
            xi_on_target = np.zeros((2, 0))
        return SiteEstimate(
            site_id=obj["site_id"],
            mu=(float(obj["mu0"]), float(obj["mu1"])),
            xi_own=np.asarray(obj["xi_own"], dtype=float),
            xi_on_target=xi_on_target,
            n_k=int(obj["n_k"]),
            n_T=int(obj["n_T"]),
            diagnostics=obj.get("diagnostics", {}),
        )


@dataclass(frozen=True)
class SourceSiteReport:
    """Summary-level payload a source uploads to the coordinator.

    Carries the source-sample terms of the transported estimator (their mean
    and centered per-unit values) plus the per-arm projection coefficients;
    the coordinator evaluates the projection on the target sample to complete
    the estimate.
    """

    site_id: str
    n_k: int
    mu_own: tuple[float, float]
    xi_own: np.ndarray
    tau_coefficients: tuple[np.ndarray, np.ndarray]  # arm 0, arm 1
    tilt_sensitivity: tuple[np.ndarray, np.ndarray] = (
        np.zeros(0),
        np.zeros(0),
    )  # B^{-1} dmu/dgamma per arm, for the tilt-noise variance term
    basis_kind: str = "linear"
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "site_id": self.site_id,
                "n_k": self.n_k,
                "mu_own0": self.mu_own[0],
                "mu_own1": self.mu_own[1],
                "xi_own": [list(map(float, row)) for row in self.xi_own],
                "tau0": list(map(float, self.tau_coefficients[0])),
                "tau1": list(map(float, self.tau_coefficients[1])),
                "tilt_sens0": list(map(float, self.tilt_sensitivity[0])),
                "tilt_sens1": list(map(float, self.tilt_sensitivity[1])),
                "basis_kind": self.basis_kind,
                "diagnostics": self.diagnostics,
            }
        )

    @staticmethod
    def from_json(payload: str) -> "SourceSiteReport":
        obj = json.loads(payload)
        return SourceSiteReport(
            site_id=obj["site_id"],
            n_k=int(obj["n_k"]),
            mu_own=(float(obj["mu_own0"]), float(obj["mu_own1"])),
            xi_own=np.asarray(obj["xi_own"], dtype=float),
            tau_coefficients=(
                np.asarray(obj["tau0"], dtype=float),
                np.asarray(obj["tau1"], dtype=float),
            ),
            tilt_sensitivity=(
                np.asarray(obj.get("tilt_sens0", []), dtype=float),
                np.asarray(obj.get("tilt_sens1", []), dtype=float),
            ),
            basis_kind=obj.get("basis_kind", "linear"),
            diagnostics=obj.get("diagnostics", {}),
        )


def _aipw_kernel(frame: SiteFrame, fit: NuisanceFit, arm: int) -> np.ndarray:
    """Per-unit AIPW kernel I(A=a)/pi_a * (Y - m_a) + m_a on the frame's units."""
    pi = predict_propensity(fit, frame.X, arm)
    m = predict_outcome(fit, frame.X, arm)
    ind = (frame.a == arm).astype(float)
    return ind / pi * (frame.y - m) + m


def _clipping_active(fit: NuisanceFit, X: np.ndarray) -> bool:
    p1 = fit.pi.predict_probability(X)
    lo, hi = fit.clip
    return bool(np.any(p1 < lo) or np.any(p1 > hi) or np.any(1.0 - p1 < lo) or np.any(1.0 - p1 > hi))


def estimate_target(frame: SiteFrame, fit: NuisanceFit) -> SiteEstimate:
    """Standard AIPW estimate on the target sample with centered influence values."""
    if frame.role != "target":
        raise ValueError("estimate_target requires a target frame")
    if _clipping_active(fit, frame.X):
        warnings.warn("propensity clipping active on target units", PositivityWarning, stacklevel=2)
    mu = []
    xi = np.zeros((2, frame.n))
    for arm in (0, 1):
        kernel = _aipw_kernel(frame, fit, arm)
        mu_a = float(kernel.mean())
        mu.append(mu_a)
        xi[arm] = kernel - mu_a
    return SiteEstimate(
        site_id=frame.site_id,
        mu=(mu[0], mu[1]),
        xi_own=xi,
        xi_on_target=np.zeros((2, 0)),
        n_k=frame.n,
        n_T=frame.n,
    )


def fit_tau(frame: SiteFrame, fit: NuisanceFit, arm: int) -> TauModel:
    """Regress the outcome-model predictions on (1, V) over all source units."""
    if frame.role != "source":
        raise ValueError("fit_tau requires a source frame")
    m_hat = predict_outcome(fit, frame.X, arm)
    ols = fit_ols(add_intercept(frame.V), m_hat)
    return TauModel(arm=arm, coefficients=ols.coefficients)


def source_report(
    source: SiteFrame, fit: NuisanceFit, tilt: TiltCoefficients
) -> SourceSiteReport:
    """Source-side portion of the transported estimator.

    Computes the tilt-weighted AIPW residual term and the tilt-weighted excess
    of the outcome model over its shared-covariate projection, both means over
    the source sample, plus the projection coefficients per arm. The per-unit
    influence values include the first-order term from estimating the tilt
    coefficients: with the moment-matching Jacobian B and the estimator's
    sensitivity A = dmu/dgamma, each unit contributes through A'B^{-1} times
    its centered moment-equation value. The same sensitivity vector is
    reported so the coordinator can add the matching target-sample term.
    """
    if source.role != "source":
        raise ValueError("source_report requires a source frame")
    zeta_raw = ratio_weights(tilt, source.V)
    zeta, weight_diag = truncate_weights(zeta_raw)
    if _clipping_active(fit, source.X):
        warnings.warn(
            f"propensity clipping active on source {source.site_id}",
            PositivityWarning,
            stacklevel=2,
        )
    psi = tilt.basis.expand(source.V)
    zeta_psi = psi * zeta_raw[:, None]
    B = zeta_psi.T @ psi / source.n
    moment_noise = zeta_psi - zeta_psi.mean(axis=0)
    mu_own = []
    xi_own = np.zeros((2, source.n))
    tau_coefs = []
    sens = []
    for arm in (0, 1):
        pi = predict_propensity(fit, source.X, arm)
        m = predict_outcome(fit, source.X, arm)
        tau = fit_tau(source, fit, arm)
        tau_coefs.append(tau.coefficients)
        ind = (source.a == arm).astype(float)
        h = ind / pi * (source.y - m) + (m - tau.predict(source.V))
        own = zeta * h
        mu_own.append(float(own.mean()))
        # Derivative of the truncated weight is zero where the cap binds.
        zeta_d = np.where(zeta == zeta_raw, zeta, 0.0)
        A = -(psi * (zeta_d * h)[:, None]).mean(axis=0)
        try:
            w = np.linalg.solve(B, A)
        except np.linalg.LinAlgError:
            w = np.zeros(psi.shape[1])
        xi_own[arm] = own - own.mean() + moment_noise @ w
        sens.append(w)
    return SourceSiteReport(
        site_id=source.site_id,
        n_k=source.n,
        mu_own=(mu_own[0], mu_own[1]),
        xi_own=xi_own,
        tau_coefficients=(tau_coefs[0], tau_coefs[1]),
        tilt_sensitivity=(sens[0], sens[1]),
        basis_kind=tilt.basis.kind,
        diagnostics={"zeta": weight_diag},
    )


def complete_source_estimate(report: SourceSiteReport, target: SiteFrame) -> SiteEstimate:
    """Target-side completion: add the projection mean over target units.

    Also adds the target half of the tilt-noise influence term: the target
    basis means feed the moment-matching equation, so their sampling noise
    propagates into the source estimate through the reported sensitivity.
    """
    if target.role != "target":
        raise ValueError("completion requires the target frame")
    psi_tgt = BasisSpec(report.basis_kind).expand(target.X)
    psi_centered = psi_tgt - psi_tgt.mean(axis=0)
    mu = []
    xi_tgt = np.zeros((2, target.n))
    for arm in (0, 1):
        tau = TauModel(arm=arm, coefficients=report.tau_coefficients[arm])
        on_target = tau.predict(target.X)
        mu.append(report.mu_own[arm] + float(on_target.mean()))
        xi_tgt[arm] = on_target - on_target.mean()
        w = report.tilt_sensitivity[arm]
        if w.size:
            xi_tgt[arm] -= psi_centered @ w
    return SiteEstimate(
        site_id=report.site_id,
        mu=(mu[0], mu[1]),
        xi_own=report.xi_own,
        xi_on_target=xi_tgt,
        n_k=report.n_k,
        n_T=target.n,
        diagnostics=report.diagnostics,
    )


def estimate_source(
    source: SiteFrame,
    target: SiteFrame,
    fit: NuisanceFit,
    tilt: TiltCoefficients,
) -> SiteEstimate:
    """Transported estimate from one source site (report + completion)."""
    return complete_source_estimate(source_report(source, fit, tilt), target)


def influence_values(
    est: SiteEstimate, total_n: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Influence values with site probabilities replaced by empirical plug-ins.

    Own-unit values are scaled by ``total_n / n_k`` and target-unit values by
    ``total_n / n_T``. When ``total_n`` is omitted the estimate's own sample
    sizes are used (``n_T`` for a target estimate, ``n_k + n_T`` for a source
    estimate); in a federation the caller passes the pooled total.
    """
    if total_n is None:
        total_n = est.n_T if est.is_target else est.n_k + est.n_T
    own = est.xi_own * (total_n / est.n_k)
    on_target = est.xi_on_target * (total_n / est.n_T)
    return own, on_target
