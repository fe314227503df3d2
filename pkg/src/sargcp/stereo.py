"""Multi-geometry stereo positioning with per-geometry noise estimation.

A candidate point observed from several viewing geometries is located by
weighted nonlinear least squares on its corrected timings. Both residual
types are expressed in meters so the quality thresholds used downstream
apply directly:

* range: slant distance minus c * tau_rg / 2;
* azimuth: along-track projection of the zero-Doppler misclosure,
  v_hat . (X - X_S) evaluated at the observed azimuth time.

Per-geometry azimuth and range variance components are re-estimated from
the weighted residuals (iterated estimation with redundancy from the
hat-matrix complement) until they stabilize, and the reported covariance
is the inverse normal matrix under the final weights.

A three-stage cleaning cascade drops gross outliers (fixed metric gates),
then residuals beyond twice their geometry's estimated component, and
finally rejects the whole candidate when any geometry's azimuth component
stays above 20 cm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import (
    ConvergenceError,
    DegenerateGeometryError,
    GeometryError,
    ValidationError,
)
from .geodesy import SPEED_OF_LIGHT, Ecef, ecef_to_geodetic, enu_basis
from .geometry import AcquisitionGeometry, RadarTiming, geocode

AZIMUTH = "azimuth"
RANGE = "range"

CASCADE_ACCEPTED = "accepted"
CASCADE_REJECTED = "rejected"
CASCADE_UNSOLVABLE = "unsolvable"


@dataclass(frozen=True)
class Observation:
    """One corrected timing of the candidate from one acquisition.

    provenance names the correction sources that produced the timing;
    it must be non-empty so uncorrected timings cannot slip into a solve
    ("zero" is the legitimate entry for explicitly zero corrections).
    """

    acquisition_id: str
    geometry_id: str
    geom: AcquisitionGeometry
    timing: RadarTiming
    provenance: tuple[str, ...] = ("zero",)

    def __post_init__(self):
        if not self.acquisition_id:
            raise ValidationError("acquisition_id must be non-empty")
        if not self.geometry_id:
            raise ValidationError("geometry_id must be non-empty")
        if not self.provenance:
            raise ValidationError(
                f"observation {self.acquisition_id} has no correction provenance")


@dataclass(frozen=True)
class ObservationSet:
    """All usable timings of one candidate, grouped into geometries."""

    observations: tuple[Observation, ...]

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        ids = [o.acquisition_id for o in self.observations]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate acquisition ids in observation set")
        by_geom: dict[str, list[Observation]] = {}
        for o in self.observations:
            by_geom.setdefault(o.geometry_id, []).append(o)
        if len(by_geom) < 2:
            raise ValidationError(
                f"need at least 2 distinct geometries, got {len(by_geom)}")
        for gid, members in by_geom.items():
            headings = {m.geom.heading for m in members}
            if len(headings) != 1:
                raise ValidationError(
                    f"geometry {gid!r} mixes headings {sorted(headings)}")

    def __len__(self) -> int:
        return len(self.observations)

    def geometry_ids(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for o in self.observations:
            seen.setdefault(o.geometry_id)
        return tuple(sorted(seen))

    def by_geometry(self) -> dict[str, tuple[Observation, ...]]:
        out: dict[str, list[Observation]] = {}
        for o in self.observations:
            out.setdefault(o.geometry_id, []).append(o)
        return {g: tuple(v) for g, v in out.items()}

    def without(self, acquisition_ids) -> tuple[Observation, ...]:
        drop = set(acquisition_ids)
        return tuple(o for o in self.observations
                     if o.acquisition_id not in drop)

    def geometry_class(self) -> str:
        heading = {o.geometry_id: o.geom.heading for o in self.observations}
        return classify_headings(heading.values())


def classify_headings(headings) -> str:
    """Configuration class from the per-geometry headings."""
    n_asc = sum(1 for h in headings if h == "ascending")
    n_desc = sum(1 for h in headings if h == "descending")
    return {
        (2, 0): "AA",
        (0, 2): "DD",
        (1, 1): "AD",
        (2, 2): "ADAD",
    }.get((n_asc, n_desc), "other")


@dataclass(frozen=True)
class GeometryComponents:
    """Estimated 1-sigma noise of one geometry's timings, meters."""

    s_az_m: float
    s_rg_m: float


@dataclass(frozen=True)
class Residual:
    """Post-fit misclosures of one observation, meters."""

    az_m: float
    rg_m: float


@dataclass(frozen=True)
class DropRecord:
    """One cleaning decision: what was removed (or rejected), where, why."""

    stage: int
    scope: str  # "observation" | "geometry" | "candidate"
    identifier: str
    reason: str

    def __post_init__(self):
        if self.scope not in ("observation", "geometry", "candidate"):
            raise ValidationError(f"bad drop scope {self.scope!r}")
        if self.stage not in (1, 2, 3):
            raise ValidationError(f"bad cascade stage {self.stage}")


@dataclass(frozen=True)
class StereoSolution:
    """Converged position with stochastic model and per-observation misfits."""

    position: Ecef
    covariance: np.ndarray  # 3x3, m^2, ECEF axes
    components: Mapping[str, GeometryComponents]
    residuals: Mapping[str, Residual]  # keyed by acquisition id
    iterations: int
    vce_rounds: int
    geometry_class: str
    dropped: tuple[DropRecord, ...] = ()

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.shape != (3, 3):
            raise ValidationError(f"covariance must be 3x3, got {cov.shape}")
        scale = float(np.max(np.abs(cov)))
        if scale > 0.0 and float(np.max(np.abs(cov - cov.T))) > 1e-9 * scale:
            raise ValidationError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if float(np.min(np.linalg.eigvalsh(cov))) < -1e-12 * max(scale, 1.0):
            raise ValidationError("covariance is not positive semi-definite")
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "components",
                           MappingProxyType(dict(self.components)))
        object.__setattr__(self, "residuals",
                           MappingProxyType(dict(self.residuals)))


@dataclass(frozen=True)
class QualityReport:
    """Per-axis confidence intervals in the local east/north/height frame."""

    s_e_m: float
    s_n_m: float
    s_h_m: float
    geometry_class: str
    sigma_scale: float  # 1-sigma -> reported confidence multiplier


@dataclass(frozen=True)
class SolverConfig:
    reference_height_m: float = 0.0
    initial_sigma_m: float = 1.0
    coord_tol_m: float = 1e-5
    max_iterations: int = 50
    vce_tol: float = 0.01  # relative variance change between rounds
    max_vce_rounds: int = 50
    sigma_floor_m: float = 1e-6
    max_condition: float = 1e10

    def __post_init__(self):
        if self.initial_sigma_m <= 0.0 or self.sigma_floor_m <= 0.0:
            raise ValidationError("sigmas must be positive")
        if self.coord_tol_m <= 0.0 or self.vce_tol <= 0.0:
            raise ValidationError("tolerances must be positive")


@dataclass(frozen=True)
class CascadeConfig:
    gross_range_m: float = 0.6
    gross_azimuth_m: float = 1.1
    residual_sigma_factor: float = 2.0
    max_s_az_m: float = 0.20
    min_obs_per_geometry: int = 3
    gross_geometry_fraction: float = 0.5  # above this share, drop the geometry


DEFAULT_SOLVER = SolverConfig()
DEFAULT_CASCADE = CascadeConfig()


@dataclass(frozen=True)
class CascadeResult:
    status: str
    observations: ObservationSet | None
    solution: StereoSolution | None
    log: tuple[DropRecord, ...]

    def __post_init__(self):
        if self.status not in (CASCADE_ACCEPTED, CASCADE_REJECTED,
                               CASCADE_UNSOLVABLE):
            raise ValidationError(f"bad cascade status {self.status!r}")


def _linearize(observations, x: np.ndarray):
    """Residuals (m) and design matrix at position estimate x.

    Row 2i is the azimuth equation of observation i, row 2i+1 its range
    equation. The satellite state is taken at the observed azimuth time,
    so both rows vanish exactly when x reproduces the observed timings.
    """
    n = len(observations)
    b = np.empty(2 * n)
    a = np.empty((2 * n, 3))
    for i, ob in enumerate(observations):
        orbit = ob.geom.orbit
        t = ob.timing.t_az
        sat = orbit.position(t)
        vel = orbit.velocity(t)
        d = x - sat
        rho = float(np.linalg.norm(d))
        vhat = vel / np.linalg.norm(vel)
        b[2 * i] = float(vhat @ d)
        a[2 * i] = vhat
        b[2 * i + 1] = rho - 0.5 * SPEED_OF_LIGHT * ob.timing.tau_rg
        a[2 * i + 1] = d / rho
    return b, a


def _row_weights(observations, sigma2: dict) -> np.ndarray:
    w = np.empty(2 * len(observations))
    for i, ob in enumerate(observations):
        w[2 * i] = 1.0 / sigma2[ob.geometry_id, AZIMUTH]
        w[2 * i + 1] = 1.0 / sigma2[ob.geometry_id, RANGE]
    return w


def _adjust(observations, x: np.ndarray, sigma2: dict, config: SolverConfig):
    """Gauss-Newton to convergence under fixed weights.

    The degeneracy gate conditions on the unweighted normal matrix:
    geometric diversity is a property of the viewing directions alone,
    and large legitimate weight ratios (floored azimuth variance against
    meter-scale range variance) must not trip it.
    """
    w = _row_weights(observations, sigma2)
    for it in range(1, config.max_iterations + 1):
        b, a = _linearize(observations, x)
        cond = float(np.linalg.cond(a.T @ a))
        if not cond < config.max_condition:
            raise DegenerateGeometryError(
                f"normal matrix condition {cond:.3g} exceeds "
                f"{config.max_condition:.3g}; viewing directions too similar")
        normal = a.T @ (w[:, None] * a)
        delta = np.linalg.solve(normal, -(a.T @ (w * b)))
        x = x + delta
        if float(np.linalg.norm(delta)) < config.coord_tol_m:
            b, a = _linearize(observations, x)
            normal = a.T @ (w[:, None] * a)
            return x, b, a, normal, w, it
    raise ConvergenceError(
        f"position update still above {config.coord_tol_m} m after "
        f"{config.max_iterations} iterations")


def _estimate_components(observations, b, a, normal, w, sigma2: dict,
                         config: SolverConfig) -> dict:
    """Variance per (geometry, type) group from weighted residuals.

    Redundancy of a group is its row count minus the summed leverages
    h_j = w_j a_j^T N^-1 a_j, which is what keeps the estimate unbiased
    for small groups.
    """
    ninv = np.linalg.inv(normal)
    leverage = np.einsum("ij,jk,ik->i", a, ninv, a) * w
    floor = config.sigma_floor_m ** 2
    out = {}
    for key in sigma2:
        gid, kind = key
        offset = 0 if kind == AZIMUTH else 1
        idx = [2 * i + offset for i, ob in enumerate(observations)
               if ob.geometry_id == gid]
        redundancy = len(idx) - float(leverage[idx].sum())
        if redundancy < 0.1:
            raise ConvergenceError(
                f"geometry {gid!r} {kind} redundancy {redundancy:.3g} too "
                "small to estimate a variance component")
        out[key] = max(float((b[idx] ** 2).sum()) / redundancy, floor)
    return out


def _initial_position(obs: ObservationSet, config: SolverConfig) -> np.ndarray:
    guesses = []
    first_error: GeometryError | None = None
    for gid, members in sorted(obs.by_geometry().items()):
        t_az = float(np.mean([m.timing.t_az for m in members]))
        tau = float(np.mean([m.timing.tau_rg for m in members]))
        try:
            p = geocode(members[0].geom, RadarTiming(t_az, tau),
                        config.reference_height_m)
        except GeometryError as exc:
            first_error = first_error or exc
            continue
        guesses.append(p.as_array())
        if len(guesses) == 1:
            return guesses[0]
    if not guesses:
        raise DegenerateGeometryError(
            f"no geometry yields an initial position: {first_error}")
    return np.mean(guesses, axis=0)


def solve(obs: ObservationSet, initial: Ecef | None = None,
          config: SolverConfig = DEFAULT_SOLVER) -> StereoSolution:
    """Estimate the candidate position and its stochastic model.

    Starts from `initial` or from geocoding the first geometry's mean
    timing at the configured reference height. Alternates least squares
    with variance re-estimation until the components move less than
    `vce_tol`, then runs one final adjustment under the converged
    components so the covariance, residuals, and weights agree.
    """
    observations = obs.observations
    x = initial.as_array() if initial is not None \
        else _initial_position(obs, config)
    sigma2 = {(gid, kind): config.initial_sigma_m ** 2
              for gid in obs.geometry_ids() for kind in (AZIMUTH, RANGE)}
    total_iters = 0
    for round_no in range(1, config.max_vce_rounds + 1):
        x, b, a, normal, w, iters = _adjust(observations, x, sigma2, config)
        total_iters += iters
        new_sigma2 = _estimate_components(observations, b, a, normal, w,
                                          sigma2, config)
        change = max(abs(new_sigma2[k] / sigma2[k] - 1.0) for k in sigma2)
        sigma2 = new_sigma2
        if change < config.vce_tol:
            break
    else:
        raise ConvergenceError(
            f"variance components still changing more than {config.vce_tol:%} "
            f"after {config.max_vce_rounds} rounds")
    x, b, a, normal, w, iters = _adjust(observations, x, sigma2, config)
    total_iters += iters

    covariance = np.linalg.inv(normal)
    components = {gid: GeometryComponents(
        s_az_m=math.sqrt(sigma2[gid, AZIMUTH]),
        s_rg_m=math.sqrt(sigma2[gid, RANGE]))
        for gid in obs.geometry_ids()}
    residuals = {ob.acquisition_id: Residual(float(b[2 * i]), float(b[2 * i + 1]))
                 for i, ob in enumerate(observations)}
    return StereoSolution(
        position=Ecef.from_array(x),
        covariance=covariance,
        components=components,
        residuals=residuals,
        iterations=total_iters,
        vce_rounds=round_no,
        geometry_class=obs.geometry_class(),
    )


def _enforce_geometry_floor(survivors, log, stage: int,
                            cascade: CascadeConfig):
    """Drop geometries left with too few observations for re-estimation."""
    counts: dict[str, int] = {}
    for ob in survivors:
        counts[ob.geometry_id] = counts.get(ob.geometry_id, 0) + 1
    starved = {g for g, n in counts.items() if n < cascade.min_obs_per_geometry}
    for gid in sorted(starved):
        log.append(DropRecord(
            stage, "geometry", gid,
            f"{counts[gid]} observations left, need "
            f"{cascade.min_obs_per_geometry}"))
    return tuple(ob for ob in survivors if ob.geometry_id not in starved)


def outlier_cascade(obs: ObservationSet,
                    config: SolverConfig = DEFAULT_SOLVER,
                    cascade: CascadeConfig = DEFAULT_CASCADE) -> CascadeResult:
    """Three-stage cleaning of one candidate's observations.

    Stage 1 removes gross misfits against fixed metric gates, taking a
    whole geometry out when most of its observations are gross. Stage 2
    re-solves and removes residuals beyond twice their geometry's
    estimated components. Stage 3 re-solves and rejects the candidate if
    any geometry's azimuth component is still above the configured cap.
    Rejection and running out of geometries are reported as outcomes,
    not raised.
    """
    log: list[DropRecord] = []

    def finish_unsolvable() -> CascadeResult:
        return CascadeResult(CASCADE_UNSOLVABLE, None, None, tuple(log))

    def resolve(survivors):
        current = ObservationSet(survivors)
        return current, solve(current, config=config)

    current, sol = obs, solve(obs, config=config)

    # stage 1: fixed gates, with the majority rule per geometry
    gross = {aid for aid, r in sol.residuals.items()
             if abs(r.rg_m) > cascade.gross_range_m
             or abs(r.az_m) > cascade.gross_azimuth_m}
    survivors = list(current.observations)
    if gross:
        by_geom = current.by_geometry()
        doomed_geoms = set()
        for gid, members in sorted(by_geom.items()):
            hit = [m for m in members if m.acquisition_id in gross]
            if len(hit) > cascade.gross_geometry_fraction * len(members):
                doomed_geoms.add(gid)
                log.append(DropRecord(
                    1, "geometry", gid,
                    f"{len(hit)} of {len(members)} observations gross"))
            else:
                for m in hit:
                    r = sol.residuals[m.acquisition_id]
                    log.append(DropRecord(
                        1, "observation", m.acquisition_id,
                        f"residual az {r.az_m:.3f} m rg {r.rg_m:.3f} m "
                        f"exceeds gates {cascade.gross_azimuth_m}/"
                        f"{cascade.gross_range_m} m"))
        survivors = [ob for ob in survivors
                     if ob.geometry_id not in doomed_geoms
                     and ob.acquisition_id not in gross]
    survivors = _enforce_geometry_floor(survivors, log, 1, cascade)
    if len({ob.geometry_id for ob in survivors}) < 2:
        return finish_unsolvable()
    if len(survivors) != len(current.observations):
        current, sol = resolve(survivors)

    # stage 2: component-scaled gates from the re-solved model
    flagged = set()
    for aid, r in sol.residuals.items():
        gid = next(ob.geometry_id for ob in current.observations
                   if ob.acquisition_id == aid)
        comp = sol.components[gid]
        k = cascade.residual_sigma_factor
        if abs(r.az_m) > k * comp.s_az_m or abs(r.rg_m) > k * comp.s_rg_m:
            flagged.add(aid)
            log.append(DropRecord(
                2, "observation", aid,
                f"residual az {r.az_m:.4f} m rg {r.rg_m:.4f} m exceeds "
                f"{k} x (s_az {comp.s_az_m:.4f} m, s_rg {comp.s_rg_m:.4f} m)"))
    survivors = _enforce_geometry_floor(current.without(flagged), log, 2,
                                        cascade)
    if len({ob.geometry_id for ob in survivors}) < 2:
        return finish_unsolvable()
    if len(survivors) != len(current.observations):
        current, sol = resolve(survivors)

    # stage 3: candidate-level gate on the azimuth components
    noisy = sorted(gid for gid, comp in sol.components.items()
                   if comp.s_az_m > cascade.max_s_az_m)
    status = CASCADE_ACCEPTED
    if noisy:
        status = CASCADE_REJECTED
        for gid in noisy:
            log.append(DropRecord(
                3, "candidate", gid,
                f"s_az {sol.components[gid].s_az_m:.4f} m exceeds "
                f"{cascade.max_s_az_m} m"))
    sol = replace(sol, dropped=tuple(log))
    return CascadeResult(status, current, sol, tuple(log))


def report_quality(sol: StereoSolution, origin: Ecef,
                   sigma_scale: float = 1.96) -> QualityReport:
    """Rotate the covariance into east/north/height at `origin` and scale.

    The per-axis scale factor converts marginal 1-sigma values to the
    reported confidence level (1.96 for 95% on each axis separately) and
    is recorded in the report so consumers know the convention.
    """
    rot = enu_basis(origin)
    cov_enu = rot @ sol.covariance @ rot.T
    sig = np.sqrt(np.clip(np.diag(cov_enu), 0.0, None))
    return QualityReport(
        s_e_m=sigma_scale * float(sig[0]),
        s_n_m=sigma_scale * float(sig[1]),
        s_h_m=sigma_scale * float(sig[2]),
        geometry_class=sol.geometry_class,
        sigma_scale=sigma_scale,
    )
