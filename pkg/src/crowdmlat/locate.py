"""Hyperbolic (TDoA) localization over opportunistically paired sensors.

Each tracked sensor pair receiving a transmission contributes one equation

    (t_i - t_j) = (|s_i - p| / c - |s_j - p| / c) - delta_{i,j}

with the pair offset delta_{i,j} supplied by the synchronization tracker
and the position p unknown. With at least three independent equations the
3D position is estimable. The solver is a weighted Gauss-Newton iteration
with Levenberg damping engaged whenever a step would increase the weighted
residual norm; equations are weighted by the inverse of their predicted
offset variance plus the ToA measurement variance of the two sensors.

Nothing is ever fabricated: a record that cannot be localized (too few
equations, rank-deficient geometry, divergence) yields a no-prediction
with a reason code instead of a position.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, TextIO

import numpy as np

from .dataset import SensorTable, TransmissionRecord
from .errors import NoGuessError, ParseError, ScoringError, SingularityError
from .geo import (
    SPEED_OF_LIGHT_MPS,
    EcefPosition,
    GeoPosition,
    ecef_distance,
    ecef_to_geodetic,
    geodetic_to_ecef,
)
from .sync import TRACKING, PairGraph

C = SPEED_OF_LIGHT_MPS

CONVERGED = "converged"
DIVERGED = "diverged"
UNDERDETERMINED = "underdetermined"
INFEASIBLE = "infeasible"
NO_GUESS = "no-guess"

PREDICTION_COLUMNS = [
    "id",
    "latitude",
    "longitude",
    "geoAltitude",
    "nEquations",
    "rank",
    "residualRmsNs",
    "status",
]


@dataclass(frozen=True)
class LocateConfig:
    max_iter: int = 50
    step_tol_m: float = 0.1
    residual_ceiling_s: float = 5e-6
    # Hyperbola feasibility slack on |TDoA| <= baseline / c.
    feasibility_slack_s: float = 5e-6
    rank_rel_threshold: float = 1e-10
    min_equations: int = 3
    # Offset predictions older than this are not used.
    max_offset_age_s: float = 300.0
    # Freshness bound for reusing the previous per-aircraft estimate.
    guess_max_age_s: float = 10.0
    # ToA noise priors; the override, when set, replaces the class values.
    toa_sigma_gps_ns: float = 50.0
    toa_sigma_default_ns: float = 500.0
    toa_sigma_override_ns: float | None = None
    # Optional barometric-altitude constraint for vertically weak geometry.
    baro_constraint: bool = False
    baro_offset_m: float = 0.0
    baro_sigma_m: float = 100.0
    vertical_dop_threshold: float = 50.0
    # Physical altitude window for emitted positions. TDoA hyperboloids
    # generically intersect in two points; with near-coplanar ground
    # sensors the spurious branch sits below the network, so a converged
    # but unphysical solution triggers one retry from a raised guess.
    min_altitude_m: float = -1000.0
    max_altitude_m: float = 30000.0
    retry_altitude_m: float = 10000.0


@dataclass(frozen=True)
class PairEquation:
    """One pair's TDoA equation for one record. sensor_i < sensor_j."""

    sensor_i: int
    sensor_j: int
    tdoa_measured_s: float  # t_i - t_j
    offset_s: float  # predicted delta_{i,j}
    offset_variance_s2: float
    toa_variance_s2: float
    s_i: EcefPosition
    s_j: EcefPosition

    @property
    def weight(self) -> float:
        return 1.0 / (self.offset_variance_s2 + self.toa_variance_s2)


@dataclass
class LocalizationResult:
    position_ecef: EcefPosition
    position_geo: GeoPosition
    iterations: int
    final_residual_rms_s: float
    n_equations_used: int
    rank: int
    covariance_estimate: np.ndarray | None
    status: str
    cost_history: tuple[float, ...] = ()

    @property
    def predicted_error_m(self) -> float | None:
        """sqrt(trace) of the position covariance, in meters."""
        if self.covariance_estimate is None:
            return None
        return float(math.sqrt(max(np.trace(self.covariance_estimate), 0.0)))


@dataclass(frozen=True)
class Prediction:
    """Per-record localization outcome: a result or a reason code."""

    record_id: int
    result: LocalizationResult | None
    reason: str | None
    n_equations: int

    @property
    def predicted(self) -> bool:
        return self.result is not None


def residual(eq: PairEquation, p: EcefPosition) -> float:
    """Signed equation residual at p, in seconds; zero on the hyperboloid."""
    di = ecef_distance(eq.s_i, p)
    dj = ecef_distance(eq.s_j, p)
    return (di - dj) / C - eq.offset_s - eq.tdoa_measured_s


def jacobian_row(eq: PairEquation, p: EcefPosition) -> np.ndarray:
    """Gradient of the residual w.r.t. p: (u_i - u_j) / c, |row| <= 2/c."""
    pv = np.array(p.as_tuple())
    si = np.array(eq.s_i.as_tuple())
    sj = np.array(eq.s_j.as_tuple())
    di = np.linalg.norm(pv - si)
    dj = np.linalg.norm(pv - sj)
    if di < 1e-9 or dj < 1e-9:
        raise SingularityError("position coincides with a sensor")
    return ((pv - si) / di - (pv - sj) / dj) / C


def assemble_equations(
    record: TransmissionRecord,
    graph: PairGraph,
    sensors: SensorTable,
    cfg: LocateConfig | None = None,
    diagnostics: dict | None = None,
) -> list[PairEquation]:
    """Equations for every measurement pair with a usable tracked offset.

    Pairs are dropped (with a diagnostics count, if a dict is supplied)
    when untracked, when the offset prediction would extrapolate beyond
    max_offset_age_s, or when the offset-corrected TDoA violates hyperbola
    feasibility |TDoA| <= baseline/c + slack (a wildly wrong clock).
    """
    cfg = cfg or LocateConfig()
    counts = {"untracked": 0, "stale": 0, "infeasible": 0, "no_position": 0}
    measurements = sorted(record.measurements, key=lambda m: m.sensor_id)
    equations: list[PairEquation] = []
    for a in range(len(measurements)):
        mi = measurements[a]
        si = sensors.ecef(mi.sensor_id)
        for b in range(a + 1, len(measurements)):
            mj = measurements[b]
            sj = sensors.ecef(mj.sensor_id)
            if si is None or sj is None:
                counts["no_position"] += 1
                continue
            tracker = graph.tracker(mi.sensor_id, mj.sensor_id)
            if tracker is None or tracker.status != TRACKING:
                counts["untracked"] += 1
                continue
            if tracker.extrapolation_age_s(mi.toa_ns) > cfg.max_offset_age_s:
                counts["stale"] += 1
                continue
            offset_ns, offset_var_ns2 = tracker.predict(mi.toa_ns)
            tdoa_s = (mi.toa_ns - mj.toa_ns) * 1e-9
            offset_s = offset_ns * 1e-9
            baseline_s = ecef_distance(si, sj) / C
            if abs(tdoa_s + offset_s) > baseline_s + cfg.feasibility_slack_s:
                counts["infeasible"] += 1
                continue
            equations.append(
                PairEquation(
                    sensor_i=mi.sensor_id,
                    sensor_j=mj.sensor_id,
                    tdoa_measured_s=tdoa_s,
                    offset_s=offset_s,
                    offset_variance_s2=offset_var_ns2 * 1e-18,
                    toa_variance_s2=_pair_toa_variance_s2(
                        sensors, mi.sensor_id, mj.sensor_id, cfg
                    ),
                    s_i=si,
                    s_j=sj,
                )
            )
    if diagnostics is not None:
        diagnostics.update(counts)
    return equations


def _pair_toa_variance_s2(
    sensors: SensorTable, i: int, j: int, cfg: LocateConfig
) -> float:
    var = 0.0
    for sid in (i, j):
        if cfg.toa_sigma_override_ns is not None:
            sigma_ns = cfg.toa_sigma_override_ns
        elif sensors.good(sid) is True:
            sigma_ns = cfg.toa_sigma_gps_ns
        else:
            sigma_ns = cfg.toa_sigma_default_ns
        var += (sigma_ns * 1e-9) ** 2
    return var


def initial_guess(
    record: TransmissionRecord,
    sensors: SensorTable,
    previous: tuple[int, EcefPosition] | None = None,
    cfg: LocateConfig | None = None,
) -> EcefPosition:
    """Starting point for the iterative solve.

    A fresh previous estimate for the same aircraft is reused verbatim;
    otherwise the RSSI-weighted centroid of the receiving sensors
    (weights 10^(rssi/20)), with the altitude clamped to >= 0 so the
    centroid cannot start below the ellipsoid.
    """
    cfg = cfg or LocateConfig()
    if previous is not None:
        prev_us, prev_pos = previous
        if abs(record.server_time_us - prev_us) * 1e-6 <= cfg.guess_max_age_s:
            return prev_pos
    total = 0.0
    acc = np.zeros(3)
    for m in record.measurements:
        ecef = sensors.ecef(m.sensor_id)
        if ecef is None:
            continue
        w = 10.0 ** (m.rssi_db / 20.0)
        acc += w * np.array(ecef.as_tuple())
        total += w
    if total <= 0.0:
        raise NoGuessError(f"record {record.record_id}: no sensor positions known")
    centroid = EcefPosition(*(acc / total))
    geo = ecef_to_geodetic(centroid)
    if geo.altitude_m < 0.0:
        centroid = geodetic_to_ecef(
            GeoPosition(geo.latitude_deg, geo.longitude_deg, 0.0)
        )
    return centroid


def solve_position(
    eqs: list[PairEquation],
    guess: EcefPosition,
    cfg: LocateConfig | None = None,
    alt_constraint: tuple[float, float] | None = None,
) -> LocalizationResult:
    """Weighted Gauss-Newton solve of the stacked pair equations.

    Levenberg damping (lambda on the normal-equation diagonal) engages when
    a step would increase the weighted residual norm, so the cost is
    non-increasing across accepted iterations. Terminates when the step
    norm drops below step_tol_m or max_iter is reached; the result is
    underdetermined if the weighted Jacobian rank at the solution is < 3,
    and diverged on non-finite arithmetic or a residual RMS above the
    ceiling. alt_constraint, when given, appends one pseudo-equation
    pinning the geodetic altitude to (target_m, sigma_m).
    """
    cfg = cfg or LocateConfig()
    if not eqs:
        raise ValueError("solve_position requires at least one equation")
    n = len(eqs)
    si = np.array([eq.s_i.as_tuple() for eq in eqs])
    sj = np.array([eq.s_j.as_tuple() for eq in eqs])
    rhs = np.array([eq.tdoa_measured_s + eq.offset_s for eq in eqs])
    weights = np.array([eq.weight for eq in eqs])

    def residuals_and_jacobian(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        di = np.linalg.norm(si - x, axis=1)
        dj = np.linalg.norm(sj - x, axis=1)
        r = (di - dj) / C - rhs
        with np.errstate(divide="ignore", invalid="ignore"):
            j = ((x - si) / di[:, None] - (x - sj) / dj[:, None]) / C
        if alt_constraint is not None:
            target_m, sigma_m = alt_constraint
            geo = ecef_to_geodetic(EcefPosition(*x))
            up = _up_vector(geo)
            r = np.append(r, (geo.altitude_m - target_m) / C)
            j = np.vstack([j, up / C])
        return r, j

    w_full = weights
    if alt_constraint is not None:
        w_full = np.append(weights, 1.0 / (alt_constraint[1] / C) ** 2)

    def cost(r: np.ndarray) -> float:
        return float(np.sum(w_full * r * r))

    x = np.array(guess.as_tuple(), dtype=float)
    r, j = residuals_and_jacobian(x)
    current_cost = cost(r)
    history = [current_cost]
    status = None
    iterations = 0
    lam = 0.0

    if not np.isfinite(current_cost):
        status = DIVERGED
    else:
        for _ in range(cfg.max_iter):
            iterations += 1
            g = j.T @ (w_full * r)
            normal = j.T @ (w_full[:, None] * j)
            accepted = False
            for _attempt in range(30):
                if lam > 0.0:
                    damped = normal + lam * np.diag(np.diag(normal))
                else:
                    damped = normal
                try:
                    delta = np.linalg.solve(damped, -g)
                except np.linalg.LinAlgError:
                    delta = np.linalg.lstsq(damped, -g, rcond=None)[0]
                x_try = x + delta
                r_try, j_try = residuals_and_jacobian(x_try)
                cost_try = cost(r_try)
                if np.isfinite(cost_try) and cost_try <= current_cost:
                    x, r, j = x_try, r_try, j_try
                    current_cost = cost_try
                    history.append(current_cost)
                    lam = lam * 0.1 if lam > 1e-12 else 0.0
                    accepted = True
                    break
                lam = lam * 10.0 if lam > 0.0 else 1e-4
                if lam > 1e12:
                    break
            if not accepted:
                # Damping exhausted: no direction decreases the cost.
                break
            if float(np.linalg.norm(delta)) < cfg.step_tol_m:
                break

    if not np.all(np.isfinite(x)) or not np.isfinite(current_cost):
        status = DIVERGED
        x = np.array(guess.as_tuple(), dtype=float)
        r, j = residuals_and_jacobian(x)

    rms = float(np.sqrt(np.mean(r[:n] ** 2))) if np.all(np.isfinite(r[:n])) else math.inf
    weighted_j = np.sqrt(w_full)[:, None] * j
    try:
        singular_values = np.linalg.svd(weighted_j, compute_uv=False)
        rank = int(
            np.sum(singular_values > cfg.rank_rel_threshold * singular_values[0])
        )
    except np.linalg.LinAlgError:
        rank = 0

    covariance = None
    normal = weighted_j.T @ weighted_j
    if rank >= 3 and np.all(np.isfinite(normal)):
        try:
            covariance = np.linalg.inv(normal)
        except np.linalg.LinAlgError:
            covariance = np.linalg.pinv(normal)

    if status is None:
        if rank < 3:
            status = UNDERDETERMINED
        elif rms > cfg.residual_ceiling_s:
            status = DIVERGED
        else:
            status = CONVERGED

    ecef = EcefPosition(*x)
    try:
        geo = ecef_to_geodetic(ecef)
    except Exception:
        geo = GeoPosition(0.0, 0.0, 0.0)
        status = DIVERGED
    return LocalizationResult(
        position_ecef=ecef,
        position_geo=geo,
        iterations=iterations,
        final_residual_rms_s=rms,
        n_equations_used=n,
        rank=rank,
        covariance_estimate=covariance,
        status=status,
        cost_history=tuple(history),
    )


def _up_vector(geo: GeoPosition) -> np.ndarray:
    lat = math.radians(geo.latitude_deg)
    lon = math.radians(geo.longitude_deg)
    return np.array(
        [
            math.cos(lat) * math.cos(lon),
            math.cos(lat) * math.sin(lon),
            math.sin(lat),
        ]
    )


def vertical_dilution(result: LocalizationResult) -> float | None:
    """Ratio of vertical std to the best horizontal std (geometry quality)."""
    if result.covariance_estimate is None:
        return None
    up = _up_vector(result.position_geo)
    cov = result.covariance_estimate
    vertical_var = float(up @ cov @ up)
    horizontal_var = max(float(np.trace(cov)) - vertical_var, 0.0)
    if horizontal_var <= 0.0:
        return math.inf
    return math.sqrt(vertical_var / (horizontal_var / 2.0))


def _physical(result: LocalizationResult, cfg: LocateConfig) -> bool:
    return cfg.min_altitude_m <= result.position_geo.altitude_m <= cfg.max_altitude_m


def _raise_guess(guess: EcefPosition, cfg: LocateConfig) -> EcefPosition:
    geo = ecef_to_geodetic(guess)
    return geodetic_to_ecef(
        GeoPosition(geo.latitude_deg, geo.longitude_deg, cfg.retry_altitude_m)
    )


def localize_record(
    record: TransmissionRecord,
    graph: PairGraph,
    sensors: SensorTable,
    cfg: LocateConfig | None = None,
    previous: tuple[int, EcefPosition] | None = None,
) -> Prediction:
    """Assemble, guess and solve for one record; never raises on bad data."""
    cfg = cfg or LocateConfig()
    diagnostics: dict = {}
    eqs = assemble_equations(record, graph, sensors, cfg, diagnostics)
    if len(eqs) < cfg.min_equations:
        reason = INFEASIBLE if diagnostics.get("infeasible") else UNDERDETERMINED
        return Prediction(record.record_id, None, reason, len(eqs))
    try:
        guess = initial_guess(record, sensors, previous, cfg)
    except NoGuessError:
        return Prediction(record.record_id, None, NO_GUESS, len(eqs))
    result = solve_position(eqs, guess, cfg)
    if result.status == CONVERGED and not _physical(result, cfg):
        retry = solve_position(eqs, _raise_guess(guess, cfg), cfg)
        if retry.status == CONVERGED and _physical(retry, cfg):
            result = retry
        else:
            # Both intersection branches lie outside the physical altitude
            # window: do not emit a fabricated position.
            result.status = DIVERGED
    if (
        result.status == CONVERGED
        and cfg.baro_constraint
        and record.baro_altitude_m is not None
    ):
        vdop = vertical_dilution(result)
        if vdop is not None and vdop > cfg.vertical_dop_threshold:
            constrained = solve_position(
                eqs,
                result.position_ecef,
                cfg,
                alt_constraint=(
                    record.baro_altitude_m + cfg.baro_offset_m,
                    cfg.baro_sigma_m,
                ),
            )
            if constrained.status == CONVERGED and _physical(constrained, cfg):
                result = constrained
    if result.status != CONVERGED:
        return Prediction(record.record_id, None, result.status, len(eqs))
    return Prediction(record.record_id, result, None, len(eqs))


def localize_stream(
    records: Iterable[TransmissionRecord],
    graph: PairGraph,
    sensors: SensorTable,
    cfg: LocateConfig | None = None,
) -> Iterator[Prediction]:
    """Localize a time-ordered record stream.

    Maintains the per-aircraft last-estimate cache that feeds
    initial_guess; only converged solutions enter the cache.
    """
    cfg = cfg or LocateConfig()
    last_estimate: dict[int, tuple[int, EcefPosition]] = {}
    for record in records:
        prediction = localize_record(
            record, graph, sensors, cfg, last_estimate.get(record.aircraft_id)
        )
        if prediction.result is not None:
            last_estimate[record.aircraft_id] = (
                record.server_time_us,
                prediction.result.position_ecef,
            )
        yield prediction


# ---------------------------------------------------------------------------
# Prediction file I/O


def write_predictions(predictions: Iterable[Prediction], stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(PREDICTION_COLUMNS)
    for p in predictions:
        if p.result is not None:
            geo = p.result.position_geo
            w.writerow(
                [
                    p.record_id,
                    repr(geo.latitude_deg),
                    repr(geo.longitude_deg),
                    repr(geo.altitude_m),
                    p.n_equations,
                    p.result.rank,
                    repr(p.result.final_residual_rms_s * 1e9),
                    p.result.status,
                ]
            )
        else:
            w.writerow([p.record_id, "", "", "", p.n_equations, "", "", p.reason])


@dataclass(frozen=True)
class PredictionRow:
    record_id: int
    position: GeoPosition | None
    status: str


def parse_predictions(stream: TextIO) -> list[PredictionRow]:
    reader = csv.reader(stream)
    header = None
    rows: list[PredictionRow] = []
    seen: set[int] = set()
    for row in reader:
        if not row or row[0].startswith("#"):
            continue
        if header is None:
            header = row
            if header != PREDICTION_COLUMNS:
                raise ParseError(f"unexpected predictions header {header!r}")
            continue
        record_id = int(row[0])
        if record_id in seen:
            raise ScoringError(f"duplicate prediction for record {record_id}")
        seen.add(record_id)
        if row[1] and row[2] and row[3]:
            pos = GeoPosition(float(row[1]), float(row[2]), float(row[3]))
        else:
            pos = None
        rows.append(PredictionRow(record_id, pos, row[7]))
    return rows
