"""Synthetic world generator: the exact oracle behind the test suite.

Builds small worlds of receivers with modeled clocks and aircraft flying
piecewise-linear (in ECEF) paths while emitting at a fixed rate. For each
emission, every sensor within line-of-sight range records an arrival time

    reading = t_emit + distance / c     (true arrival)
              + offset0 + drift * t     (deterministic clock error)
              + N(0, jitter_sigma)      (timestamp noise)
              + outliers                (broken measurements)

quantized to the sensor's sampling resolution. The generator keeps the
exact emission positions and clock states, so downstream estimates can be
checked against closed-form truth rather than against the code under test.

Transmitter clock error is not modeled: it is absorbed into the emission
time and cancels in all time differences.

Determinism: every random draw comes from a per-aircraft substream keyed
by (rng_seed, aircraft_id), so identical seeds give bit-identical worlds
and jitter draws stay paired when only the outlier rate changes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TextIO

import numpy as np

from .dataset import (
    AircraftInfo,
    Measurement,
    SensorInfo,
    TransmissionRecord,
    write_aircraft,
    write_sensors,
    write_transmissions,
)
from .errors import UnknownScenarioError
from .geo import (
    SPEED_OF_LIGHT_MPS,
    EcefPosition,
    GeoPosition,
    ecef_to_geodetic,
    geodetic_to_ecef,
)


@dataclass(frozen=True)
class ClockModel:
    """Receiver clock error model; see the module docstring for the terms."""

    offset0_ns: float = 0.0
    drift_ns_per_s: float = 0.0
    jitter_sigma_ns: float = 0.0
    resolution_ns: float = 1e-6
    outlier_rate: float = 0.0
    outlier_magnitude_ns: float = 0.0

    def __post_init__(self):
        if self.jitter_sigma_ns < 0:
            raise ValueError("jitter_sigma_ns must be >= 0")
        if self.resolution_ns <= 0:
            raise ValueError("resolution_ns must be > 0")
        if not (0.0 <= self.outlier_rate < 1.0):
            raise ValueError("outlier_rate must be in [0, 1)")

    def offset_at_ns(self, t_ns: float) -> float:
        """Deterministic clock error at true time t (ns since start)."""
        return self.offset0_ns + self.drift_ns_per_s * t_ns * 1e-9


@dataclass(frozen=True)
class Trajectory:
    """One aircraft: waypoints (t_s, position) joined linearly in ECEF."""

    aircraft_id: int
    waypoints: tuple[tuple[float, GeoPosition], ...]
    emission_hz: float = 2.0
    good: bool | None = True

    def __post_init__(self):
        times = [t for t, _ in self.waypoints]
        if len(times) < 2 or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("waypoints need strictly increasing times, >= 2 points")


@dataclass(frozen=True)
class Scenario:
    name: str
    sensors: tuple[tuple[SensorInfo, ClockModel], ...]
    trajectories: tuple[Trajectory, ...]
    rng_seed: int
    max_range_m: float


@dataclass(frozen=True)
class TruthEntry:
    record_id: int
    aircraft_id: int
    t_emit_ns: float
    position: GeoPosition


@dataclass
class GeneratedWorld:
    scenario: Scenario
    records: list[TransmissionRecord]
    truth_log: dict[int, TruthEntry]
    clock_log: dict[int, ClockModel]
    n_dropped_single: int

    def sensors(self) -> list[SensorInfo]:
        return [info for info, _ in self.scenario.sensors]

    def aircraft(self) -> list[AircraftInfo]:
        return [
            AircraftInfo(t.aircraft_id, t.good)
            for t in sorted(self.scenario.trajectories, key=lambda t: t.aircraft_id)
        ]

    def true_pair_offset_ns(self, sensor_i: int, sensor_j: int, t_ns: float) -> float:
        """Exact pair offset delta_{i,j} implied by the clock models."""
        ci = self.clock_log[sensor_i]
        cj = self.clock_log[sensor_j]
        return cj.offset_at_ns(t_ns) - ci.offset_at_ns(t_ns)


def _interp_ecef(waypoints: list[tuple[float, np.ndarray]], t_s: float) -> np.ndarray:
    if t_s <= waypoints[0][0]:
        return waypoints[0][1]
    for (t0, p0), (t1, p1) in zip(waypoints, waypoints[1:]):
        if t_s <= t1:
            f = (t_s - t0) / (t1 - t0)
            return p0 + f * (p1 - p0)
    return waypoints[-1][1]


def generate(scenario: Scenario) -> GeneratedWorld:
    """Synthesize the measurement stream plus exact truth and clock logs."""
    sensor_entries = sorted(scenario.sensors, key=lambda sc: sc[0].sensor_id)
    sensor_ecef = [
        (info, clock, np.array(geodetic_to_ecef(info.position).as_tuple()))
        for info, clock in sensor_entries
    ]
    emissions: list[tuple[float, int, GeoPosition, list[Measurement]]] = []
    n_dropped = 0
    for traj in sorted(scenario.trajectories, key=lambda t: t.aircraft_id):
        jitter_rng = np.random.default_rng([scenario.rng_seed, traj.aircraft_id, 1])
        outlier_rng = np.random.default_rng([scenario.rng_seed, traj.aircraft_id, 2])
        waypoints = [
            (t, np.array(geodetic_to_ecef(g).as_tuple())) for t, g in traj.waypoints
        ]
        t_start, t_end = waypoints[0][0], waypoints[-1][0]
        n_emissions = int(math.floor((t_end - t_start) * traj.emission_hz)) + 1
        for k in range(n_emissions):
            t_emit_s = t_start + k / traj.emission_hz
            p = _interp_ecef(waypoints, t_emit_s)
            p_geo = ecef_to_geodetic(EcefPosition(*p))
            measurements: list[Measurement] = []
            for info, clock, s_ecef in sensor_ecef:
                d = float(np.linalg.norm(s_ecef - p))
                if d > scenario.max_range_m:
                    continue
                t_arr_s = t_emit_s + d / SPEED_OF_LIGHT_MPS
                reading_ns = t_arr_s * 1e9 + clock.offset0_ns + clock.drift_ns_per_s * t_arr_s
                if clock.jitter_sigma_ns > 0.0:
                    reading_ns += clock.jitter_sigma_ns * jitter_rng.standard_normal()
                if clock.outlier_rate > 0.0:
                    if outlier_rng.random() < clock.outlier_rate:
                        sign = 1.0 if outlier_rng.random() < 0.5 else -1.0
                        reading_ns += sign * clock.outlier_magnitude_ns
                if clock.resolution_ns > 1e-3:
                    # Floor-to-grid sampling; finer grids are numerically
                    # indistinguishable from continuous time and skipped.
                    reading_ns = math.floor(reading_ns / clock.resolution_ns) * clock.resolution_ns
                rssi_db = -20.0 * math.log10(max(d, 1.0) / 1000.0)
                measurements.append(Measurement(info.sensor_id, reading_ns, rssi_db))
            if len(measurements) >= 2:
                emissions.append((t_emit_s, traj.aircraft_id, p_geo, measurements))
            else:
                n_dropped += 1

    emissions.sort(key=lambda e: (e[0], e[1]))
    records: list[TransmissionRecord] = []
    truth_log: dict[int, TruthEntry] = {}
    for record_id, (t_emit_s, aircraft_id, p_geo, measurements) in enumerate(emissions):
        record = TransmissionRecord(
            record_id=record_id,
            server_time_us=round(t_emit_s * 1e6),
            aircraft_id=aircraft_id,
            truth=p_geo,
            baro_altitude_m=p_geo.altitude_m,
            measurements=tuple(measurements),
        )
        record.validate()
        records.append(record)
        truth_log[record_id] = TruthEntry(record_id, aircraft_id, t_emit_s * 1e9, p_geo)
    clock_log = {info.sensor_id: clock for info, clock in sensor_entries}
    return GeneratedWorld(scenario, records, truth_log, clock_log, n_dropped)


# ---------------------------------------------------------------------------
# Geometry helpers for scenario construction


def geo_from_enu(base: GeoPosition, east_m: float, north_m: float, up_m: float) -> GeoPosition:
    """Offset a geodetic base point by local east/north/up meters."""
    b = np.array(geodetic_to_ecef(base).as_tuple())
    lat = math.radians(base.latitude_deg)
    lon = math.radians(base.longitude_deg)
    east = np.array([-math.sin(lon), math.cos(lon), 0.0])
    north = np.array(
        [
            -math.sin(lat) * math.cos(lon),
            -math.sin(lat) * math.sin(lon),
            math.cos(lat),
        ]
    )
    up = np.array(
        [
            math.cos(lat) * math.cos(lon),
            math.cos(lat) * math.sin(lon),
            math.sin(lat),
        ]
    )
    p = b + east_m * east + north_m * north + up_m * up
    return ecef_to_geodetic(EcefPosition(*p))


_BASE = GeoPosition(47.0, 8.0, 0.0)


# ---------------------------------------------------------------------------
# Reference scenario library


def exact_tetra(seed: int = 11, duration_s: float = 300.0) -> Scenario:
    """Four non-coplanar sensors, noise-free clocks with offsets and drift."""
    placements = [
        (1, 0.0, 0.0, 450.0, 2.5e6, 2.0),
        (2, 40e3, 5e3, 30.0, -1.8e6, -1.5),
        (3, 18e3, 35e3, 900.0, 0.95e6, 0.8),
        (4, 22e3, 12e3, 1600.0, 3.1e6, -2.2),
    ]
    sensors = tuple(
        (
            SensorInfo(sid, geo_from_enu(_BASE, e, n, u), True),
            ClockModel(offset0_ns=off, drift_ns_per_s=drift),
        )
        for sid, e, n, u, off, drift in placements
    )
    traj = Trajectory(
        aircraft_id=1,
        waypoints=(
            (0.0, geo_from_enu(_BASE, -10e3, 15e3, 9000.0)),
            (duration_s, geo_from_enu(_BASE, 50e3, 20e3, 10000.0)),
        ),
    )
    return Scenario("exact-tetra", sensors, (traj,), seed, 150e3)


def noisy_grid(
    jitter_sigma_ns: float | None = None,
    seed: int = 23,
    n_sensors: int = 12,
    duration_s: float = 300.0,
) -> Scenario:
    """Sensor grid under two crossing aircraft; mixed clock classes.

    jitter_sigma_ns=None gives the default mix (GPS-grade 50 ns / cheap
    500 ns); an explicit value applies uniformly. Zero is the exact-world
    variant.
    """
    cols = math.ceil(math.sqrt(n_sensors))
    param_rng = np.random.default_rng([seed, 7])
    sensors = []
    for idx in range(n_sensors):
        row, col = divmod(idx, cols)
        east = col * 35e3
        north = row * 35e3
        alt = ((idx * 7) % 5) * 300.0
        if jitter_sigma_ns is None:
            good = idx % 2 == 0
            sigma = 50.0 if good else 500.0
        else:
            good = True
            sigma = jitter_sigma_ns
        clock = ClockModel(
            offset0_ns=float(param_rng.uniform(-5e6, 5e6)),
            drift_ns_per_s=float(param_rng.uniform(-20.0, 20.0)),
            jitter_sigma_ns=sigma,
        )
        sensors.append((SensorInfo(idx + 1, geo_from_enu(_BASE, east, north, alt), good), clock))
    span_e = (cols - 1) * 35e3
    span_n = (math.ceil(n_sensors / cols) - 1) * 35e3
    trajectories = (
        Trajectory(
            1,
            (
                (0.0, geo_from_enu(_BASE, -20e3, 0.4 * span_n, 9500.0)),
                (duration_s, geo_from_enu(_BASE, span_e + 20e3, 0.6 * span_n, 9500.0)),
            ),
        ),
        Trajectory(
            2,
            (
                (0.1, geo_from_enu(_BASE, 0.6 * span_e, -15e3, 10500.0)),
                (duration_s, geo_from_enu(_BASE, 0.4 * span_e, span_n + 15e3, 10500.0)),
            ),
        ),
    )
    return Scenario("noisy-grid", tuple(sensors), trajectories, seed, 400e3)


def outlier_storm(
    outlier_rate: float = 0.05,
    seed: int = 37,
    duration_s: float = 600.0,
) -> Scenario:
    """One sensor pair under jitter, with broken measurements on one side."""
    sensors = (
        (
            SensorInfo(1, geo_from_enu(_BASE, 0.0, 0.0, 250.0), True),
            ClockModel(offset0_ns=1.2e6, drift_ns_per_s=4.0, jitter_sigma_ns=50.0),
        ),
        (
            SensorInfo(2, geo_from_enu(_BASE, 60e3, 0.0, 400.0), True),
            ClockModel(
                offset0_ns=-0.7e6,
                drift_ns_per_s=-3.0,
                jitter_sigma_ns=50.0,
                outlier_rate=outlier_rate,
                outlier_magnitude_ns=1e5,
            ),
        ),
    )
    traj = Trajectory(
        aircraft_id=1,
        waypoints=(
            (0.0, geo_from_enu(_BASE, 25e3, 8e3, 9000.0)),
            (duration_s, geo_from_enu(_BASE, 35e3, -8e3, 9000.0)),
        ),
        emission_hz=1.0,
    )
    return Scenario("outlier-storm", sensors, (traj,), seed, 200e3)


def collinear(seed: int = 41, duration_s: float = 120.0) -> Scenario:
    """Five sensors on an exact ECEF line; geometry forces rank <= 2."""
    base_ecef = np.array(geodetic_to_ecef(_BASE).as_tuple())
    lon = math.radians(_BASE.longitude_deg)
    east = np.array([-math.sin(lon), math.cos(lon), 0.0])
    sensors = []
    for k in range(5):
        p = base_ecef + (k * 45e3) * east
        sensors.append(
            (
                SensorInfo(k + 1, ecef_to_geodetic(EcefPosition(*p)), True),
                ClockModel(offset0_ns=(k - 2) * 4e5, drift_ns_per_s=float(k - 2)),
            )
        )
    traj = Trajectory(
        aircraft_id=1,
        waypoints=(
            (0.0, geo_from_enu(_BASE, 20e3, 30e3, 10000.0)),
            (duration_s, geo_from_enu(_BASE, 160e3, 30e3, 10000.0)),
        ),
    )
    return Scenario("collinear", tuple(sensors), (traj,), seed, 400e3)


def fig5(seed: int = 53) -> Scenario:
    """Two sensor clusters with partial pairing and an unverified target.

    Warm-up traffic pairs {S5,S6} (aircraft near P2) and {S6,S7}, {S6,S8},
    {S7,S8} (aircraft near P3). A position near P1 is heard by S1 alone and
    therefore never forms a record. The target aircraft (quality false, so
    it never feeds synchronization) is heard by S5..S8 and must be
    localized from the four tracked pair equations.
    """
    placements = [
        (1, -200e3, 120e3, 300.0),
        (2, -240e3, 60e3, 200.0),
        (3, -250e3, 130e3, 500.0),
        (4, -230e3, 160e3, 400.0),
        (5, 0.0, 0.0, 200.0),
        (6, 30e3, 0.0, 400.0),
        (7, 48e3, 8e3, 300.0),
        (8, 48e3, -8e3, 500.0),
    ]
    offsets = [1.4e6, -2.2e6, 0.6e6, 1.9e6, -1.1e6, 2.7e6, -0.4e6, 0.9e6]
    drifts = [1.5, -2.0, 0.5, 1.0, -1.2, 2.3, -0.8, 1.7]
    sensors = tuple(
        (
            SensorInfo(sid, geo_from_enu(_BASE, e, n, u), True),
            ClockModel(offset0_ns=offsets[sid - 1], drift_ns_per_s=drifts[sid - 1]),
        )
        for sid, e, n, u in placements
    )
    trajectories = (
        # P2 loiter: heard by S5 and S6 only.
        Trajectory(1, ((0.0, geo_from_enu(_BASE, 13e3, 0.0, 7000.0)),
                       (60.0, geo_from_enu(_BASE, 15e3, 0.0, 7000.0)))),
        # P3 loiter: heard by S6, S7, S8.
        Trajectory(2, ((0.1, geo_from_enu(_BASE, 40e3, 0.0, 7000.0)),
                       (60.1, geo_from_enu(_BASE, 42e3, 0.0, 7000.0)))),
        # P1 loiter: heard by S1 alone; every emission is dropped.
        Trajectory(3, ((0.2, geo_from_enu(_BASE, -200e3, 100e3, 7000.0)),
                       (60.2, geo_from_enu(_BASE, -199e3, 100e3, 7000.0)))),
        # Target: heard by S5..S8 after warm-up; quality false keeps it
        # out of synchronization.
        Trajectory(4, ((70.0, geo_from_enu(_BASE, 24e3, 0.0, 10000.0)),
                       (80.0, geo_from_enu(_BASE, 25e3, 0.0, 10000.0))),
                   good=False),
    )
    return Scenario("fig5", sensors, trajectories, seed, 28.5e3)


_BUILDERS = {
    "exact-tetra": exact_tetra,
    "noisy-grid": noisy_grid,
    "outlier-storm": outlier_storm,
    "collinear": collinear,
    "fig5": fig5,
}


def reference_scenarios() -> dict[str, Scenario]:
    """The named scenario library with library-default seeds."""
    return {name: build() for name, build in _BUILDERS.items()}


def get_scenario(name: str, seed: int | None = None) -> Scenario:
    build = _BUILDERS.get(name)
    if build is None:
        raise UnknownScenarioError(
            f"unknown scenario {name!r}; available: {sorted(_BUILDERS)}"
        )
    return build() if seed is None else build(seed=seed)


# ---------------------------------------------------------------------------
# File emission


TRUTH_LOG_COLUMNS = ["id", "aircraft", "tEmitNs", "latitude", "longitude", "geoAltitude"]
CLOCK_LOG_COLUMNS = [
    "serial",
    "offset0Ns",
    "driftNsPerS",
    "jitterSigmaNs",
    "resolutionNs",
    "outlierRate",
    "outlierMagnitudeNs",
]


def write_truth_log(world: GeneratedWorld, stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(TRUTH_LOG_COLUMNS)
    for record_id in sorted(world.truth_log):
        e = world.truth_log[record_id]
        w.writerow(
            [
                e.record_id,
                e.aircraft_id,
                repr(e.t_emit_ns),
                repr(e.position.latitude_deg),
                repr(e.position.longitude_deg),
                repr(e.position.altitude_m),
            ]
        )


def write_clock_log(world: GeneratedWorld, stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CLOCK_LOG_COLUMNS)
    for sensor_id in sorted(world.clock_log):
        c = world.clock_log[sensor_id]
        w.writerow(
            [
                sensor_id,
                repr(c.offset0_ns),
                repr(c.drift_ns_per_s),
                repr(c.jitter_sigma_ns),
                repr(c.resolution_ns),
                repr(c.outlier_rate),
                repr(c.outlier_magnitude_ns),
            ]
        )


def write_world(world: GeneratedWorld, out_dir: str | Path, prefix: str | None = None) -> dict[str, Path]:
    """Write the dataset triple plus truth/clock logs; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefix = prefix or world.scenario.name
    paths = {
        "transmissions": out / f"{prefix}.csv",
        "sensors": out / f"{prefix}_sensors.csv",
        "aircraft": out / f"{prefix}_aircraft.csv",
        "truth_log": out / f"{prefix}_truthlog.csv",
        "clock_log": out / f"{prefix}_clocklog.csv",
    }
    with paths["transmissions"].open("w", newline="") as f:
        write_transmissions(world.records, f)
    with paths["sensors"].open("w", newline="") as f:
        write_sensors(world.sensors(), f)
    with paths["aircraft"].open("w", newline="") as f:
        write_aircraft(world.aircraft(), f)
    with paths["truth_log"].open("w", newline="") as f:
        write_truth_log(world, f)
    with paths["clock_log"].open("w", newline="") as f:
        write_clock_log(world, f)
    return paths
