"""Opportunistic pairwise clock synchronization from position-bearing traffic.

Receivers in a crowdsourced network have free-running clocks. Whenever two
sensors receive the same transmission from an aircraft whose position is
known, the pair's relative clock offset can be measured directly:

    delta_{i,j} = (|s_i - p| / c - |s_j - p| / c) - (t_i - t_j)

Repeating this over shared traffic gives a per-pair offset time series,
which a two-state (offset, drift) linear Kalman tracker filters and
extrapolates to arbitrary query times. Outliers (wrong aircraft positions,
broken timestamps) are suppressed by an innovation gate: a measurement more
than gate_sigma standard deviations from the prediction is discarded and
the state coasts. Too many consecutive rejections force a re-initialization
from the next sample.

There is no network-wide reference time; pairs that share no traffic simply
stay unsynchronized, which is harmless since they cannot jointly localize
anything either. All offsets are stored for the (i, j) direction with
i < j; the opposite direction is the negation.

Units: offsets in ns, drift in ns/s, event times in ns on sensor i's clock.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, TextIO

from .dataset import AircraftInfo, SensorTable, TransmissionRecord
from .errors import NoEstimateError, OrderingError, ParseError
from .geo import SPEED_OF_LIGHT_MPS, ecef_distance, geodetic_to_ecef

UNINITIALIZED = "uninitialized"
TRACKING = "tracking"
REINITIALIZING = "reinitializing"


@dataclass(frozen=True)
class SyncConfig:
    gate_sigma: float = 5.0
    reject_limit: int = 5
    # Measurement noise priors by sensor class (1-sigma ToA error).
    gps_sigma_ns: float = 50.0
    default_sigma_ns: float = 500.0
    # Drift random walk intensity: (ns/s) of drift change per sqrt(second).
    drift_noise: float = 1.0
    # Prior drift uncertainty at (re-)initialization.
    init_drift_sigma_ns_per_s: float = 100.0
    # Adapt R from accepted-innovation statistics (clamped to a band
    # around the class prior).
    adapt_measurement_noise: bool = True
    adapt_alpha: float = 0.05
    # Admit unknown-quality aircraft; set True to require verified ones.
    verified_aircraft_only: bool = False


@dataclass(frozen=True)
class OffsetSample:
    """One Eq.-style pair offset measurement. sensor_i < sensor_j always."""

    sensor_i: int
    sensor_j: int
    t_event_ns: float
    delta_ns: float
    source_record_id: int


class PairOffsetTracker:
    """Two-state constant-drift Kalman tracker for one sensor pair.

    State x = [offset_ns, drift_ns_per_s], covariance P (2x2, stored as
    p00/p01/p11). Process noise models the drift as a random walk, which
    covers crystal-oscillator behaviour over hour-scale recordings while
    keeping the filter analyzable.
    """

    __slots__ = (
        "sensor_i",
        "sensor_j",
        "cfg",
        "status",
        "offset_ns",
        "drift_ns_per_s",
        "p00",
        "p01",
        "p11",
        "r_ns2",
        "r_prior_ns2",
        "first_update_ns",
        "last_update_ns",
        "consecutive_rejects",
        "n_accepted",
        "n_rejected",
        "n_reinits",
    )

    def __init__(
        self,
        sensor_i: int,
        sensor_j: int,
        measurement_var_ns2: float,
        cfg: SyncConfig | None = None,
    ):
        if not sensor_i < sensor_j:
            raise ValueError("tracker pair must be ordered sensor_i < sensor_j")
        self.sensor_i = sensor_i
        self.sensor_j = sensor_j
        self.cfg = cfg or SyncConfig()
        self.status = UNINITIALIZED
        self.offset_ns = 0.0
        self.drift_ns_per_s = 0.0
        self.p00 = 0.0
        self.p01 = 0.0
        self.p11 = 0.0
        self.r_ns2 = measurement_var_ns2
        self.r_prior_ns2 = measurement_var_ns2
        self.first_update_ns = 0.0
        self.last_update_ns = 0.0
        self.consecutive_rejects = 0
        self.n_accepted = 0
        self.n_rejected = 0
        self.n_reinits = 0

    @property
    def pair(self) -> tuple[int, int]:
        return (self.sensor_i, self.sensor_j)

    def _seed(self, sample: OffsetSample) -> None:
        self.offset_ns = sample.delta_ns
        self.drift_ns_per_s = 0.0
        self.p00 = self.r_ns2
        self.p01 = 0.0
        self.p11 = self.cfg.init_drift_sigma_ns_per_s**2
        self.first_update_ns = sample.t_event_ns
        self.last_update_ns = sample.t_event_ns
        self.consecutive_rejects = 0
        self.status = TRACKING
        self.n_accepted += 1

    def _predict(self, dt_s: float) -> tuple[float, float, float, float]:
        q = self.cfg.drift_noise**2
        offset = self.offset_ns + self.drift_ns_per_s * dt_s
        p00 = (
            self.p00
            + 2.0 * dt_s * self.p01
            + dt_s * dt_s * self.p11
            + q * dt_s**3 / 3.0
        )
        p01 = self.p01 + dt_s * self.p11 + q * dt_s * dt_s / 2.0
        p11 = self.p11 + q * dt_s
        return offset, p00, p01, p11

    def update(self, sample: OffsetSample, gate_sigma: float | None = None) -> bool:
        """Fold one sample into the state. Returns True if accepted."""
        if sample.sensor_i != self.sensor_i or sample.sensor_j != self.sensor_j:
            raise ValueError("sample pair does not match tracker pair")
        gate = self.cfg.gate_sigma if gate_sigma is None else gate_sigma

        if self.status == UNINITIALIZED or self.status == REINITIALIZING:
            if self.status == REINITIALIZING:
                self.n_reinits += 1
            self._seed(sample)
            return True

        if sample.t_event_ns < self.last_update_ns:
            raise OrderingError(
                f"pair {self.pair}: sample at {sample.t_event_ns} ns precedes "
                f"tracker time {self.last_update_ns} ns"
            )
        dt_s = (sample.t_event_ns - self.last_update_ns) * 1e-9
        offset, p00, p01, p11 = self._predict(dt_s)
        innovation = sample.delta_ns - offset
        s_var = p00 + self.r_ns2

        if abs(innovation) > gate * math.sqrt(s_var):
            # Outlier: state coasts on the prediction.
            self.offset_ns = offset
            self.p00, self.p01, self.p11 = p00, p01, p11
            self.last_update_ns = sample.t_event_ns
            self.consecutive_rejects += 1
            self.n_rejected += 1
            if self.consecutive_rejects > self.cfg.reject_limit:
                self.status = REINITIALIZING
            return False

        k0 = p00 / s_var
        k1 = p01 / s_var
        self.offset_ns = offset + k0 * innovation
        self.drift_ns_per_s += k1 * innovation
        self.p00 = (1.0 - k0) * p00
        self.p01 = (1.0 - k0) * p01
        self.p11 = p11 - k1 * p01
        self.last_update_ns = sample.t_event_ns
        self.consecutive_rejects = 0
        self.n_accepted += 1

        if self.cfg.adapt_measurement_noise:
            a = self.cfg.adapt_alpha
            r_sample = innovation * innovation - p00
            r_new = (1.0 - a) * self.r_ns2 + a * r_sample
            lo = self.r_prior_ns2 * 1e-2
            hi = self.r_prior_ns2 * 1e2
            self.r_ns2 = min(max(r_new, lo), hi)
        return True

    def extrapolation_age_s(self, t_query_ns: float) -> float:
        """Seconds the query lies outside the tracked span (0 if inside)."""
        if t_query_ns > self.last_update_ns:
            return (t_query_ns - self.last_update_ns) * 1e-9
        if t_query_ns < self.first_update_ns:
            return (self.first_update_ns - t_query_ns) * 1e-9
        return 0.0

    def predict(self, t_query_ns: float) -> tuple[float, float]:
        """Extrapolated (offset_ns, variance_ns2) at an arbitrary time.

        The returned variance is inflated monotonically with |dt|; the
        cross-covariance term enters by magnitude so backward extrapolation
        is penalized the same way as forward.
        """
        if self.status != TRACKING:
            raise NoEstimateError(f"pair {self.pair} is {self.status}")
        dt_s = (t_query_ns - self.last_update_ns) * 1e-9
        offset = self.offset_ns + self.drift_ns_per_s * dt_s
        adt = abs(dt_s)
        q = self.cfg.drift_noise**2
        variance = (
            self.p00
            + 2.0 * adt * abs(self.p01)
            + adt * adt * self.p11
            + q * adt**3 / 3.0
        )
        return offset, variance


@dataclass
class PairGraphStats:
    n_records: int = 0
    n_samples: int = 0
    n_accepted: int = 0
    n_rejected: int = 0
    n_reinits: int = 0
    n_skipped_late: int = 0
    n_skipped_no_position: int = 0

    @property
    def rejection_rate(self) -> float:
        return self.n_rejected / self.n_samples if self.n_samples else 0.0


class PairGraph:
    """Pairwise synchronization state: one tracker per sensor pair with traffic."""

    def __init__(self, cfg: SyncConfig | None = None):
        self.cfg = cfg or SyncConfig()
        self._trackers: dict[tuple[int, int], PairOffsetTracker] = {}
        self.stats = PairGraphStats()

    def _measurement_var(self, sensors: SensorTable, i: int, j: int) -> float:
        var = 0.0
        for sid in (i, j):
            sigma = (
                self.cfg.gps_sigma_ns
                if sensors.good(sid) is True
                else self.cfg.default_sigma_ns
            )
            var += sigma * sigma
        return var

    def tracker(self, sensor_i: int, sensor_j: int) -> PairOffsetTracker | None:
        if sensor_i > sensor_j:
            sensor_i, sensor_j = sensor_j, sensor_i
        return self._trackers.get((sensor_i, sensor_j))

    def tracker_for_update(
        self, sensor_i: int, sensor_j: int, sensors: SensorTable
    ) -> PairOffsetTracker:
        key = (sensor_i, sensor_j) if sensor_i < sensor_j else (sensor_j, sensor_i)
        t = self._trackers.get(key)
        if t is None:
            t = PairOffsetTracker(
                key[0], key[1], self._measurement_var(sensors, *key), self.cfg
            )
            self._trackers[key] = t
        return t

    def pairs(self) -> list[tuple[int, int]]:
        """All pairs that ever accepted a sample."""
        return sorted(k for k, t in self._trackers.items() if t.n_accepted > 0)

    def tracked_pairs(self) -> list[tuple[int, int]]:
        return sorted(k for k, t in self._trackers.items() if t.status == TRACKING)

    def predict(self, sensor_i: int, sensor_j: int, t_query_ns: float) -> tuple[float, float]:
        """Signed offset delta_{i,j} and variance at t_query_ns (any id order)."""
        if sensor_i == sensor_j:
            raise ValueError("offset of a sensor against itself")
        sign = 1.0
        if sensor_i > sensor_j:
            sensor_i, sensor_j = sensor_j, sensor_i
            sign = -1.0
        t = self._trackers.get((sensor_i, sensor_j))
        if t is None:
            raise NoEstimateError(f"pair ({sensor_i}, {sensor_j}) has no tracker")
        offset, variance = t.predict(t_query_ns)
        return sign * offset, variance

    # -- persistence --------------------------------------------------------

    SNAPSHOT_COLUMNS = [
        "sensorI",
        "sensorJ",
        "offsetNs",
        "driftNsPerS",
        "p00",
        "p01",
        "p11",
        "rNs2",
        "rPriorNs2",
        "firstUpdateNs",
        "lastUpdateNs",
        "status",
        "consecutiveRejects",
        "nAccepted",
        "nRejected",
    ]

    def save_snapshot(self, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(self.SNAPSHOT_COLUMNS)
        for key in sorted(self._trackers):
            t = self._trackers[key]
            w.writerow(
                [
                    t.sensor_i,
                    t.sensor_j,
                    repr(t.offset_ns),
                    repr(t.drift_ns_per_s),
                    repr(t.p00),
                    repr(t.p01),
                    repr(t.p11),
                    repr(t.r_ns2),
                    repr(t.r_prior_ns2),
                    repr(t.first_update_ns),
                    repr(t.last_update_ns),
                    t.status,
                    t.consecutive_rejects,
                    t.n_accepted,
                    t.n_rejected,
                ]
            )

    @classmethod
    def load_snapshot(cls, stream: TextIO, cfg: SyncConfig | None = None) -> "PairGraph":
        graph = cls(cfg)
        reader = csv.reader(stream)
        header = None
        for row in reader:
            if not row or row[0].startswith("#"):
                continue
            if header is None:
                header = row
                if header != cls.SNAPSHOT_COLUMNS:
                    raise ParseError(f"unexpected snapshot header {header!r}")
                continue
            t = PairOffsetTracker(int(row[0]), int(row[1]), float(row[7]), graph.cfg)
            t.offset_ns = float(row[2])
            t.drift_ns_per_s = float(row[3])
            t.p00, t.p01, t.p11 = float(row[4]), float(row[5]), float(row[6])
            t.r_ns2 = float(row[7])
            t.r_prior_ns2 = float(row[8])
            t.first_update_ns = float(row[9])
            t.last_update_ns = float(row[10])
            t.status = row[11]
            t.consecutive_rejects = int(row[12])
            t.n_accepted = int(row[13])
            t.n_rejected = int(row[14])
            graph._trackers[t.pair] = t
        return graph


def offset_sample(
    record: TransmissionRecord, sensors: SensorTable
) -> list[OffsetSample]:
    """Pair offset measurements for one position-bearing record.

    One sample per unordered sensor pair, computed in ECEF with the
    geometric altitude. Pairs with an unknown sensor position are skipped.
    The caller is responsible for admitting only records whose aircraft
    position quality is not known-bad.
    """
    if record.truth is None:
        return []
    p = geodetic_to_ecef(record.truth)
    located = []
    for m in sorted(record.measurements, key=lambda m: m.sensor_id):
        ecef = sensors.ecef(m.sensor_id)
        if ecef is None:
            continue
        located.append((m, ecef_distance(ecef, p)))
    samples = []
    for a in range(len(located)):
        mi, di = located[a]
        for b in range(a + 1, len(located)):
            mj, dj = located[b]
            delta_ns = ((di - dj) / SPEED_OF_LIGHT_MPS) * 1e9 - (mi.toa_ns - mj.toa_ns)
            samples.append(
                OffsetSample(
                    sensor_i=mi.sensor_id,
                    sensor_j=mj.sensor_id,
                    t_event_ns=mi.toa_ns,
                    delta_ns=delta_ns,
                    source_record_id=record.record_id,
                )
            )
    return samples


def build_pair_graph(
    records: Iterable[TransmissionRecord],
    sensors: SensorTable,
    aircraft: Mapping[int, AircraftInfo] | None = None,
    cfg: SyncConfig | None = None,
) -> PairGraph:
    """Fold offset sampling and tracking over a time-ordered record stream.

    Records without truth, or from aircraft whose position quality is
    known-bad, do not feed synchronization. Unknown-quality aircraft are
    admitted unless cfg.verified_aircraft_only is set (most unverified
    traffic is geometrically unverifiable rather than wrong). Samples that
    arrive out of order for a pair are skipped, not fatal.
    """
    graph = PairGraph(cfg)
    cfg = graph.cfg
    for record in records:
        if record.truth is None:
            continue
        if aircraft is not None:
            info = aircraft.get(record.aircraft_id)
            quality = info.good if info is not None else None
            if quality is False:
                continue
            if cfg.verified_aircraft_only and quality is not True:
                continue
        graph.stats.n_records += 1
        n_known = 0
        for sample in offset_sample(record, sensors):
            n_known += 1
            tracker = graph.tracker_for_update(sample.sensor_i, sample.sensor_j, sensors)
            if tracker.status == TRACKING and sample.t_event_ns < tracker.last_update_ns:
                graph.stats.n_skipped_late += 1
                continue
            reinits_before = tracker.n_reinits
            accepted = tracker.update(sample)
            graph.stats.n_samples += 1
            graph.stats.n_reinits += tracker.n_reinits - reinits_before
            if accepted:
                graph.stats.n_accepted += 1
            else:
                graph.stats.n_rejected += 1
        if n_known == 0 and len(record.measurements) >= 2:
            graph.stats.n_skipped_no_position += 1
    return graph


def iter_pair_samples(
    records: Iterable[TransmissionRecord], sensors: SensorTable
) -> Iterator[OffsetSample]:
    """Flatten a record stream into its pair offset samples (diagnostics)."""
    for record in records:
        yield from offset_sample(record, sensors)
