"""Dataset schema, streaming CSV parsers/writers, and preparation steps.

A one-hour subset consists of three CSV files (UTF-8, comma separated,
header row mandatory, ``.`` decimal separator):

- transmissions ``set_X.csv``:
  ``id,timeAtServer,aircraft,latitude,longitude,baroAltitude,geoAltitude,numMeasurements,measurements``
  where ``measurements`` is a JSON array of ``[sensorId, timestampNs, rssi]``
  triples. ``timeAtServer`` is microseconds since the start of the recording.
  The truth columns (latitude/longitude/geoAltitude) are empty for records
  whose position has been masked for evaluation.
- sensors ``set_X_sensors.csv``: ``serial,latitude,longitude,height,good``
- aircraft ``set_X_aircraft.csv``: ``aircraft,good``

``good`` indicators are tri-state: ``true``, ``false``, or empty (= unknown;
an aircraft that could not be verified is distinct from one known bad).

Lines starting with ``#`` are treated as comments (used for config echo in
emitted artifacts). A column-mapping JSON file can rename columns to absorb
schema drift without code changes.

Preparation operations mirror the upstream pipeline that turns raw
per-sensor receptions into transmission records: rolling-counter unwrapping
to continuous nanosecond timestamps, payload/time deduplication,
single-receiver filtering, a residual-based consistency check, and a
deterministic train/eval masking split.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, TextIO

from .errors import IntegrityError, ParseError, UnwrapAmbiguityError
from .geo import (
    SPEED_OF_LIGHT_MPS,
    EcefPosition,
    GeoPosition,
    ecef_distance,
    geodetic_to_ecef,
)

TRANSMISSION_COLUMNS = [
    "id",
    "timeAtServer",
    "aircraft",
    "latitude",
    "longitude",
    "baroAltitude",
    "geoAltitude",
    "numMeasurements",
    "measurements",
]
SENSOR_COLUMNS = ["serial", "latitude", "longitude", "height", "good"]
AIRCRAFT_COLUMNS = ["aircraft", "good"]
ANSWER_KEY_COLUMNS = ["id", "latitude", "longitude", "geoAltitude"]


@dataclass(frozen=True)
class SensorInfo:
    """One receiver: id, surveyed position, and GPS-sync/location indicator."""

    sensor_id: int
    position: GeoPosition
    good: bool | None = None


@dataclass(frozen=True)
class AircraftInfo:
    aircraft_id: int
    good: bool | None = None


@dataclass(frozen=True)
class Measurement:
    """One sensor's reading of one transmission.

    toa_ns is the sensor-clock arrival time in nanoseconds since the start
    of the recording; it may drift and is not comparable across sensors
    without synchronization. rssi_db has an unknown, receiver-dependent
    reference.
    """

    sensor_id: int
    toa_ns: float
    rssi_db: float


@dataclass(frozen=True)
class TransmissionRecord:
    """A deduplicated transmission: >= 2 receptions of one signal.

    truth is the transmitter position decoded from the signal payload
    (geometric altitude), or None when masked for evaluation. The
    barometric altitude is carried separately and never used in geometry.
    """

    record_id: int
    server_time_us: int
    aircraft_id: int
    truth: GeoPosition | None
    baro_altitude_m: float | None
    measurements: tuple[Measurement, ...]
    flags: tuple[str, ...] = ()

    def validate(self) -> None:
        if len(self.measurements) < 2:
            raise IntegrityError(
                f"record {self.record_id}: {len(self.measurements)} measurement(s), need >= 2"
            )
        sensor_ids = [m.sensor_id for m in self.measurements]
        if len(set(sensor_ids)) != len(sensor_ids):
            raise IntegrityError(f"record {self.record_id}: duplicate sensor in measurement list")


@dataclass(frozen=True)
class RawSample:
    """A single reception before deduplication.

    payload_key is an opaque fingerprint of the transmitted signal content;
    identical payloads received close together in time are receptions of the
    same transmission. rolling_counter is the sensor's k-bit hardware
    counter; toa_ns is None until unwrapped to a continuous timestamp.
    server_time_us (arrival at the collection server, includes internet
    delay) is the coarse anchor for overflow detection; it may be missing.
    """

    sensor_id: int
    rolling_counter: int
    counter_hz: float
    payload_key: int
    server_time_us: int | None
    rssi_db: float = 0.0
    toa_ns: float | None = None
    aircraft_id: int = 0
    truth: GeoPosition | None = None
    baro_altitude_m: float | None = None


class SensorTable:
    """Sensor lookup with a lazy geodetic->ECEF cache."""

    def __init__(self, sensors: Iterable[SensorInfo]):
        self._by_id: dict[int, SensorInfo] = {}
        for s in sensors:
            if s.sensor_id in self._by_id:
                raise IntegrityError(f"duplicate sensor id {s.sensor_id}")
            self._by_id[s.sensor_id] = s
        self._ecef: dict[int, EcefPosition] = {}

    def __contains__(self, sensor_id: int) -> bool:
        return sensor_id in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)

    def get(self, sensor_id: int) -> SensorInfo | None:
        return self._by_id.get(sensor_id)

    def ecef(self, sensor_id: int) -> EcefPosition | None:
        pos = self._ecef.get(sensor_id)
        if pos is None:
            info = self._by_id.get(sensor_id)
            if info is None:
                return None
            pos = geodetic_to_ecef(info.position)
            self._ecef[sensor_id] = pos
        return pos

    def good(self, sensor_id: int) -> bool | None:
        info = self._by_id.get(sensor_id)
        return None if info is None else info.good

    def ids(self) -> list[int]:
        return sorted(self._by_id)

    def n_good(self) -> int:
        return sum(1 for s in self._by_id.values() if s.good is True)


# ---------------------------------------------------------------------------
# Parsing helpers


def _iter_rows(stream: TextIO) -> Iterator[tuple[int, list[str]]]:
    """Yield (line_number, row) skipping comment lines."""
    reader = csv.reader(stream)
    for row in reader:
        if row and row[0].startswith("#"):
            continue
        yield reader.line_num, row


def _resolve_header(
    row: list[str], expected: list[str], column_map: Mapping[str, str] | None, line: int
) -> list[int]:
    """Map canonical column names to indices in the actual header."""
    actual = [c.strip() for c in row]
    indices = []
    missing = []
    for name in expected:
        wanted = column_map.get(name, name) if column_map else name
        try:
            indices.append(actual.index(wanted))
        except ValueError:
            missing.append(wanted)
    if missing:
        raise ParseError(
            f"missing column(s) {missing}; header has {actual}", line=line
        )
    return indices


def _tristate(text: str, line: int) -> bool | None:
    text = text.strip().lower()
    if text == "":
        return None
    if text == "true":
        return True
    if text == "false":
        return False
    raise ParseError(f"expected true/false/empty indicator, got {text!r}", line=line)


def _opt_float(text: str) -> float | None:
    text = text.strip()
    return float(text) if text else None


def load_column_map(stream: TextIO) -> dict[str, str]:
    """Load a canonical->actual column-name mapping (JSON object)."""
    mapping = json.load(stream)
    if not isinstance(mapping, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in mapping.items()
    ):
        raise ParseError("column map must be a JSON object of string->string")
    return mapping


def parse_sensors(
    stream: TextIO, column_map: Mapping[str, str] | None = None
) -> list[SensorInfo]:
    rows = _iter_rows(stream)
    try:
        line, header = next(rows)
    except StopIteration:
        raise ParseError("empty sensors file") from None
    idx = _resolve_header(header, SENSOR_COLUMNS, column_map, line)
    out: list[SensorInfo] = []
    seen: set[int] = set()
    for line, row in rows:
        if not row:
            continue
        try:
            serial = int(row[idx[0]])
            pos = GeoPosition(float(row[idx[1]]), float(row[idx[2]]), float(row[idx[3]]))
            good = _tristate(row[idx[4]], line)
        except (ValueError, IndexError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"malformed sensor row: {exc}", line=line) from None
        if serial in seen:
            raise IntegrityError(f"duplicate sensor id {serial} (line {line})")
        seen.add(serial)
        out.append(SensorInfo(serial, pos, good))
    return out


def parse_aircraft(
    stream: TextIO, column_map: Mapping[str, str] | None = None
) -> list[AircraftInfo]:
    rows = _iter_rows(stream)
    try:
        line, header = next(rows)
    except StopIteration:
        raise ParseError("empty aircraft file") from None
    idx = _resolve_header(header, AIRCRAFT_COLUMNS, column_map, line)
    out: list[AircraftInfo] = []
    seen: set[int] = set()
    for line, row in rows:
        if not row:
            continue
        try:
            aircraft_id = int(row[idx[0]])
            good = _tristate(row[idx[1]] if idx[1] < len(row) else "", line)
        except (ValueError, IndexError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"malformed aircraft row: {exc}", line=line) from None
        if aircraft_id in seen:
            raise IntegrityError(f"duplicate aircraft id {aircraft_id} (line {line})")
        seen.add(aircraft_id)
        out.append(AircraftInfo(aircraft_id, good))
    return out


def parse_transmissions(
    stream: TextIO, column_map: Mapping[str, str] | None = None
) -> Iterator[TransmissionRecord]:
    """Stream transmission records in file order with constant memory."""
    rows = _iter_rows(stream)
    try:
        line, header = next(rows)
    except StopIteration:
        raise ParseError("empty transmissions file") from None
    idx = _resolve_header(header, TRANSMISSION_COLUMNS, column_map, line)
    for line, row in rows:
        if not row:
            continue
        try:
            record_id = int(row[idx[0]])
            server_time_us = int(row[idx[1]])
            aircraft_id = int(row[idx[2]])
            lat = _opt_float(row[idx[3]])
            lon = _opt_float(row[idx[4]])
            baro = _opt_float(row[idx[5]])
            geo_alt = _opt_float(row[idx[6]])
            n_meas = int(row[idx[7]])
            triples = json.loads(row[idx[8]])
        except (ValueError, IndexError, json.JSONDecodeError) as exc:
            raise ParseError(f"malformed transmission row: {exc}", line=line) from None
        if n_meas != len(triples):
            raise ParseError(
                f"numMeasurements={n_meas} but {len(triples)} measurements", line=line
            )
        measurements = []
        flags: list[str] = []
        for t in triples:
            if not (isinstance(t, list) and len(t) == 3):
                raise ParseError(f"bad measurement triple {t!r}", line=line)
            m = Measurement(int(t[0]), float(t[1]), float(t[2]))
            if m.toa_ns < 0:
                # Broken sensor clock: keep the record but mark it.
                flags.append("negative-toa")
            measurements.append(m)
        truth = None
        if lat is not None and lon is not None and geo_alt is not None:
            truth = GeoPosition(lat, lon, geo_alt)
        record = TransmissionRecord(
            record_id=record_id,
            server_time_us=server_time_us,
            aircraft_id=aircraft_id,
            truth=truth,
            baro_altitude_m=baro,
            measurements=tuple(measurements),
            flags=tuple(dict.fromkeys(flags)),
        )
        try:
            record.validate()
        except IntegrityError as exc:
            raise IntegrityError(f"{exc} (line {line})") from None
        yield record


# ---------------------------------------------------------------------------
# Writers


def _fmt(value: float | int | None) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def _fmt_tristate(value: bool | None) -> str:
    if value is None:
        return ""
    return "true" if value else "false"


def write_sensors(sensors: Iterable[SensorInfo], stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(SENSOR_COLUMNS)
    for s in sensors:
        w.writerow(
            [
                s.sensor_id,
                _fmt(s.position.latitude_deg),
                _fmt(s.position.longitude_deg),
                _fmt(s.position.altitude_m),
                _fmt_tristate(s.good),
            ]
        )


def write_aircraft(aircraft: Iterable[AircraftInfo], stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(AIRCRAFT_COLUMNS)
    for a in aircraft:
        w.writerow([a.aircraft_id, _fmt_tristate(a.good)])


def write_transmissions(records: Iterable[TransmissionRecord], stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(TRANSMISSION_COLUMNS)
    for r in records:
        triples = [[m.sensor_id, m.toa_ns, m.rssi_db] for m in r.measurements]
        w.writerow(
            [
                r.record_id,
                r.server_time_us,
                r.aircraft_id,
                _fmt(r.truth.latitude_deg) if r.truth else "",
                _fmt(r.truth.longitude_deg) if r.truth else "",
                _fmt(r.baro_altitude_m),
                _fmt(r.truth.altitude_m) if r.truth else "",
                len(r.measurements),
                json.dumps(triples, separators=(",", ":")),
            ]
        )


def write_answer_key(key: Mapping[int, GeoPosition], stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(ANSWER_KEY_COLUMNS)
    for record_id in sorted(key):
        g = key[record_id]
        w.writerow([record_id, _fmt(g.latitude_deg), _fmt(g.longitude_deg), _fmt(g.altitude_m)])


def parse_answer_key(stream: TextIO) -> dict[int, GeoPosition]:
    rows = _iter_rows(stream)
    try:
        line, header = next(rows)
    except StopIteration:
        raise ParseError("empty answer key") from None
    idx = _resolve_header(header, ANSWER_KEY_COLUMNS, None, line)
    key: dict[int, GeoPosition] = {}
    for line, row in rows:
        if not row:
            continue
        try:
            record_id = int(row[idx[0]])
            pos = GeoPosition(float(row[idx[1]]), float(row[idx[2]]), float(row[idx[3]]))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"malformed answer-key row: {exc}", line=line) from None
        if record_id in key:
            raise IntegrityError(f"duplicate record id {record_id} in answer key")
        key[record_id] = pos
    return key


# ---------------------------------------------------------------------------
# Preparation: counter unwrapping


def unwrap_counter(
    samples: list[RawSample],
    counter_modulus: int,
    counter_hz: float | None = None,
) -> list[float]:
    """Map one sensor's rolling counters to continuous nanosecond timestamps.

    samples must be in server-arrival order and belong to a single sensor.
    counter_modulus is the wrap period in counts (2**k for a k-bit counter).
    Server timestamps anchor the number of full wraps between samples; when
    a sample has no server anchor and the minimal forward step exceeds half
    a counter period, the wrap count is ambiguous and an
    UnwrapAmbiguityError is raised for that sample.

    Output is monotone non-decreasing.
    """
    if counter_modulus <= 1:
        raise ValueError("counter_modulus must be > 1")
    out: list[float] = []
    prev_total: int | None = None
    anchor_total: int | None = None
    anchor_server: int | None = None
    for n, s in enumerate(samples):
        if counter_hz is None:
            counter_hz = s.counter_hz
        if not (0 <= s.rolling_counter < counter_modulus):
            raise IntegrityError(
                f"sample {n}: rolling counter {s.rolling_counter} outside [0, {counter_modulus})"
            )
        if prev_total is None:
            total = s.rolling_counter
        else:
            # Smallest wrap count that keeps the sequence non-decreasing.
            w_min = max(-((s.rolling_counter - prev_total) // counter_modulus), 0)
            if s.server_time_us is not None and anchor_server is not None:
                predicted = (
                    anchor_total + (s.server_time_us - anchor_server) * 1e-6 * counter_hz
                )
                w = max(round((predicted - s.rolling_counter) / counter_modulus), w_min)
            else:
                w = w_min
                step = s.rolling_counter + w * counter_modulus - prev_total
                if step > counter_modulus / 2:
                    raise UnwrapAmbiguityError(
                        f"sample {n}: forward step of {step} counts exceeds half a period "
                        f"and no server anchor is available"
                    )
            total = s.rolling_counter + w * counter_modulus
        out.append(total / counter_hz * 1e9)
        prev_total = total
        if s.server_time_us is not None:
            anchor_total = total
            anchor_server = s.server_time_us
    return out


# ---------------------------------------------------------------------------
# Preparation: deduplication


class _Group:
    __slots__ = ("first_toa_ns", "members")

    def __init__(self, sample: RawSample):
        self.first_toa_ns = sample.toa_ns
        self.members: dict[int, RawSample] = {sample.sensor_id: sample}

    def add(self, sample: RawSample) -> None:
        prior = self.members.get(sample.sensor_id)
        # Same-sensor echo within the window: keep the earliest reception.
        if prior is None or sample.toa_ns < prior.toa_ns:
            self.members[sample.sensor_id] = sample


def deduplicate(
    samples: Iterable[RawSample],
    window_ns: float = 2_000_000.0,
    start_record_id: int = 0,
) -> Iterator[TransmissionRecord]:
    """Group receptions of one transmission by payload and arrival time.

    Samples with the same payload_key whose continuous timestamps fall
    within window_ns of the group's earliest member form one record; groups
    with fewer than two distinct sensors are discarded. Input must carry
    unwrapped toa_ns and be ordered by it. The default window (2 ms) covers
    the worst-case ToA spread of a ~400 km line-of-sight network with
    margin.
    """
    open_groups: dict[int, _Group] = {}
    next_id = start_record_id
    watermark = -math.inf

    def emit(group: _Group, record_id: int) -> TransmissionRecord | None:
        if len(group.members) < 2:
            return None
        members = sorted(group.members.values(), key=lambda s: s.sensor_id)
        first = min(members, key=lambda s: s.toa_ns)
        server_times = [s.server_time_us for s in members if s.server_time_us is not None]
        record = TransmissionRecord(
            record_id=record_id,
            server_time_us=min(server_times) if server_times else 0,
            aircraft_id=first.aircraft_id,
            truth=first.truth,
            baro_altitude_m=first.baro_altitude_m,
            measurements=tuple(
                Measurement(s.sensor_id, s.toa_ns, s.rssi_db) for s in members
            ),
        )
        record.validate()
        return record

    for s in samples:
        if s.toa_ns is None:
            raise IntegrityError("deduplicate requires unwrapped continuous timestamps")
        group = open_groups.get(s.payload_key)
        if group is not None and s.toa_ns - group.first_toa_ns <= window_ns:
            group.add(s)
        else:
            if group is not None:
                record = emit(group, next_id)
                if record is not None:
                    next_id += 1
                    yield record
            open_groups[s.payload_key] = _Group(s)
        watermark = max(watermark, s.toa_ns)
        # Close groups no future sample can join (input ordered by toa_ns).
        if len(open_groups) > 4096:
            stale = [k for k, g in open_groups.items() if watermark - g.first_toa_ns > window_ns]
            for k in sorted(stale, key=lambda k: open_groups[k].first_toa_ns):
                record = emit(open_groups.pop(k), next_id)
                if record is not None:
                    next_id += 1
                    yield record

    for k in sorted(open_groups, key=lambda k: open_groups[k].first_toa_ns):
        record = emit(open_groups[k], next_id)
        if record is not None:
            next_id += 1
            yield record


# ---------------------------------------------------------------------------
# Preparation: consistency verification


@dataclass(frozen=True)
class ResidualStats:
    """Result of the pairwise zero-offset residual check on one record."""

    status: str  # "consistent" | "inconsistent" | "not-verifiable"
    max_abs_residual_s: float | None
    n_pairs: int


def verify_consistency(
    record: TransmissionRecord,
    sensors: SensorTable,
    good_only: bool = True,
    threshold_s: float = 10e-6,
) -> ResidualStats:
    """Check reported truth against GPS-grade timestamps.

    For every usable sensor pair the residual is the pair clock offset
    implied by the reported position under a zero-offset assumption; for
    GPS-synchronized sensors any residual beyond threshold_s (default 10 us,
    an order of magnitude above GPS timestamp noise and an order below gross
    position errors) marks the record inconsistent. Fewer than two usable
    sensors, or no truth, yields "not-verifiable" rather than a judgement.
    """
    if record.truth is None:
        return ResidualStats("not-verifiable", None, 0)
    usable = []
    for m in record.measurements:
        if good_only and sensors.good(m.sensor_id) is not True:
            continue
        ecef = sensors.ecef(m.sensor_id)
        if ecef is None:
            continue
        usable.append((m, ecef))
    if len(usable) < 2:
        return ResidualStats("not-verifiable", None, 0)
    p = geodetic_to_ecef(record.truth)
    max_abs = 0.0
    n_pairs = 0
    for i in range(len(usable)):
        mi, si = usable[i]
        di = ecef_distance(si, p)
        for j in range(i + 1, len(usable)):
            mj, sj = usable[j]
            dj = ecef_distance(sj, p)
            residual = (di - dj) / SPEED_OF_LIGHT_MPS - (mi.toa_ns - mj.toa_ns) * 1e-9
            max_abs = max(max_abs, abs(residual))
            n_pairs += 1
    status = "consistent" if max_abs < threshold_s else "inconsistent"
    return ResidualStats(status, max_abs, n_pairs)


# ---------------------------------------------------------------------------
# Preparation: evaluation masking


def eval_mask_value(record_id: int, seed: int) -> float:
    """Deterministic hash of (seed, record_id) in [0, 1)."""
    digest = hashlib.blake2b(
        f"{seed}:{record_id}".encode("ascii"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big") / 2**64


def split_for_eval(
    records: Iterable[TransmissionRecord], fraction: float, seed: int
) -> Iterator[tuple[bool, TransmissionRecord]]:
    """Stream (is_eval, record); selection is a pure function of (seed, id)."""
    if not (0.0 < fraction < 1.0):
        raise ValueError("fraction must be in (0, 1)")
    for record in records:
        yield eval_mask_value(record.record_id, seed) < fraction, record


def mask_truth(record: TransmissionRecord) -> TransmissionRecord:
    """Strip the decoded position (baro altitude is retained)."""
    return replace(record, truth=None)


def mask_for_eval(
    records: Iterable[TransmissionRecord], fraction: float, seed: int
) -> tuple[list[TransmissionRecord], list[TransmissionRecord], dict[int, GeoPosition]]:
    """Eager split into (train, eval-with-hidden-truth, answer key).

    Eval records lose their truth; the answer key retains it. Records that
    never had truth can be selected but do not enter the key.
    """
    train: list[TransmissionRecord] = []
    masked: list[TransmissionRecord] = []
    key: dict[int, GeoPosition] = {}
    for is_eval, record in split_for_eval(records, fraction, seed):
        if is_eval:
            if record.truth is not None:
                key[record.record_id] = record.truth
            masked.append(mask_truth(record))
        else:
            train.append(record)
    return train, masked, key


# ---------------------------------------------------------------------------
# Subset statistics


@dataclass
class IngestStats:
    n_records: int = 0
    n_measurements: int = 0
    redundancy: Counter = field(default_factory=Counter)
    n_flagged: int = 0

    @property
    def max_redundancy(self) -> int:
        return max(self.redundancy) if self.redundancy else 0

    def geometric_fit(self, k_min: int = 2) -> float | None:
        """MLE success probability of a geometric law shifted to k >= k_min."""
        total = sum(self.redundancy.values())
        if total == 0:
            return None
        mean = sum(k * n for k, n in self.redundancy.items()) / total
        if mean <= k_min - 1:
            return None
        return 1.0 / (mean - (k_min - 1))


def collect_stats(records: Iterable[TransmissionRecord]) -> IngestStats:
    stats = IngestStats()
    for r in records:
        stats.n_records += 1
        stats.n_measurements += len(r.measurements)
        stats.redundancy[len(r.measurements)] += 1
        if r.flags:
            stats.n_flagged += 1
    return stats


def records_to_string(records: Iterable[TransmissionRecord]) -> str:
    buf = io.StringIO()
    write_transmissions(records, buf)
    return buf.getvalue()
