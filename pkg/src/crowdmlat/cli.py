"""Command-line pipeline: ingest, synth, sync, locate, evaluate.

Configuration precedence is flag > config file > built-in default. The
config file is plain ``key = value`` text (# comments allowed). Every
artifact a command writes starts with ``# key=value`` echo lines of the
semantic configuration, so results are reproducible from the artifact
alone; execution details (worker count, file paths) are excluded from the
echo because they must not change the bytes of the output.

Exit codes: 0 success, 1 usage/config error, 2 data integrity error,
3 coverage floor failed.
"""

from __future__ import annotations

import argparse
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator, TextIO

from . import dataset, evaluate, locate, synth
from .errors import (
    CrowdMlatError,
    IntegrityError,
    OrderingError,
    ParseError,
    ScoringError,
    UnknownScenarioError,
    UnwrapAmbiguityError,
)
from .locate import LocateConfig, Prediction
from .sync import PairGraph, SyncConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INTEGRITY = 2
EXIT_COVERAGE = 3


class ConfigError(CrowdMlatError, ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    dedup_window_ns: float = 2e6
    # sync
    gate_sigma: float = 5.0
    reject_limit: int = 5
    gps_sigma_ns: float = 50.0
    default_sigma_ns: float = 500.0
    verified_aircraft_only: bool = False
    # locate
    max_iter: int = 50
    step_tol_m: float = 0.1
    residual_ceiling_s: float = 5e-6
    max_offset_age_s: float = 300.0
    guess_max_age_s: float = 10.0
    toa_sigma_override_ns: float | None = None
    baro_constraint: bool = False
    # eval
    penalty_m: float | None = None
    min_coverage: float = 0.5
    metric: str = "3d"
    # masking
    mask_fraction: float | None = None
    mask_seed: int = 0

    # Execution-only settings excluded from artifact echo so output bytes
    # do not depend on how the run was parallelized.
    _NO_ECHO = frozenset({"workers"})

    def sync_config(self) -> SyncConfig:
        return SyncConfig(
            gate_sigma=self.gate_sigma,
            reject_limit=self.reject_limit,
            gps_sigma_ns=self.gps_sigma_ns,
            default_sigma_ns=self.default_sigma_ns,
            verified_aircraft_only=self.verified_aircraft_only,
        )

    def locate_config(self) -> LocateConfig:
        return LocateConfig(
            max_iter=self.max_iter,
            step_tol_m=self.step_tol_m,
            residual_ceiling_s=self.residual_ceiling_s,
            max_offset_age_s=self.max_offset_age_s,
            guess_max_age_s=self.guess_max_age_s,
            toa_sigma_gps_ns=self.gps_sigma_ns,
            toa_sigma_default_ns=self.default_sigma_ns,
            toa_sigma_override_ns=self.toa_sigma_override_ns,
            baro_constraint=self.baro_constraint,
        )

    def echo_items(self) -> list[tuple[str, str]]:
        items = []
        for f in fields(self):
            if f.name in self._NO_ECHO:
                continue
            value = getattr(self, f.name)
            items.append((f.name, "none" if value is None else str(value)))
        return sorted(items)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_config_value(name: str, text: str):
    text = text.strip()
    ftype = _FIELD_TYPES.get(name)
    if ftype is None:
        raise ConfigError(f"unknown config key {name!r}")
    if text.lower() == "none":
        return None
    if ftype == "bool":
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {name}: expected boolean, got {text!r}")
    if ftype == "int":
        return int(text)
    if ftype in ("float", "float | None"):
        return float(text)
    return text


def load_config_file(path: str | Path) -> dict:
    values = {}
    with open(path) as f:
        for n, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            key, _, value = line.partition("=")
            key = key.strip()
            values[key] = _parse_config_value(key, value)
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            setattr(cfg, key, value)
    for f in fields(RunConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            setattr(cfg, f.name, flag_value)
    return cfg


def _write_echo(stream: TextIO, cfg: RunConfig) -> None:
    for key, value in cfg.echo_items():
        stream.write(f"# {key}={value}\n")


# ---------------------------------------------------------------------------
# Parallel localization (deterministic across worker counts)

_WORKER_STATE: dict = {}


def _init_locate_worker(graph: PairGraph, sensors: dataset.SensorTable, cfg: LocateConfig) -> None:
    _WORKER_STATE["graph"] = graph
    _WORKER_STATE["sensors"] = sensors
    _WORKER_STATE["cfg"] = cfg


def _locate_group(payload):
    aircraft_id, records, cache_entry = payload
    graph = _WORKER_STATE["graph"]
    sensors = _WORKER_STATE["sensors"]
    cfg = _WORKER_STATE["cfg"]
    predictions = []
    for record in records:
        prediction = locate.localize_record(record, graph, sensors, cfg, cache_entry)
        if prediction.result is not None:
            cache_entry = (record.server_time_us, prediction.result.position_ecef)
        predictions.append(prediction)
    return aircraft_id, predictions, cache_entry


def run_localization(
    records: Iterable[dataset.TransmissionRecord],
    graph: PairGraph,
    sensors: dataset.SensorTable,
    cfg: LocateConfig,
    workers: int = 1,
    batch_size: int = 50_000,
) -> list[Prediction]:
    """Localize a stream, optionally in parallel, with canonical ordering.

    Work is partitioned by aircraft so each aircraft's records are handled
    in time order by a single worker; results are identical to the serial
    path and returned sorted by record id regardless of worker count.
    """
    predictions: list[Prediction] = []
    if workers <= 1:
        predictions.extend(locate.localize_stream(records, graph, sensors, cfg))
    else:
        cache: dict[int, tuple[int, object]] = {}
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_init_locate_worker,
            initargs=(graph, sensors, cfg),
        ) as pool:
            batch: list[dataset.TransmissionRecord] = []
            record_iter = iter(records)
            while True:
                batch.clear()
                for record in record_iter:
                    batch.append(record)
                    if len(batch) >= batch_size:
                        break
                if not batch:
                    break
                groups: dict[int, list] = {}
                for record in batch:
                    groups.setdefault(record.aircraft_id, []).append(record)
                payloads = [
                    (aid, groups[aid], cache.get(aid)) for aid in sorted(groups)
                ]
                for aid, group_predictions, cache_entry in pool.map(_locate_group, payloads):
                    predictions.extend(group_predictions)
                    if cache_entry is not None:
                        cache[aid] = cache_entry
                if len(batch) < batch_size:
                    break
    predictions.sort(key=lambda p: p.record_id)
    return predictions


# ---------------------------------------------------------------------------
# Subcommands


def cmd_ingest(args: argparse.Namespace, cfg: RunConfig) -> int:
    column_map = None
    if args.column_map:
        with open(args.column_map) as f:
            column_map = dataset.load_column_map(f)
    with open(args.sensors) as f:
        sensors = dataset.SensorTable(dataset.parse_sensors(f, column_map))
    n_aircraft = None
    if args.aircraft:
        with open(args.aircraft) as f:
            n_aircraft = len(dataset.parse_aircraft(f, column_map))
    with open(args.transmissions) as f:
        stats = dataset.collect_stats(dataset.parse_transmissions(f, column_map))
    print(
        f"{stats.n_records:,} records / {stats.n_measurements:,} measurements / "
        f"{len(sensors)} sensors ({sensors.n_good()} GPS-good)"
    )
    if n_aircraft is not None:
        print(f"{n_aircraft} aircraft")
    if stats.n_flagged:
        print(f"{stats.n_flagged:,} records flagged (negative timestamps)")
    print("redundancy histogram (receivers: transmissions):")
    for k in sorted(stats.redundancy):
        print(f"  {k:>3}: {stats.redundancy[k]:,}")
    fit = stats.geometric_fit()
    if fit is not None:
        print(f"max redundancy: {stats.max_redundancy}")
        print(f"geometric fit success probability: {fit:.4f}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.list:
        for name in sorted(synth.reference_scenarios()):
            print(name)
        return EXIT_OK
    if not args.scenario:
        raise ConfigError("synth requires --scenario NAME (or --list)")
    scenario = synth.get_scenario(args.scenario, seed=getattr(args, "seed", None))
    world = synth.generate(scenario)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = args.prefix or scenario.name
    writers = {
        f"{prefix}.csv": lambda f: dataset.write_transmissions(world.records, f),
        f"{prefix}_sensors.csv": lambda f: dataset.write_sensors(world.sensors(), f),
        f"{prefix}_aircraft.csv": lambda f: dataset.write_aircraft(world.aircraft(), f),
        f"{prefix}_truthlog.csv": lambda f: synth.write_truth_log(world, f),
        f"{prefix}_clocklog.csv": lambda f: synth.write_clock_log(world, f),
    }
    for filename, write in writers.items():
        with (out_dir / filename).open("w", newline="") as f:
            _write_echo(f, cfg)
            f.write(f"# scenario={scenario.name}\n# scenario_seed={scenario.rng_seed}\n")
            write(f)
    print(
        f"{scenario.name}: {len(world.records)} records, "
        f"{len(world.scenario.sensors)} sensors, "
        f"{world.n_dropped_single} single-receiver emissions dropped -> {out_dir}"
    )
    return EXIT_OK


def _read_inputs(args, column_map=None):
    with open(args.sensors) as f:
        sensors = dataset.SensorTable(dataset.parse_sensors(f, column_map))
    aircraft = None
    if getattr(args, "aircraft", None):
        with open(args.aircraft) as f:
            aircraft = {a.aircraft_id: a for a in dataset.parse_aircraft(f, column_map)}
    return sensors, aircraft


def cmd_sync(args: argparse.Namespace, cfg: RunConfig) -> int:
    sensors, aircraft = _read_inputs(args)

    def train_records() -> Iterator[dataset.TransmissionRecord]:
        with open(args.transmissions) as f:
            records = dataset.parse_transmissions(f)
            if cfg.mask_fraction is not None:
                for is_eval, record in dataset.split_for_eval(
                    records, cfg.mask_fraction, cfg.mask_seed
                ):
                    if not is_eval:
                        yield record
            else:
                yield from records

    graph = sync_build(train_records(), sensors, aircraft, cfg)
    with open(args.snapshot_out, "w", newline="") as f:
        _write_echo(f, cfg)
        graph.save_snapshot(f)
    stats = graph.stats
    print(f"tracked pairs: {len(graph.tracked_pairs())}")
    print(f"samples: {stats.n_samples} (rejection rate {stats.rejection_rate:.4f})")
    print(f"re-initializations: {stats.n_reinits}")
    return EXIT_OK


def sync_build(records, sensors, aircraft, cfg: RunConfig) -> PairGraph:
    from .sync import build_pair_graph

    return build_pair_graph(records, sensors, aircraft, cfg.sync_config())


def cmd_locate(args: argparse.Namespace, cfg: RunConfig) -> int:
    sensors, _ = _read_inputs(args)
    with open(args.snapshot) as f:
        graph = PairGraph.load_snapshot(f, cfg.sync_config())

    answer_key: dict[int, object] = {}

    def target_records() -> Iterator[dataset.TransmissionRecord]:
        with open(args.transmissions) as f:
            records = dataset.parse_transmissions(f)
            if cfg.mask_fraction is not None:
                for is_eval, record in dataset.split_for_eval(
                    records, cfg.mask_fraction, cfg.mask_seed
                ):
                    if not is_eval:
                        continue
                    if record.truth is not None:
                        answer_key[record.record_id] = record.truth
                    # Localization must not see the held-out truth.
                    yield dataset.mask_truth(record)
            else:
                for record in records:
                    if record.truth is not None:
                        answer_key[record.record_id] = record.truth
                    yield record

    started = time.monotonic()
    predictions = run_localization(
        target_records(), graph, sensors, cfg.locate_config(), workers=cfg.workers
    )
    elapsed = time.monotonic() - started

    with open(args.predictions_out, "w", newline="") as f:
        _write_echo(f, cfg)
        locate.write_predictions(predictions, f)
    if args.answer_key_out:
        with open(args.answer_key_out, "w", newline="") as f:
            _write_echo(f, cfg)
            dataset.write_answer_key(answer_key, f)

    n_predicted = sum(1 for p in predictions if p.predicted)
    n_total = len(predictions)
    reasons: dict[str, int] = {}
    for p in predictions:
        if not p.predicted:
            reasons[p.reason] = reasons.get(p.reason, 0) + 1
    coverage = n_predicted / n_total if n_total else 0.0
    print(f"targeted {n_total} records, predicted {n_predicted} (coverage {coverage:.4f})")
    for reason in sorted(reasons):
        print(f"  no-prediction[{reason}]: {reasons[reason]}")
    print(f"wall time: {elapsed:.2f} s")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, cfg: RunConfig) -> int:
    if cfg.penalty_m is None:
        raise ConfigError("evaluate requires an explicit penalty_m (flag or config)")
    eval_cfg = evaluate.EvalConfig(
        penalty_m=cfg.penalty_m, min_coverage=cfg.min_coverage, metric=cfg.metric
    )
    with open(args.predictions) as f:
        rows = locate.parse_predictions(f)
    with open(args.answer_key) as f:
        key = dataset.parse_answer_key(f)
    predictions = [(r.record_id, r.position) for r in rows if r.position is not None]
    reasons = {r.record_id: r.status for r in rows if r.position is None}
    report = evaluate.score(predictions, key, eval_cfg, reasons)
    echo = dict(cfg.echo_items())
    sys.stdout.write(evaluate.render_text(report, echo))
    if args.report_out:
        with open(args.report_out, "w") as f:
            evaluate.emit_report(report, f, fmt="json", config_echo=echo)
    return EXIT_OK if report.pass_coverage_floor else EXIT_COVERAGE


# ---------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--output-dir", default=".")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crowdmlat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate files and print subset statistics")
    _add_common(p)
    p.add_argument("--transmissions", required=True)
    p.add_argument("--sensors", required=True)
    p.add_argument("--aircraft")
    p.add_argument("--column-map", help="JSON column-name mapping for schema drift")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--scenario")
    p.add_argument("--prefix", help="output file prefix (default: scenario name)")
    p.add_argument("--list", action="store_true", help="list scenario names")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sync", help="build pairwise clock trackers")
    _add_common(p)
    p.add_argument("--transmissions", required=True)
    p.add_argument("--sensors", required=True)
    p.add_argument("--aircraft")
    p.add_argument("--snapshot-out", required=True)
    p.add_argument("--gate-sigma", dest="gate_sigma", type=float, default=None)
    p.add_argument("--reject-limit", dest="reject_limit", type=int, default=None)
    p.add_argument("--mask-fraction", dest="mask_fraction", type=float, default=None)
    p.add_argument("--mask-seed", dest="mask_seed", type=int, default=None)
    p.set_defaults(func=cmd_sync)

    p = sub.add_parser("locate", help="localize transmissions against a snapshot")
    _add_common(p)
    p.add_argument("--transmissions", required=True)
    p.add_argument("--sensors", required=True)
    p.add_argument("--snapshot", required=True)
    p.add_argument("--predictions-out", required=True)
    p.add_argument("--answer-key-out")
    p.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    p.add_argument("--step-tol-m", dest="step_tol_m", type=float, default=None)
    p.add_argument(
        "--residual-ceiling-s", dest="residual_ceiling_s", type=float, default=None
    )
    p.add_argument(
        "--max-offset-age-s", dest="max_offset_age_s", type=float, default=None
    )
    p.add_argument(
        "--toa-sigma-ns", dest="toa_sigma_override_ns", type=float, default=None
    )
    p.add_argument(
        "--baro-constraint", dest="baro_constraint", action="store_const", const=True,
        default=None,
    )
    p.add_argument("--mask-fraction", dest="mask_fraction", type=float, default=None)
    p.add_argument("--mask-seed", dest="mask_seed", type=int, default=None)
    p.set_defaults(func=cmd_locate)

    p = sub.add_parser("evaluate", help="score predictions against an answer key")
    _add_common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--answer-key", required=True)
    p.add_argument("--report-out")
    p.add_argument("--penalty-m", dest="penalty_m", type=float, default=None)
    p.add_argument("--min-coverage", dest="min_coverage", type=float, default=None)
    p.add_argument("--metric", dest="metric", choices=["3d", "2d"], default=None)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (ConfigError, UnknownScenarioError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        ParseError,
        IntegrityError,
        ScoringError,
        OrderingError,
        UnwrapAmbiguityError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
