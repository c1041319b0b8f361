"""Scoring of position predictions against ground truth.

Two headline numbers: the RMSE over the records actually predicted, and a
truncated RMSE in which every eligible record without a prediction
contributes a fixed penalty error. The penalty couples accuracy to
coverage; note the false incentive when it is set below the achieved RMSE
(leaving records out would then improve the score), which is why penalty_m
is a mandatory explicit setting with no default, echoed in every report.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, TextIO

import numpy as np

from .errors import ScoringError
from .geo import GeoPosition, ecef_distance, geodetic_to_ecef

METRIC_3D = "3d"
METRIC_2D = "2d"


@dataclass(frozen=True)
class EvalConfig:
    penalty_m: float
    min_coverage: float = 0.5
    metric: str = METRIC_3D

    def __post_init__(self):
        if self.penalty_m <= 0:
            raise ValueError("penalty_m must be positive")
        if not (0.0 < self.min_coverage <= 1.0):
            raise ValueError("min_coverage must be in (0, 1]")
        if self.metric not in (METRIC_3D, METRIC_2D):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass
class EvalReport:
    n_eligible: int
    n_predicted: int
    coverage: float
    rmse_predicted_m: float | None
    truncated_rmse_m: float
    pass_coverage_floor: bool
    penalty_m: float
    min_coverage: float
    metric: str
    error_percentiles_m: dict[str, float] = field(default_factory=dict)
    no_prediction_reasons: dict[str, int] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "nEligible": self.n_eligible,
            "nPredicted": self.n_predicted,
            "coverage": self.coverage,
            "rmsePredictedM": self.rmse_predicted_m,
            "truncatedRmseM": self.truncated_rmse_m,
            "passCoverageFloor": self.pass_coverage_floor,
            "penaltyM": self.penalty_m,
            "minCoverage": self.min_coverage,
            "metric": self.metric,
            "errorPercentilesM": self.error_percentiles_m,
            "noPredictionReasons": self.no_prediction_reasons,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "EvalReport":
        return cls(
            n_eligible=data["nEligible"],
            n_predicted=data["nPredicted"],
            coverage=data["coverage"],
            rmse_predicted_m=data["rmsePredictedM"],
            truncated_rmse_m=data["truncatedRmseM"],
            pass_coverage_floor=data["passCoverageFloor"],
            penalty_m=data["penaltyM"],
            min_coverage=data["minCoverage"],
            metric=data["metric"],
            error_percentiles_m=dict(data["errorPercentilesM"]),
            no_prediction_reasons=dict(data["noPredictionReasons"]),
        )


def position_error(pred: GeoPosition, truth: GeoPosition, metric: str = METRIC_3D) -> float:
    """Euclidean error in meters; 2D projects out the local vertical at truth."""
    pe = geodetic_to_ecef(pred)
    te = geodetic_to_ecef(truth)
    if metric == METRIC_3D:
        return ecef_distance(pe, te)
    if metric != METRIC_2D:
        raise ValueError(f"unknown metric {metric!r}")
    lat = math.radians(truth.latitude_deg)
    lon = math.radians(truth.longitude_deg)
    up = (
        math.cos(lat) * math.cos(lon),
        math.cos(lat) * math.sin(lon),
        math.sin(lat),
    )
    d = (pe.x_m - te.x_m, pe.y_m - te.y_m, pe.z_m - te.z_m)
    vertical = d[0] * up[0] + d[1] * up[1] + d[2] * up[2]
    horizontal_sq = d[0] ** 2 + d[1] ** 2 + d[2] ** 2 - vertical**2
    return math.sqrt(max(horizontal_sq, 0.0))


def score(
    predictions: Mapping[int, GeoPosition] | Iterable[tuple[int, GeoPosition]],
    answer_key: Mapping[int, GeoPosition],
    cfg: EvalConfig,
    no_prediction_reasons: Mapping[int, str] | None = None,
) -> EvalReport:
    """Score predictions against the answer key.

    Every id in the key is an eligible record. Predictions for unknown ids
    and duplicate ids are scoring errors. Summation runs in sorted-id order
    so the result is bit-stable regardless of input ordering.
    """
    if isinstance(predictions, Mapping):
        items = list(predictions.items())
    else:
        items = list(predictions)
    by_id: dict[int, GeoPosition] = {}
    for record_id, pos in items:
        if record_id in by_id:
            raise ScoringError(f"duplicate prediction for record {record_id}")
        if record_id not in answer_key:
            raise ScoringError(f"prediction for unknown record {record_id}")
        by_id[record_id] = pos

    n_eligible = len(answer_key)
    n_predicted = len(by_id)
    errors = [
        position_error(by_id[rid], answer_key[rid], cfg.metric)
        for rid in sorted(by_id)
    ]
    sq_sum = math.fsum(e * e for e in errors)
    rmse = math.sqrt(sq_sum / n_predicted) if n_predicted else None
    n_missing = n_eligible - n_predicted
    if n_predicted == 0:
        truncated = cfg.penalty_m
    elif n_eligible == 0:
        truncated = 0.0
    else:
        truncated = math.sqrt(
            (sq_sum + cfg.penalty_m**2 * n_missing) / n_eligible
        )
    coverage = n_predicted / n_eligible if n_eligible else 0.0
    percentiles: dict[str, float] = {}
    if errors:
        p50, p90, p99 = np.percentile(np.array(errors), [50.0, 90.0, 99.0])
        percentiles = {"p50": float(p50), "p90": float(p90), "p99": float(p99)}
    reasons: dict[str, int] = {}
    if no_prediction_reasons:
        for rid, reason in no_prediction_reasons.items():
            if rid not in by_id:
                reasons[reason] = reasons.get(reason, 0) + 1
        reasons = dict(sorted(reasons.items()))
    return EvalReport(
        n_eligible=n_eligible,
        n_predicted=n_predicted,
        coverage=coverage,
        rmse_predicted_m=rmse,
        truncated_rmse_m=truncated,
        pass_coverage_floor=coverage >= cfg.min_coverage,
        penalty_m=cfg.penalty_m,
        min_coverage=cfg.min_coverage,
        metric=cfg.metric,
        error_percentiles_m=percentiles,
        no_prediction_reasons=reasons,
    )


def render_text(report: EvalReport, config_echo: Mapping[str, object] | None = None) -> str:
    lines = [
        "evaluation report",
        "-----------------",
        f"eligible records   : {report.n_eligible}",
        f"predicted          : {report.n_predicted}",
        f"coverage           : {report.coverage:.4f}"
        f" (floor {report.min_coverage:.2f}: {'pass' if report.pass_coverage_floor else 'FAIL'})",
        f"rmse (predicted)   : "
        + (f"{report.rmse_predicted_m:.2f} m" if report.rmse_predicted_m is not None else "n/a"),
        f"truncated rmse     : {report.truncated_rmse_m:.2f} m (penalty {report.penalty_m:g} m)",
        f"error metric       : {report.metric}",
    ]
    if report.error_percentiles_m:
        p = report.error_percentiles_m
        lines.append(
            f"error percentiles  : p50 {p['p50']:.2f} m, p90 {p['p90']:.2f} m, p99 {p['p99']:.2f} m"
        )
    if report.no_prediction_reasons:
        lines.append("no-prediction reasons:")
        for reason, count in report.no_prediction_reasons.items():
            lines.append(f"  {reason:<18}: {count}")
    if config_echo:
        lines.append("config:")
        for key in sorted(config_echo):
            lines.append(f"  {key} = {config_echo[key]}")
    return "\n".join(lines) + "\n"


def emit_report(
    report: EvalReport,
    stream: TextIO,
    fmt: str = "text",
    config_echo: Mapping[str, object] | None = None,
) -> None:
    """Write the report as a human-readable table or a JSON document."""
    if fmt == "text":
        stream.write(render_text(report, config_echo))
    elif fmt == "json":
        payload = report.to_json_dict()
        if config_echo:
            payload["config"] = {k: config_echo[k] for k in sorted(config_echo)}
        json.dump(payload, stream, indent=2, sort_keys=True)
        stream.write("\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
