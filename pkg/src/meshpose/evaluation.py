"""Pose metrics and the benchmark report harness.

Accuracy counts a sample as correct when its geodesic rotation error is
strictly below the threshold; errors are computed in radians and reported in
degrees (six decimal places in serialized output).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, geodesic_distance, pose_to_rotation

PI_6 = math.pi / 6.0
PI_18 = math.pi / 18.0


def _pairwise_errors(predictions, ground_truths) -> np.ndarray:
    if len(predictions) != len(ground_truths):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(ground_truths)} ground truths")
    errs = np.empty(len(predictions))
    for i, (pred, gt) in enumerate(zip(predictions, ground_truths)):
        r_pred = pose_to_rotation(pred) if isinstance(pred, Pose) else np.asarray(pred)
        r_gt = pose_to_rotation(gt) if isinstance(gt, Pose) else np.asarray(gt)
        errs[i] = geodesic_distance(r_pred, r_gt)
    return errs


def pose_accuracy(predictions, ground_truths, threshold: float) -> float:
    """Fraction of samples with geodesic error strictly below ``threshold``."""
    errs = _pairwise_errors(predictions, ground_truths)
    if errs.size == 0:
        raise ValueError("pose_accuracy requires at least one sample")
    return float(np.mean(errs < threshold))


def median_error(predictions, ground_truths) -> float:
    """Median geodesic error in degrees (even length: mean of middle two)."""
    errs = _pairwise_errors(predictions, ground_truths)
    if errs.size == 0:
        raise ValueError("median_error requires at least one sample")
    return float(np.degrees(np.median(errs)))


@dataclass
class MetricBlock:
    acc_pi_6: float
    acc_pi_18: float
    median_error_degrees: float
    count: int

    def as_dict(self) -> dict:
        return {
            "acc_pi_6": round(self.acc_pi_6, 6),
            "acc_pi_18": round(self.acc_pi_18, 6),
            "median_error_degrees": round(self.median_error_degrees, 6),
            "count": self.count,
        }


@dataclass
class EvalReport:
    overall: MetricBlock
    per_category: dict = field(default_factory=dict)
    per_domain: dict = field(default_factory=dict)
    unjoinable: list = field(default_factory=list)
    thresholds: tuple = (PI_6, PI_18)
    config_echo: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "overall": self.overall.as_dict(),
            "per_category": {k: v.as_dict() for k, v in sorted(self.per_category.items())},
            "per_domain": {k: v.as_dict() for k, v in sorted(self.per_domain.items())},
            "errors": {"unjoinable_ids": sorted(self.unjoinable)},
            "thresholds": [round(t, 9) for t in self.thresholds],
            "config": self.config_echo,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["group", "name", "acc_pi_6", "acc_pi_18", "median_error_degrees", "count"])
        rows = [("overall", "all", self.overall)]
        rows += [("category", k, v) for k, v in sorted(self.per_category.items())]
        rows += [("domain", k, v) for k, v in sorted(self.per_domain.items())]
        for group, name, block in rows:
            writer.writerow(
                [group, name, f"{block.acc_pi_6:.6f}", f"{block.acc_pi_18:.6f}", f"{block.median_error_degrees:.6f}", block.count]
            )
        return buf.getvalue()


def _metric_block(errors: np.ndarray) -> MetricBlock:
    return MetricBlock(
        acc_pi_6=float(np.mean(errors < PI_6)),
        acc_pi_18=float(np.mean(errors < PI_18)),
        median_error_degrees=float(np.degrees(np.median(errors))),
        count=int(errors.size),
    )


def _pose_from_record(record: dict) -> Pose:
    p = record["pose"]
    return Pose(p["azimuth"], p["elevation"], p["theta"], p["distance"])


def evaluate_records(predictions: list[dict], manifest_entries: list[dict], config_echo: dict | None = None) -> EvalReport:
    """Join prediction records to manifest entries by sample_id and compute
    all metrics, grouped by category and domain tag.  Predictions without a
    manifest entry are listed in the error section and excluded."""
    by_id = {e["sample_id"]: e for e in manifest_entries}
    joined = []
    unjoinable = []
    for rec in predictions:
        entry = by_id.get(rec["sample_id"])
        if entry is None:
            unjoinable.append(rec["sample_id"])
            continue
        err = geodesic_distance(
            pose_to_rotation(_pose_from_record(rec)), pose_to_rotation(_pose_from_record(entry))
        )
        joined.append((entry["category"], entry["domain_tag"], err))
    if not joined:
        raise ValueError("no prediction joined a manifest entry")

    joined.sort(key=lambda t: (t[0], t[1], t[2]))
    errs = np.array([e for _, _, e in joined])
    report = EvalReport(overall=_metric_block(errs), unjoinable=unjoinable, config_echo=config_echo or {})
    for key_idx, target in ((0, report.per_category), (1, report.per_domain)):
        groups: dict[str, list] = {}
        for row in joined:
            groups.setdefault(row[key_idx], []).append(row[2])
        for name, es in groups.items():
            target[name] = _metric_block(np.array(es))
    return report


def evaluate_run(predictions_file, manifest_file, out_json=None, out_csv=None, config_echo=None) -> EvalReport:
    """File-level wrapper over :func:`evaluate_records`; optionally writes
    report.json / report.csv."""
    predictions = _read_jsonl(predictions_file)
    manifest = _read_jsonl(manifest_file)
    report = evaluate_records(predictions, manifest, config_echo=config_echo)
    if out_json is not None:
        Path(out_json).write_text(report.to_json())
    if out_csv is not None:
        Path(out_csv).write_text(report.to_csv())
    return report


def compare_reports(base: EvalReport | dict, other: EvalReport | dict, regression_threshold: float = 0.0) -> dict:
    """Diff two reports; flags metric regressions beyond the threshold."""
    a = base.as_dict() if isinstance(base, EvalReport) else base
    b = other.as_dict() if isinstance(other, EvalReport) else other
    diffs = []
    regressions = []

    def walk(prefix, da, db):
        for key in sorted(set(da) | set(db)):
            va, vb = da.get(key), db.get(key)
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(va, dict) and isinstance(vb, dict):
                walk(name, va, vb)
            elif va != vb:
                diffs.append({"metric": name, "base": va, "other": vb})
                if isinstance(va, (int, float)) and isinstance(vb, (int, float)):
                    if key.startswith("acc") and vb < va - regression_threshold:
                        regressions.append(name)
                    if key.startswith("median") and vb > va + regression_threshold:
                        regressions.append(name)

    walk("", {k: v for k, v in a.items() if k != "config"}, {k: v for k, v in b.items() if k != "config"})
    return {"diffs": diffs, "regressions": regressions, "identical": not diffs}


def _read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def prediction_record(sample_id: str, estimate, elapsed_ms: float | None = None) -> dict:
    """predictions.jsonl line (shared schema with the inference CLI)."""
    rec = {
        "sample_id": sample_id,
        "pose": {
            "azimuth": round(estimate.pose.azimuth, 6),
            "elevation": round(estimate.pose.elevation, 6),
            "theta": round(estimate.pose.theta, 6),
            "distance": round(estimate.pose.distance, 6),
        },
        "loss": round(estimate.final_loss, 6),
        "confidence": round(estimate.confidence, 6),
        "iterations": estimate.iterations_used,
        "init_index": estimate.init_index,
    }
    if elapsed_ms is not None:
        rec["time_ms"] = round(elapsed_ms, 3)
    return rec
