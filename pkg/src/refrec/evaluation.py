"""Benchmark evaluation protocol: per-task mean accuracy over IoU
thresholds 0.50-0.90, rejection accuracy, aggregate scores, and
difficulty-bucketed breakdowns.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .geometry import Box, ImageDims, area_ratio, iou
from .response import RejectionLexicon, detect_rejection, parse

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(9))

# Report column order mirrors the standard leaderboard layout.
REPORT_COLUMNS = (
    "acc_p",
    "acc_o",
    "Attribute",
    "Position",
    "Interaction",
    "acc_api",
    "Relation",
    "Commonsense",
    "Reject",
    "acc_rc",
)


class TaskCategory(str, Enum):
    ATTRIBUTE = "Attribute"
    POSITION = "Position"
    INTERACTION = "Interaction"
    RELATION = "Relation"
    COMMONSENSE = "Commonsense"
    REJECT = "Reject"


GROUNDED_TASKS = (
    TaskCategory.ATTRIBUTE,
    TaskCategory.POSITION,
    TaskCategory.INTERACTION,
    TaskCategory.RELATION,
    TaskCategory.COMMONSENSE,
)
PERCEPTION_TASKS = GROUNDED_TASKS[:3]
REASONING_TASKS = GROUNDED_TASKS[3:]


class SchemaError(ValueError):
    """Raised on malformed dataset or prediction records."""


@dataclass(frozen=True)
class Sample:
    id: str
    image_ref: str
    image_dims: ImageDims
    expression: str
    task: TaskCategory
    gt: Box | None
    meta: dict | None = None
    coord_units: str = "pixel"

    def __post_init__(self):
        if (self.task == TaskCategory.REJECT) != (self.gt is None):
            raise SchemaError(
                f"sample {self.id}: Reject task and absent gt must coincide"
            )
        if self.coord_units not in ("pixel", "normalized"):
            raise SchemaError(f"sample {self.id}: bad coord_units {self.coord_units!r}")
        if self.meta and self.gt is not None and "area_ratio" in self.meta:
            expected = area_ratio(self.gt, self.image_dims)
            if abs(self.meta["area_ratio"] - expected) > 1e-6:
                raise SchemaError(
                    f"sample {self.id}: meta.area_ratio {self.meta['area_ratio']} "
                    f"!= computed {expected}"
                )


def load_samples(path: str | Path) -> list[Sample]:
    """Read a Sample JSONL dataset; normalized coordinates are scaled to
    pixels at load time."""
    samples = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}:{lineno}: invalid JSON: {e}") from e
        samples.append(_sample_from_record(rec, f"{path}:{lineno}"))
    return samples


def _sample_from_record(rec: dict, where: str) -> Sample:
    try:
        dims = ImageDims(int(rec["image_dims"]["width"]), int(rec["image_dims"]["height"]))
        units = rec.get("coord_units", "pixel")
        gt = rec.get("gt")
        if gt is not None:
            coords = [float(c) for c in gt]
            if units == "normalized":
                coords = [
                    coords[0] * dims.width,
                    coords[1] * dims.height,
                    coords[2] * dims.width,
                    coords[3] * dims.height,
                ]
            gt = Box(*coords)
        return Sample(
            id=str(rec["id"]),
            image_ref=str(rec["image_ref"]),
            image_dims=dims,
            expression=str(rec["expression"]),
            task=TaskCategory(rec["task"]),
            gt=gt,
            meta=rec.get("meta"),
            coord_units="pixel",
        )
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{where}: {e}") from e


def load_predictions(path: str | Path) -> dict[str, str]:
    """Read a prediction JSONL file of {id, response_text} records."""
    preds = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            preds[str(rec["id"])] = str(rec["response_text"])
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise SchemaError(f"{path}:{lineno}: {e}") from e
    return preds


def _sample_passes(sample: Sample, text: str, tau: float) -> bool:
    parsed = parse(text)
    if not parsed.is_box:
        return False
    return iou(parsed.box, sample.gt) >= tau


def macc(pairs: list[tuple[Sample, str]]) -> float | None:
    """Mean accuracy over the nine IoU thresholds, as a percentage.

    Pass condition per threshold is IoU >= tau. Returns None on an
    empty task set (explicit empty marker, not zero).
    """
    if not pairs:
        return None
    ious = []
    for sample, text in pairs:
        if sample.gt is None:
            raise ValueError(f"sample {sample.id} has no gt box; not a grounded task")
        parsed = parse(text)
        ious.append(iou(parsed.box, sample.gt) if parsed.is_box else -1.0)
    per_threshold = [
        sum(v >= tau for v in ious) / len(ious) for tau in IOU_THRESHOLDS
    ]
    return 100.0 * sum(per_threshold) / len(per_threshold)


def rej_acc(
    pairs: list[tuple[Sample, str]],
    lex: RejectionLexicon | None = None,
    mode: str = "grounding",
) -> float | None:
    """Rejection accuracy over Reject samples, as a percentage.

    grounding mode: correct iff the response produces no valid box or
    states absence. classification mode: correct iff the response answers
    "no" to the binary presence question.
    """
    if not pairs:
        return None
    for sample, _ in pairs:
        if sample.task != TaskCategory.REJECT:
            raise ValueError(f"sample {sample.id} is not a Reject sample")
    if mode == "grounding":
        hits = sum(detect_rejection(text, lex) for _, text in pairs)
    elif mode == "classification":
        hits = sum(_answers_no(text) for _, text in pairs)
    else:
        raise ValueError(f"unknown rejection mode {mode!r}")
    return 100.0 * hits / len(pairs)


def _answers_no(text: str) -> bool:
    words = [w.strip(".,!?:;\"'()").lower() for w in text.split()]
    return "no" in words and "yes" not in words


@dataclass
class MetricsReport:
    """Per-task scores plus the four aggregates; None marks an empty or
    unavailable entry."""

    per_task: dict[str, float | None]
    acc_api: float | None = None
    acc_rc: float | None = None
    acc_p: float | None = None
    acc_o: float | None = None
    counts: dict[str, int] = field(default_factory=dict)
    buckets: dict[str, list[dict]] = field(default_factory=dict)
    notes: tuple[str, ...] = (
        "Evaluation passes at IoU >= threshold (non-strict); the training "
        "reward uses strict IoU > threshold.",
    )

    def to_dict(self) -> dict:
        return {
            "per_task": self.per_task,
            "aggregates": {
                "acc_api": self.acc_api,
                "acc_rc": self.acc_rc,
                "acc_p": self.acc_p,
                "acc_o": self.acc_o,
            },
            "counts": self.counts,
            "buckets": self.buckets,
            "notes": list(self.notes),
        }


def _mean_or_none(values: list[float | None]) -> float | None:
    if any(v is None for v in values):
        return None
    return sum(values) / len(values)


def aggregate(per_task: dict[str, float | None]) -> MetricsReport:
    """Fold six per-task scores into the aggregate columns.

    Missing (None) entries propagate: any aggregate depending on a
    missing score is marked unavailable rather than imputed.
    """
    scores = {t.value: per_task.get(t.value) for t in TaskCategory}
    report = MetricsReport(per_task=scores)
    report.acc_api = _mean_or_none([scores[t.value] for t in PERCEPTION_TASKS])
    report.acc_rc = _mean_or_none([scores[t.value] for t in REASONING_TASKS])
    report.acc_p = _mean_or_none([scores[t.value] for t in GROUNDED_TASKS])
    report.acc_o = _mean_or_none([scores[t.value] for t in TaskCategory])
    return report


def evaluate_predictions(
    samples: list[Sample],
    predictions: dict[str, str],
    lex: RejectionLexicon | None = None,
    rejection_mode: str = "grounding",
    bucket_edges: dict[str, list[float]] | None = None,
) -> MetricsReport:
    """Full protocol: per-task mAcc / rejection accuracy, aggregates, and
    optional difficulty buckets. Samples without a prediction count as
    failures (empty response)."""
    by_task: dict[TaskCategory, list[tuple[Sample, str]]] = {t: [] for t in TaskCategory}
    for s in samples:
        by_task[s.task].append((s, predictions.get(s.id, "")))

    per_task: dict[str, float | None] = {}
    for t in GROUNDED_TASKS:
        per_task[t.value] = macc(by_task[t])
    per_task[TaskCategory.REJECT.value] = rej_acc(
        by_task[TaskCategory.REJECT], lex, rejection_mode
    )

    report = aggregate(per_task)
    report.counts = {t.value: len(by_task[t]) for t in TaskCategory}

    if bucket_edges:
        grounded = [p for t in GROUNDED_TASKS for p in by_task[t]]
        for factor, edges in bucket_edges.items():
            report.buckets[factor] = bucketize(grounded, factor, edges)
    return report


_FACTOR_KEYS = {"distractors": "distractor_count", "area": "area_ratio", "hops": "hop_count"}


def bucketize(
    pairs: list[tuple[Sample, str]], factor: str, edges: list[float]
) -> list[dict]:
    """Partition grounded samples into half-open [lo, hi) buckets on a
    difficulty factor and compute mAcc per bucket. The final bucket is
    unbounded above. Samples missing the meta field land in an
    'unbucketed' row."""
    if factor not in _FACTOR_KEYS:
        raise ValueError(f"unknown factor {factor!r}")
    if list(edges) != sorted(edges) or len(set(edges)) != len(edges):
        raise ValueError("edges must be strictly increasing")
    key = _FACTOR_KEYS[factor]
    bounds = [(edges[i], edges[i + 1]) for i in range(len(edges) - 1)]
    bounds.append((edges[-1], math.inf))
    buckets: list[list] = [[] for _ in bounds]
    unbucketed = 0
    for sample, text in pairs:
        value = (sample.meta or {}).get(key)
        if value is None:
            unbucketed += 1
            continue
        for i, (lo, hi) in enumerate(bounds):
            if lo <= value < hi:
                buckets[i].append((sample, text))
                break
        else:
            unbucketed += 1
    rows = []
    for (lo, hi), members in zip(bounds, buckets):
        rows.append(
            {
                "lo": lo,
                "hi": None if math.isinf(hi) else hi,
                "count": len(members),
                "macc": macc(members),
            }
        )
    rows.append({"lo": None, "hi": None, "count": unbucketed, "macc": None})
    return rows


def _fmt_cell(v: float | None) -> str:
    return "-" if v is None else f"{v:.1f}"


def render_report(report: MetricsReport, fmt: str = "markdown") -> str:
    """Serialize a report deterministically as markdown, csv, or json.

    Markdown and csv round to one decimal; json keeps full precision.
    """
    values = {
        "acc_p": report.acc_p,
        "acc_o": report.acc_o,
        "acc_api": report.acc_api,
        "acc_rc": report.acc_rc,
        **report.per_task,
    }
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    header = ["Acc_p", "Acc_o", "Attribute", "Position", "Interaction",
              "Acc_API", "Relation", "Commonsense", "Reject", "Acc_RC"]
    row = [_fmt_cell(values[c]) for c in REPORT_COLUMNS]
    if fmt == "csv":
        lines = [",".join(header), ",".join(row)]
        return "\n".join(lines) + "\n"
    if fmt == "markdown":
        lines = []
        for note in report.notes:
            lines.append(f"> {note}")
        if report.notes:
            lines.append("")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        lines.append("| " + " | ".join(row) + " |")
        for factor, rows in sorted(report.buckets.items()):
            lines.append("")
            lines.append(f"### Difficulty buckets: {factor}")
            lines.append("| bucket | count | mAcc |")
            lines.append("|---|---|---|")
            for r in rows:
                if r["lo"] is None:
                    name = "unbucketed"
                elif r["hi"] is None:
                    name = f"[{r['lo']:g}, inf)"
                else:
                    name = f"[{r['lo']:g}, {r['hi']:g})"
                lines.append(f"| {name} | {r['count']} | {_fmt_cell(r['macc'])} |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")
