"""Deterministic annotation pipeline: filter -> parse -> verify -> select
-> generate -> correct, over pluggable model clients.

Every processed object ends in exactly one of two states: dropped, with a
single audit record naming the stage and reason, or emitted as one or
more dataset samples.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .clients import ClientError, ClientSchemaError, ClientSuite, Detection
from .geometry import Box, ImageDims, area_ratio, iou
from .evaluation import TaskCategory

log = logging.getLogger(__name__)

FUNCTION_PREFIX = "function:"
ORDINAL_PREFIX = "ordinal:"
SPATIAL_PREFIX = "spatial:"
COMPARE_PREFIX = "compare:"

MIN_SIDE = 1024
MAX_SIDE = 2048
MIN_OBJECTS = 5


@dataclass(frozen=True)
class ObjectRecord:
    """One annotated object: attributes, box, category, description phrase,
    relation strings."""

    attributes: tuple[str, ...]
    box: Box | None
    category: str
    description: str
    relations: tuple[str, ...]

    def __post_init__(self):
        if not self.category:
            raise ValueError("category must be non-empty")
        if not self.description:
            raise ValueError("description must be non-empty")

    def intrinsic_attributes(self) -> tuple[str, ...]:
        return tuple(a for a in self.attributes if not a.startswith(FUNCTION_PREFIX))

    def to_payload(self) -> dict:
        return {
            "category": self.category,
            "attributes": list(self.attributes),
            "relations": list(self.relations),
            "description": self.description,
            "box": self.box.as_list() if self.box else None,
        }


@dataclass(frozen=True)
class ImageRecord:
    image_ref: str
    dims: ImageDims
    objects: tuple[ObjectRecord, ...]


@dataclass(frozen=True)
class ChecklistVerdict:
    category: bool
    attributes: bool
    relations: bool
    description: bool

    @property
    def all_pass(self) -> bool:
        return self.category and self.attributes and self.relations and self.description

    def failed_items(self) -> list[str]:
        return [k for k in ("category", "attributes", "relations", "description")
                if not getattr(self, k)]


@dataclass(frozen=True)
class CandidateExpression:
    object_index: int
    task: TaskCategory
    text: str
    consistency: bool | None = None
    uniqueness: bool | None = None

    @property
    def emitted(self) -> bool:
        return bool(self.consistency) and bool(self.uniqueness)


@dataclass(frozen=True)
class PipelineConfig:
    min_categories: int = 2
    s_min: float = 0.35
    uniqueness_iou: float = 0.5
    candidate_count: int = 3
    max_inflight: int = 8
    retry_attempts: int = 3
    retry_backoff: float = 0.5


@dataclass
class AuditRecord:
    image_ref: str
    object_index: int | None
    stage: str
    verdict: str
    reason: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "image_ref": self.image_ref,
                "object_index": self.object_index,
                "stage": self.stage,
                "verdict": self.verdict,
                "reason": self.reason,
            }
        )


def filter_image(
    dims: ImageDims,
    objects: list[ObjectRecord] | None,
    min_categories: int = 2,
) -> tuple[bool, str | None]:
    """Image admission rules, checked in order: resolution, category
    diversity, object count. objects=None checks resolution only."""
    lo, hi = min(dims.width, dims.height), max(dims.width, dims.height)
    if lo < MIN_SIDE or hi > MAX_SIDE:
        return False, "resolution"
    if objects is None:
        return True, None
    if len({o.category for o in objects}) < min_categories:
        return False, "category-diversity"
    if len(objects) < MIN_OBJECTS:
        return False, "object-count"
    return True, None


class _Retrier:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg

    def __call__(self, fn, *args):
        last = None
        for attempt in range(1, self.cfg.retry_attempts + 1):
            try:
                return fn(*args), attempt
            except ClientError as e:
                last = e
                if attempt < self.cfg.retry_attempts:
                    time.sleep(self.cfg.retry_backoff * 2 ** (attempt - 1))
        raise last


def parse_image(
    image_ref: str,
    dims: ImageDims,
    suite: ClientSuite,
    cfg: PipelineConfig = PipelineConfig(),
    audit: list[AuditRecord] | None = None,
) -> ImageRecord:
    """Obtain raw properties from the parser, ground each description
    phrase, and keep objects whose best grounding score reaches s_min."""
    retry = _Retrier(cfg)
    raw, _ = retry(suite.parser.parse, image_ref)
    objects = []
    for idx, rec in enumerate(raw):
        try:
            obj = ObjectRecord(
                attributes=tuple(rec.get("attributes", [])),
                box=None,
                category=str(rec["category"]),
                description=str(rec["description"]),
                relations=tuple(rec.get("relations", [])),
            )
        except (KeyError, ValueError) as e:
            raise ClientSchemaError("objects", f"object {idx}: {e}") from e
        try:
            detections, _ = retry(suite.grounder.ground, image_ref, obj.description)
        except ClientError:
            if audit is not None:
                audit.append(AuditRecord(image_ref, idx, "client-failure", "drop",
                                         "grounder-unreachable"))
            objects.append(None)
            continue
        best = max(detections, key=lambda d: d.score, default=None)
        if best is None or best.score < cfg.s_min:
            if audit is not None:
                audit.append(AuditRecord(image_ref, idx, "ground", "drop",
                                         "low-grounding-score"))
            objects.append(None)
            continue
        objects.append(ObjectRecord(obj.attributes, Box(*best.box), obj.category,
                                    obj.description, obj.relations))
    kept = tuple(o for o in objects if o is not None)
    return ImageRecord(image_ref=image_ref, dims=dims, objects=kept)


def verify_object(
    obj: ObjectRecord,
    image_ref: str,
    suite: ClientSuite,
    cfg: PipelineConfig = PipelineConfig(),
) -> ChecklistVerdict:
    """Build the four-item checklist and query the verifier. The object is
    retained only on a strict conjunction of passes."""
    checklist = {
        "category": obj.category,
        "attributes": list(obj.attributes),
        "relations": list(obj.relations),
        "description": obj.description,
    }
    retry = _Retrier(cfg)
    raw, _ = retry(suite.verifier.verify_checklist, image_ref,
                   obj.box.as_list(), checklist)
    missing = [k for k in ("category", "attributes", "relations", "description")
               if k not in raw]
    if missing:
        raise ClientSchemaError("verdict", f"missing items: {missing}")
    return ChecklistVerdict(
        category=bool(raw["category"]),
        attributes=bool(raw["attributes"]),
        # An empty relation list passes vacuously.
        relations=bool(raw["relations"]) or not obj.relations,
        description=bool(raw["description"]),
    )


def select_task(target: ObjectRecord, context: ImageRecord) -> TaskCategory:
    """Rule-based task assignment, evaluated in fixed priority order:
    Attribute, Interaction, Position, Relation, Commonsense, Reject."""
    others = [o for o in context.objects if o is not target]
    same_cat = [o for o in others if o.category == target.category]
    categories = {o.category for o in context.objects}

    # Attribute: same-category competition plus an intrinsic attribute no
    # other instance of the category shares.
    if same_cat:
        shared = {a for o in same_cat for a in o.intrinsic_attributes()}
        if any(a not in shared for a in target.intrinsic_attributes()):
            return TaskCategory.ATTRIBUTE

    # Interaction: ordinal identity within a homogeneous group of >= 3.
    if len(same_cat) >= 2 and any(
        r.startswith(ORDINAL_PREFIX) for r in target.relations
    ):
        return TaskCategory.INTERACTION

    # Position: a unique spatial relation to a heterogeneous anchor, amid
    # same-category distractors.
    if same_cat:
        for r in target.relations:
            if not r.startswith(SPATIAL_PREFIX):
                continue
            anchor = r.split(":", 2)[1]
            if anchor == target.category or anchor not in categories:
                continue
            if all(r not in o.relations for o in same_cat):
                return TaskCategory.POSITION

    # Relation: a comparative link to an attribute-comparable anchor.
    for r in target.relations:
        if r.startswith(COMPARE_PREFIX):
            anchor = r.split(":", 3)[1]
            if anchor in categories and anchor != target.category:
                return TaskCategory.RELATION

    # Commonsense: a salient functional tag.
    if any(a.startswith(FUNCTION_PREFIX) for a in target.attributes):
        return TaskCategory.COMMONSENSE

    return TaskCategory.REJECT


def correct_expression(
    cand: CandidateExpression,
    target: ObjectRecord,
    image_ref: str,
    suite: ClientSuite,
    cfg: PipelineConfig = PipelineConfig(),
) -> CandidateExpression:
    """Two-stage verification: semantic consistency via the verifier and
    uniqueness via the grounder (exactly one confident detection matching
    the target box at IoU >= the uniqueness floor).

    For Reject expressions the uniqueness check inverts: the expression
    must ground to nothing."""
    if not cand.text:
        raise ValueError("candidate expression text must be non-empty")
    retry = _Retrier(cfg)
    box = target.box.as_list() if target.box else None
    consistent, _ = retry(suite.verifier.verify_expression, image_ref, box, cand.text)
    detections, _ = retry(suite.grounder.ground, image_ref, cand.text)
    confident = [d for d in detections if d.score >= cfg.s_min]
    if cand.task == TaskCategory.REJECT:
        unique = not confident
    else:
        unique = (
            len(confident) == 1
            and iou(Box(*confident[0].box), target.box) >= cfg.uniqueness_iou
        )
    return CandidateExpression(
        object_index=cand.object_index,
        task=cand.task,
        text=cand.text,
        consistency=bool(consistent),
        uniqueness=unique,
    )


def load_manifest(path: str | Path) -> list[dict]:
    """Manifest: JSON array or JSONL of {image_ref, width, height}."""
    text = Path(path).read_text().strip()
    if text.startswith("["):
        entries = json.loads(text)
    else:
        entries = [json.loads(line) for line in text.splitlines() if line.strip()]
    for i, e in enumerate(entries):
        for key in ("image_ref", "width", "height"):
            if key not in e:
                raise ValueError(f"manifest entry {i}: missing {key!r}")
    return entries


@dataclass
class PipelineResult:
    samples: list[dict] = field(default_factory=list)
    audit: list[AuditRecord] = field(default_factory=list)

    @property
    def emitted_object_count(self) -> int:
        return len({(s["image_ref"], s["meta"]["object_index"]) for s in self.samples})


def _process_image(
    entry: dict, suite: ClientSuite, cfg: PipelineConfig
) -> tuple[list[dict], list[AuditRecord]]:
    image_ref = entry["image_ref"]
    dims = ImageDims(int(entry["width"]), int(entry["height"]))
    samples: list[dict] = []
    audit: list[AuditRecord] = []
    retry = _Retrier(cfg)

    keep, reason = filter_image(dims, None, cfg.min_categories)
    if not keep:
        audit.append(AuditRecord(image_ref, None, "filter", "drop", reason))
        return samples, audit

    try:
        record = parse_image(image_ref, dims, suite, cfg, audit)
    except ClientError:
        audit.append(AuditRecord(image_ref, None, "client-failure", "drop",
                                 "parser-unreachable"))
        return samples, audit

    keep, reason = filter_image(dims, list(record.objects), cfg.min_categories)
    if not keep:
        # Content rules failed: the whole image is dropped; account for
        # each already-grounded object under the filter stage.
        for idx in range(len(record.objects)):
            audit.append(AuditRecord(image_ref, idx, "filter", "drop", reason))
        return samples, audit

    for idx, obj in enumerate(record.objects):
        try:
            verdict = verify_object(obj, image_ref, suite, cfg)
        except ClientError:
            audit.append(AuditRecord(image_ref, idx, "client-failure", "drop",
                                     "verifier-unreachable"))
            continue
        if not verdict.all_pass:
            audit.append(AuditRecord(image_ref, idx, "verify", "drop",
                                     "checklist:" + ",".join(verdict.failed_items())))
            continue

        task = select_task(obj, record)
        try:
            texts, _ = retry(suite.generator.generate, image_ref, obj.to_payload(),
                             task.value, cfg.candidate_count)
        except ClientError:
            audit.append(AuditRecord(image_ref, idx, "client-failure", "drop",
                                     "generator-unreachable"))
            continue
        if not texts:
            audit.append(AuditRecord(image_ref, idx, "generate", "drop",
                                     "no-candidates"))
            continue

        passing = []
        try:
            for text in texts:
                cand = CandidateExpression(object_index=idx, task=task, text=text)
                cand = correct_expression(cand, obj, image_ref, suite, cfg)
                if cand.emitted:
                    passing.append(cand)
        except ClientError:
            audit.append(AuditRecord(image_ref, idx, "client-failure", "drop",
                                     "correction-unreachable"))
            continue
        if not passing:
            audit.append(AuditRecord(image_ref, idx, "correct", "drop",
                                     "no-candidate-survived"))
            continue

        same_cat = sum(1 for o in record.objects if o is not obj
                       and o.category == obj.category)
        for ci, cand in enumerate(passing):
            gt = None if task == TaskCategory.REJECT else obj.box.as_list()
            meta = {
                "object_index": idx,
                "distractor_count": same_cat,
                "hop_count": 1 if task in (TaskCategory.POSITION, TaskCategory.RELATION) else 0,
            }
            if gt is not None:
                meta["area_ratio"] = area_ratio(obj.box, dims)
            samples.append(
                {
                    "id": f"{image_ref}#obj{idx}#c{ci}",
                    "image_ref": image_ref,
                    "image_dims": {"width": dims.width, "height": dims.height},
                    "expression": cand.text,
                    "task": task.value,
                    "gt": gt,
                    "meta": meta,
                    "coord_units": "pixel",
                }
            )
    return samples, audit


def run_pipeline(
    manifest_path: str | Path,
    suite: ClientSuite,
    cfg: PipelineConfig = PipelineConfig(),
    out_dir: str | Path | None = None,
) -> PipelineResult:
    """Run the full pipeline over a manifest; optionally stream the sample
    and audit JSONL files into out_dir."""
    entries = load_manifest(manifest_path)
    result = PipelineResult()
    with ThreadPoolExecutor(max_workers=max(1, cfg.max_inflight)) as pool:
        for samples, audit in pool.map(
            lambda e: _process_image(e, suite, cfg), entries
        ):
            result.samples.extend(samples)
            result.audit.extend(audit)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "samples.jsonl", "w") as f:
            for s in result.samples:
                f.write(json.dumps(s) + "\n")
        with open(out / "audit.jsonl", "w") as f:
            for a in result.audit:
                f.write(a.to_json() + "\n")
    log.info("pipeline: %d samples emitted, %d audit records",
             len(result.samples), len(result.audit))
    return result
