"""Parsing of raw model responses into structured outcomes.

A well-formed response is `<think>...</think><answer>[x1, y1, x2, y2]</answer>`.
The answer segment may alternatively declare the target absent (empty,
`none`/`null`, or a rejection-lexicon phrase), which parses as Abstain.
Anything else is Malformed with a single reason code.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import Box, InvalidBoxError

# Malformation reason codes, in priority order of detection.
MISSING_TAGS = "missing-tags"
BAD_TAG_ORDER = "bad-tag-order"
UNPARSEABLE_COORDINATES = "unparseable-coordinates"
DEGENERATE_BOX = "degenerate-box"
TRAILING_GARBAGE = "trailing-garbage"

REASON_CODES = (
    MISSING_TAGS,
    BAD_TAG_ORDER,
    UNPARSEABLE_COORDINATES,
    DEGENERATE_BOX,
    TRAILING_GARBAGE,
)

DEFAULT_REJECTION_PHRASES = (
    "not present",
    "does not exist",
    "no such object",
    "cannot find",
    "absent",
)

# Plain integers/decimals only; scientific notation is rejected.
_NUMBER = r"-?\d+(?:\.\d+)?"
_QUAD_RE = re.compile(
    r"\[\s*(%s)\s*,\s*(%s)\s*,\s*(%s)\s*,\s*(%s)\s*\]" % ((_NUMBER,) * 4)
)
_THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL)
_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)


@dataclass(frozen=True)
class RejectionLexicon:
    """Ordered, case-insensitive phrases declaring the target absent."""

    phrases: tuple[str, ...] = DEFAULT_REJECTION_PHRASES

    def __post_init__(self):
        cleaned = tuple(p.strip() for p in self.phrases)
        if not cleaned or any(not p for p in cleaned):
            raise ValueError("lexicon must be non-empty with non-empty phrases")
        object.__setattr__(self, "phrases", cleaned)

    def matches(self, text: str) -> bool:
        lowered = text.lower()
        return any(p.lower() in lowered for p in self.phrases)

    @classmethod
    def from_file(cls, path: str | Path) -> "RejectionLexicon":
        data = json.loads(Path(path).read_text())
        if not isinstance(data, list):
            raise ValueError(f"rejection lexicon file must hold a JSON array: {path}")
        return cls(tuple(str(p) for p in data))


@dataclass(frozen=True)
class ParsedResponse:
    """Structured outcome of parsing one response text.

    kind is one of "box", "abstain", "malformed". box is set only for
    kind "box"; reason only for kind "malformed".
    """

    think_text: str
    kind: str
    box: Box | None = None
    reason: str | None = None

    @property
    def is_box(self) -> bool:
        return self.kind == "box"

    @property
    def is_abstain(self) -> bool:
        return self.kind == "abstain"

    @property
    def is_malformed(self) -> bool:
        return self.kind == "malformed"


def _malformed(think: str, reason: str) -> ParsedResponse:
    return ParsedResponse(think_text=think, kind="malformed", reason=reason)


def parse(text: str, lexicon: RejectionLexicon | None = None) -> ParsedResponse:
    """Parse raw response text. Total: malformation is a value, not an error."""
    lex = lexicon or RejectionLexicon()

    think_m = _THINK_RE.search(text)
    answer_m = _ANSWER_RE.search(text)
    if think_m is None or answer_m is None:
        return _malformed("", MISSING_TAGS)
    if answer_m.start() < think_m.end():
        return _malformed(think_m.group(1), BAD_TAG_ORDER)

    think = think_m.group(1)
    # Only leading whitespace may precede <think>; only trailing whitespace
    # may follow </answer>.
    if text[: think_m.start()].strip() or text[answer_m.end():].strip():
        return _malformed(think, TRAILING_GARBAGE)
    if text[think_m.end(): answer_m.start()].strip():
        return _malformed(think, TRAILING_GARBAGE)

    answer = answer_m.group(1).strip()
    if not answer or answer.lower() in ("none", "null") or lex.matches(answer):
        return ParsedResponse(think_text=think, kind="abstain")

    quad_m = _QUAD_RE.fullmatch(answer)
    if quad_m is None:
        return _malformed(think, UNPARSEABLE_COORDINATES)
    x1, y1, x2, y2 = (float(g) for g in quad_m.groups())
    try:
        box = Box(x1, y1, x2, y2)
    except InvalidBoxError:
        return _malformed(think, DEGENERATE_BOX)
    return ParsedResponse(think_text=think, kind="box", box=box)


def format_reward(r: ParsedResponse) -> int:
    """1 for a well-formed box or abstention, 0 for malformed output."""
    return 0 if r.is_malformed else 1


def render(think: str, box: Box | None) -> str:
    """Render the canonical response template (box is None for abstention)."""
    if box is None:
        answer = "The target is not present."
    else:
        answer = "[%s, %s, %s, %s]" % tuple(_fmt(c) for c in box.as_list())
    return f"<think>{think}</think><answer>{answer}</answer>"


def _fmt(c: float) -> str:
    return str(int(c)) if float(c).is_integer() else repr(c)


def detect_rejection(text: str, lex: RejectionLexicon | None = None) -> bool:
    """True iff no valid box can be extracted or an absence phrase matches."""
    lex = lex or RejectionLexicon()
    if lex.matches(text):
        return True
    for m in _QUAD_RE.finditer(text):
        try:
            Box(*(float(g) for g in m.groups()))
            return False
        except InvalidBoxError:
            continue
    return True
