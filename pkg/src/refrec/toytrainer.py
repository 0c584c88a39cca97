"""Synthetic grounding environment and a tabular categorical policy trained
with the dynamic-IoU group-relative scheme via analytic policy gradients.

Scenes present a menu of candidate boxes plus an explicit abstain action.
Each candidate carries a small feature vector (category match, attribute
match, tight-fit cue); the policy is a shared weight vector over those
features, so gradients of the surrogate objective are exact and cheap.
Sampled actions are rendered into the canonical response template and fed
back through the production parser, exercising the full reward path.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Box, ImageDims, area_ratio, iou
from .grpo import GrpoConfig, advantages, kl_categorical
from .response import ParsedResponse, parse, render
from .rewards import RewardConfig, quality_threshold, score_group, dyiou_threshold

LEVELS = ("easy", "medium", "hard", "reject")

# Feature layout shared by all candidate actions plus abstain.
F_BIAS, F_CAT, F_ATTR, F_PRECISE, F_ABSTAIN = range(5)
NUM_FEATURES = 5
ABSTAIN_FEATURES = (0.0, 0.0, 0.0, 0.0, 1.0)


@dataclass(frozen=True)
class SceneSpec:
    """One synthetic grounding scene: candidate boxes, their cue features,
    and the target index (None when the target is absent)."""

    dims: ImageDims
    candidates: tuple[Box, ...]
    features: tuple[tuple[float, ...], ...]
    target: int | None
    difficulty: dict
    seed: int
    level: str

    def feature_matrix(self) -> np.ndarray:
        """(M+1) x F matrix; the last row is the abstain action."""
        return np.array(list(self.features) + [ABSTAIN_FEATURES], dtype=float)

    @property
    def num_actions(self) -> int:
        return len(self.candidates) + 1

    @property
    def abstain_action(self) -> int:
        return len(self.candidates)


class PolicyState:
    """Tabular softmax policy over scene features, with a frozen reference."""

    def __init__(self, weights=None):
        w = np.zeros(NUM_FEATURES) if weights is None else np.asarray(weights, float)
        self.weights = w.copy()
        self.reference_weights = w.copy()
        self.reference_weights.flags.writeable = False

    def probs(self, scene: SceneSpec, weights=None) -> np.ndarray:
        w = self.weights if weights is None else weights
        logits = scene.feature_matrix() @ w
        logits = logits - logits.max()
        e = np.exp(logits)
        return e / e.sum()

    def reference_probs(self, scene: SceneSpec) -> np.ndarray:
        return self.probs(scene, weights=self.reference_weights)

    def argmax_action(self, scene: SceneSpec) -> int:
        return int(np.argmax(scene.feature_matrix() @ self.weights))


def _place_box(rng, dims: ImageDims, w: float, h: float, cells, cell_idx) -> Box:
    """Place a w x h box inside the given grid cell with a random offset."""
    cx1, cy1, cx2, cy2 = cells[cell_idx]
    x1 = cx1 + rng.uniform(0, max(1.0, (cx2 - cx1) - w))
    y1 = cy1 + rng.uniform(0, max(1.0, (cy2 - cy1) - h))
    x1, y1 = round(x1), round(y1)
    return Box(x1, y1, min(x1 + round(w), dims.width), min(y1 + round(h), dims.height))


def _grid_cells(dims: ImageDims, rows: int, cols: int):
    cw, ch = dims.width / cols, dims.height / rows
    return [
        (c * cw, r * ch, (c + 1) * cw, (r + 1) * ch)
        for r in range(rows)
        for c in range(cols)
    ]


def _jitter(rng, b: Box, dims: ImageDims, frac: float) -> Box:
    """Shift a box along one axis by frac of its side, clipped to the image.

    For an axis shift of frac, IoU with the original is (1-frac)/(1+frac).
    """
    w, h = b.x2 - b.x1, b.y2 - b.y1
    if rng.random() < 0.5:
        dx, dy = round(frac * w) * (1 if rng.random() < 0.5 else -1), 0
    else:
        dx, dy = 0, round(frac * h) * (1 if rng.random() < 0.5 else -1)
    x1 = min(max(0, b.x1 + dx), dims.width - w)
    y1 = min(max(0, b.y1 + dy), dims.height - h)
    return Box(x1, y1, x1 + w, y1 + h)


def make_scene(seed: int, level: str) -> SceneSpec:
    """Deterministically generate a scene for the given difficulty preset."""
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}; expected one of {LEVELS}")
    rng = np.random.default_rng(seed)

    if level == "easy":
        dims = ImageDims(640, 640)
        cells = _grid_cells(dims, 2, 2)
        order = rng.permutation(4)
        target_idx = int(rng.integers(0, 3))
        boxes, feats = [], []
        for i in range(3):
            side = rng.uniform(180, 260)
            boxes.append(_place_box(rng, dims, side, side, cells, order[i]))
            if i == target_idx:
                feats.append((1.0, 1.0, 1.0, 1.0, 0.0))
            else:
                feats.append((1.0, 0.0, 0.0, 0.0, 0.0))
        difficulty = {
            "distractor_count": 0,
            "target_area_ratio": area_ratio(boxes[target_idx], dims),
            "hop_count": 0,
        }
        return SceneSpec(dims, tuple(boxes), tuple(feats), target_idx, difficulty, seed, level)

    if level in ("medium", "reject"):
        dims = ImageDims(1024, 1024)
        cells = _grid_cells(dims, 3, 3)
        m = int(rng.integers(4, 6))
        order = rng.permutation(9)
        target_idx = int(rng.integers(0, m)) if level == "medium" else None
        boxes, feats = [], []
        for i in range(m):
            side = rng.uniform(120, 220)
            boxes.append(_place_box(rng, dims, side, side, cells, order[i]))
            if i == target_idx:
                feats.append((1.0, 1.0, 1.0, 1.0, 0.0))
            else:
                # Same-category distractor without the distinguishing attribute.
                feats.append((1.0, 1.0, 0.0, 0.0, 0.0))
        distractors = m - (1 if target_idx is not None else 0)
        difficulty = {
            "distractor_count": distractors,
            "target_area_ratio": (
                area_ratio(boxes[target_idx], dims) if target_idx is not None else 0.0
            ),
            "hop_count": 1,
        }
        return SceneSpec(dims, tuple(boxes), tuple(feats), target_idx, difficulty, seed, level)

    # hard: small target, two near-miss boxes sharing every cue except the
    # tight-fit one, and several far same-category distractors.
    dims = ImageDims(1600, 1280)
    cells = _grid_cells(dims, 3, 4)
    s = rng.uniform(0.012, 0.028)
    aspect = rng.uniform(0.8, 1.25)
    area = s * dims.width * dims.height
    w = (area * aspect) ** 0.5
    h = area / w
    order = rng.permutation(12)
    target_box = _place_box(rng, dims, w, h, cells, order[0])

    boxes = [target_box]
    feats = [(1.0, 1.0, 1.0, 1.0, 0.0)]
    for _ in range(2):
        boxes.append(_jitter(rng, target_box, dims, rng.uniform(0.27, 0.31)))
        feats.append((1.0, 1.0, 1.0, 0.0, 0.0))
    n_far = int(rng.integers(4, 7))
    for i in range(n_far):
        side = rng.uniform(0.7, 1.3) * (w + h) / 2
        boxes.append(_place_box(rng, dims, side, side, cells, order[1 + i]))
        feats.append((1.0, 1.0, 0.0, 0.0, 0.0))

    perm = rng.permutation(len(boxes))
    boxes = [boxes[i] for i in perm]
    feats = [feats[i] for i in perm]
    target_idx = int(np.where(perm == 0)[0][0])
    difficulty = {
        "distractor_count": len(boxes) - 1,
        "target_area_ratio": area_ratio(boxes[target_idx], dims),
        "hop_count": 2,
    }
    return SceneSpec(dims, tuple(boxes), tuple(feats), target_idx, difficulty, seed, "hard")


def render_action(scene: SceneSpec, action: int) -> str:
    """Render an action as canonical response text."""
    if action == scene.abstain_action:
        return render("scanning every candidate region", None)
    return render("matched the described cues", scene.candidates[action])


def action_of(scene: SceneSpec, parsed: ParsedResponse) -> int:
    """Recover the action index from a parsed rollout response."""
    if parsed.is_abstain:
        return scene.abstain_action
    for i, b in enumerate(scene.candidates):
        if b == parsed.box:
            return i
    raise ValueError("parsed box does not match any scene candidate")


def rollout(
    policy: PolicyState, scene: SceneSpec, n: int, rng_seed: int
) -> list[ParsedResponse]:
    """Sample n responses, render them as text, and re-parse each one."""
    if n < 2:
        raise ValueError("need at least 2 samples per group")
    rng = np.random.default_rng(rng_seed)
    p = policy.probs(scene)
    acts = rng.choice(scene.num_actions, size=n, p=p)
    return [parse(render_action(scene, int(a))) for a in acts]


@dataclass(frozen=True)
class TrainConfig:
    reward: RewardConfig = field(default_factory=RewardConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    steps: int = 300
    scenes_per_step: int = 4
    learning_rate: float = 0.1
    seed: int = 1
    level: str = "easy"
    mode: str = "dynamic"  # or "fixed": constant threshold alpha
    quality_reward: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("require steps >= 1")
        if self.steps > self.reward.total_steps:
            raise ValueError("steps must not exceed the reward schedule length")
        if self.mode not in ("fixed", "dynamic"):
            raise ValueError("mode must be 'fixed' or 'dynamic'")
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}")

    def effective_reward_config(self) -> RewardConfig:
        cfg = self.reward
        if self.mode == "fixed":
            cfg = replace(cfg, beta_end=cfg.alpha, d_max=0.0)
        if not self.quality_reward:
            cfg = replace(cfg, tau_q_start=0.0, tau_q_end=0.0)
        return cfg


@dataclass
class TrainLog:
    """Per-step training records, serializable as JSONL or CSV."""

    records: list[dict] = field(default_factory=list)

    FIELDS = (
        "step",
        "mean_reward",
        "mean_iou",
        "kl",
        "surrogate",
        "tau_iou_at_mean_s",
        "hard_group_fraction",
    )

    def append(self, **kw):
        self.records.append({k: kw[k] for k in self.FIELDS})

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    def write_jsonl(self, path: str | Path):
        Path(path).write_text(self.to_jsonl())

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=self.FIELDS)
            w.writeheader()
            w.writerows(self.records)

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]


def batch_surrogate(
    weights, policy: PolicyState, batch, kl_beta: float
) -> float:
    """Surrogate objective over a sampled batch as a function of the weights.

    batch entries are (scene, actions, advantages, old_probs); old_probs
    are the sampling-time action probabilities, held fixed.
    """
    w = np.asarray(weights, float)
    total = 0.0
    for scene, acts, advs, old_p in batch:
        p = policy.probs(scene, weights=w)
        ratios = p[acts] / old_p[acts]
        q = policy.reference_probs(scene)
        total += float(np.mean(ratios * np.asarray(advs))) - kl_beta * kl_categorical(p, q)
    return total / len(batch)


def batch_gradient(
    weights, policy: PolicyState, batch, kl_beta: float
) -> np.ndarray:
    """Analytic gradient of batch_surrogate with respect to the weights."""
    w = np.asarray(weights, float)
    grad = np.zeros_like(w)
    for scene, acts, advs, old_p in batch:
        phi = scene.feature_matrix()
        p = policy.probs(scene, weights=w)
        phi_bar = p @ phi
        score = phi - phi_bar  # d log p_j / dw, row per action
        ratios = p[acts] / old_p[acts]
        g = np.zeros_like(w)
        for a, adv, r in zip(acts, advs, ratios):
            g += r * adv * score[a]
        g /= len(acts)
        q = policy.reference_probs(scene)
        log_ratio = np.where(p > 0, np.log(np.maximum(p, 1e-300) / q), 0.0)
        g -= kl_beta * ((p * log_ratio) @ score)
        grad += g
    return grad / len(batch)


def _scene_seed(run_seed: int, step: int, idx: int) -> int:
    return int(np.random.default_rng((run_seed, step, idx)).integers(0, 2**31))


def _reference_area_ratio(level: str, probes: int = 64) -> float:
    """Mean target area ratio of the level, from a fixed probe set; used to
    log the threshold schedule at one reference point."""
    vals = [
        make_scene(20_000_000 + i, level).difficulty["target_area_ratio"]
        for i in range(probes)
    ]
    vals = [v for v in vals if v > 0]
    return float(np.mean(vals)) if vals else 0.0


def train(cfg: TrainConfig) -> tuple[PolicyState, TrainLog]:
    """Run the full reward -> advantage -> update loop; deterministic in seed."""
    policy = PolicyState()
    reward_cfg = replace(
        cfg.effective_reward_config(), total_steps=cfg.steps
    )
    log = TrainLog()
    s_ref = _reference_area_ratio(cfg.level)

    for t in range(cfg.steps):
        batch = []
        rewards_all, ious_all, hard_flags, kls = [], [], [], []
        for g in range(cfg.scenes_per_step):
            seed = _scene_seed(cfg.seed, t, g)
            scene = make_scene(seed, cfg.level)
            responses = rollout(policy, scene, reward_cfg.group_size, seed + 1)
            acts = np.array([action_of(scene, r) for r in responses])

            gt = scene.candidates[scene.target] if scene.target is not None else None
            breakdowns = score_group(responses, gt, scene.dims, t, reward_cfg)
            rewards = [b.total for b in breakdowns]
            advs = advantages(rewards, cfg.grpo.epsilon_std)
            old_p = policy.probs(scene)
            batch.append((scene, acts, advs, old_p))

            rewards_all.extend(rewards)
            if gt is not None:
                ious_all.extend(b.iou_value for b in breakdowns)
            k = sum(b.correct for b in breakdowns)
            hard_flags.append(k < quality_threshold(t, reward_cfg))
            kls.append(kl_categorical(old_p, policy.reference_probs(scene)))

        surr = batch_surrogate(policy.weights, policy, batch, cfg.grpo.kl_beta)
        grad = batch_gradient(policy.weights, policy, batch, cfg.grpo.kl_beta)
        if not np.isfinite(grad).all():
            raise RuntimeError(f"non-finite gradient at step {t}")
        policy.weights = policy.weights + cfg.learning_rate * grad

        log.append(
            step=t,
            mean_reward=float(np.mean(rewards_all)),
            mean_iou=float(np.mean(ious_all)) if ious_all else 0.0,
            kl=float(np.mean(kls)),
            surrogate=surr,
            tau_iou_at_mean_s=dyiou_threshold(t, s_ref, reward_cfg),
            hard_group_fraction=float(np.mean(hard_flags)),
        )
    return policy, log


def evaluate(
    policy: PolicyState, level: str, n_scenes: int = 100, seed_base: int = 10_000_000
) -> dict:
    """Greedy (argmax) evaluation on held-out scenes."""
    ious, correct_abstains = [], []
    for i in range(n_scenes):
        scene = make_scene(seed_base + i, level)
        a = policy.argmax_action(scene)
        if scene.target is None:
            correct_abstains.append(1.0 if a == scene.abstain_action else 0.0)
        elif a == scene.abstain_action:
            ious.append(0.0)
        else:
            ious.append(iou(scene.candidates[a], scene.candidates[scene.target]))
    out = {"n_scenes": n_scenes, "level": level}
    if ious:
        out["mean_iou"] = float(np.mean(ious))
        out["frac_iou_ge_08"] = float(np.mean([v >= 0.8 for v in ious]))
    if correct_abstains:
        out["rejection_accuracy"] = float(np.mean(correct_abstains))
    return out


def compare_schedules(base_cfg: TrainConfig, heldout_scenes: int = 100) -> dict:
    """Train twice from a common seed, with a fixed threshold and with the
    dynamic schedule, and report held-out localization quality for both."""
    report = {"level": base_cfg.level, "seed": base_cfg.seed, "runs": {}}
    logs = {}
    for mode in ("fixed", "dynamic"):
        cfg = replace(base_cfg, mode=mode)
        policy, log = train(cfg)
        metrics = evaluate(policy, cfg.level, heldout_scenes)
        report["runs"][mode] = metrics
        logs[mode] = log
    report["logs"] = logs
    return report
