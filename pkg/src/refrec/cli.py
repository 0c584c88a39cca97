"""Command-line entry point.

Subcommands: eval, train-toy, compare-schedules, pipeline, score-group.
Machine-readable outputs go to files or stdout; logs go to stderr. Every
run directory receives a config.resolved.json sufficient to reproduce the
run. Exit codes: 0 success, 1 runtime failure, 2 usage/schema error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .clients import ClientSchemaError, suite_from_config
from .evaluation import (
    SchemaError,
    evaluate_predictions,
    load_predictions,
    load_samples,
    render_report,
)
from .grpo import GrpoConfig, advantages
from .pipeline import PipelineConfig, run_pipeline
from .response import RejectionLexicon
from .rewards import RewardConfig
from .toytrainer import TrainConfig, compare_schedules, evaluate, train

log = logging.getLogger("refrec")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _load_config_file(path: str | None) -> dict:
    path = path or os.environ.get("REFREC_CONFIG")
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _resolved(file_cfg: dict, flags: dict) -> dict:
    """Flag values override file values; None flags fall through."""
    out = dict(file_cfg)
    for k, v in flags.items():
        if v is not None:
            out[k] = v
    return out


def _write_resolved(out_dir: Path, resolved: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n"
    )


def _reward_config(resolved: dict) -> RewardConfig:
    fields = {f.name for f in dataclasses.fields(RewardConfig)}
    return RewardConfig(**{k: v for k, v in resolved.items() if k in fields})


def _grpo_config(resolved: dict) -> GrpoConfig:
    fields = {f.name for f in dataclasses.fields(GrpoConfig)}
    return GrpoConfig(**{k: v for k, v in resolved.items() if k in fields})


def _add_reward_flags(p: argparse.ArgumentParser):
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta-end", dest="beta_end", type=float)
    p.add_argument("--d-max", dest="d_max", type=float)
    p.add_argument("--p", dest="p", type=float)
    p.add_argument("--tau-q-start", dest="tau_q_start", type=float)
    p.add_argument("--tau-q-end", dest="tau_q_end", type=float)
    p.add_argument("--group-size", dest="group_size", type=int)
    p.add_argument("--kl-beta", dest="kl_beta", type=float)


def _add_train_flags(p: argparse.ArgumentParser):
    _add_reward_flags(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--scenes-per-step", dest="scenes_per_step", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--level", choices=["easy", "medium", "hard", "reject"])
    p.add_argument("--quality-reward", dest="quality_reward", choices=["on", "off"])
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refrec",
        description="Reward stack, toy GRPO trainer, evaluation protocol, "
        "and annotation pipeline for referring expression comprehension.",
    )
    parser.add_argument("--version", action="version", version=f"refrec {__version__}")
    parser.add_argument("--config", help="JSON config file (or $REFREC_CONFIG)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="score predictions against a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="markdown,json",
                   help="comma list of markdown,csv,json")
    p.add_argument("--buckets", action="append", default=None,
                   help="factor=edge,edge,... (e.g. distractors=0,1,3,6)")
    p.add_argument("--rejection-mode", choices=["grounding", "classification"],
                   default="grounding")
    p.add_argument("--rejection-lexicon", help="JSON array of absence phrases")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("train-toy", help="train the toy grounding policy")
    _add_train_flags(p)
    p.add_argument("--mode", choices=["fixed", "dynamic"])

    p = sub.add_parser("compare-schedules",
                       help="train with fixed and dynamic thresholds and compare")
    _add_train_flags(p)
    p.add_argument("--heldout-scenes", dest="heldout_scenes", type=int)

    p = sub.add_parser("pipeline", help="run the annotation pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--clients", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-categories", dest="min_categories", type=int)
    p.add_argument("--s-min", dest="s_min", type=float)
    p.add_argument("--max-inflight", dest="max_inflight", type=int)

    p = sub.add_parser("score-group", help="one-shot advantage inspection")
    p.add_argument("--rewards", required=True, help="comma list of rewards")
    p.add_argument("--epsilon-std", dest="epsilon_std", type=float, default=1e-8)
    return parser


def _parse_buckets(specs: list[str] | None) -> dict[str, list[float]] | None:
    if not specs:
        return None
    out = {}
    for spec in specs:
        factor, _, edges = spec.partition("=")
        if not edges:
            raise ValueError(f"bad bucket spec {spec!r}; expected factor=e1,e2,...")
        out[factor] = [float(e) for e in edges.split(",")]
    return out


def _cmd_eval(args, file_cfg) -> int:
    resolved = _resolved(file_cfg, {
        "dataset": args.dataset,
        "predictions": args.predictions,
        "out": args.out,
        "format": args.format,
        "buckets": args.buckets,
        "rejection_mode": args.rejection_mode,
        "rejection_lexicon": args.rejection_lexicon,
    })
    samples = load_samples(resolved["dataset"])
    predictions = load_predictions(resolved["predictions"])
    lex = (RejectionLexicon.from_file(resolved["rejection_lexicon"])
           if resolved.get("rejection_lexicon") else None)
    report = evaluate_predictions(
        samples,
        predictions,
        lex=lex,
        rejection_mode=resolved.get("rejection_mode", "grounding"),
        bucket_edges=_parse_buckets(resolved.get("buckets")),
    )
    out = Path(resolved["out"])
    _write_resolved(out, resolved)
    for fmt in str(resolved.get("format", "markdown,json")).split(","):
        fmt = fmt.strip()
        ext = {"markdown": "md", "csv": "csv", "json": "json"}[fmt]
        (out / f"report.{ext}").write_text(render_report(report, fmt))
    if not args.no_figures:
        from . import figures
        figures.plot_metrics(report, out / "report.png")
        figures.plot_buckets(report, out)
    log.info("report written to %s", out)
    return EXIT_OK


def _train_config(args, file_cfg) -> tuple[TrainConfig, dict]:
    flags = {k: getattr(args, k, None) for k in (
        "alpha", "beta_end", "d_max", "p", "tau_q_start", "tau_q_end",
        "group_size", "kl_beta", "steps", "scenes_per_step", "learning_rate",
        "seed", "level", "mode", "quality_reward",
    )}
    resolved = _resolved(file_cfg, flags)
    resolved.setdefault("steps", 300)
    resolved.setdefault("seed", 1)
    if resolved["steps"] < 1:
        raise UsageError("steps must be >= 1")
    reward = dataclasses.replace(
        _reward_config(resolved), total_steps=resolved["steps"]
    )
    cfg = TrainConfig(
        reward=reward,
        grpo=_grpo_config(resolved),
        steps=resolved["steps"],
        scenes_per_step=resolved.get("scenes_per_step", 4),
        learning_rate=resolved.get("learning_rate", 0.1),
        seed=resolved["seed"],
        level=resolved.get("level", "easy"),
        mode=resolved.get("mode", "dynamic"),
        quality_reward=resolved.get("quality_reward", "on") != "off",
    )
    resolved["out"] = args.out
    return cfg, resolved


class UsageError(Exception):
    pass


def _cmd_train_toy(args, file_cfg) -> int:
    cfg, resolved = _train_config(args, file_cfg)
    out = Path(args.out)
    _write_resolved(out, resolved)
    policy, trainlog = train(cfg)
    trainlog.write_jsonl(out / "trainlog.jsonl")
    trainlog.write_csv(out / "trainlog.csv")
    metrics = evaluate(policy, cfg.level)
    (out / "heldout.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    from . import figures
    figures.plot_train_log(trainlog, out / "trainlog.png",
                           title=f"{cfg.level} / {cfg.mode}")
    log.info("held-out metrics: %s", metrics)
    return EXIT_OK


def _cmd_compare_schedules(args, file_cfg) -> int:
    cfg, resolved = _train_config(args, file_cfg)
    heldout = getattr(args, "heldout_scenes", None) or 100
    out = Path(args.out)
    _write_resolved(out, resolved)
    report = compare_schedules(cfg, heldout_scenes=heldout)
    logs = report.pop("logs")
    for mode, trainlog in logs.items():
        trainlog.write_jsonl(out / f"trainlog.{mode}.jsonl")
        trainlog.write_csv(out / f"trainlog.{mode}.csv")
    (out / "comparison.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    from . import figures
    figures.plot_schedule_comparison(logs, out / "comparison.png")
    log.info("comparison: %s", report["runs"])
    return EXIT_OK


def _cmd_pipeline(args, file_cfg) -> int:
    flags = {k: getattr(args, k, None) for k in
             ("manifest", "clients", "out", "min_categories", "s_min", "max_inflight")}
    resolved = _resolved(file_cfg, flags)
    fields = {f.name for f in dataclasses.fields(PipelineConfig)}
    cfg = PipelineConfig(**{k: v for k, v in resolved.items() if k in fields})
    suite = suite_from_config(resolved["clients"])
    out = Path(resolved["out"])
    _write_resolved(out, resolved)
    result = run_pipeline(resolved["manifest"], suite, cfg, out_dir=out)
    log.info("emitted %d samples (%d audit records)",
             len(result.samples), len(result.audit))
    return EXIT_OK


def _cmd_score_group(args, file_cfg) -> int:
    rewards = [float(r) for r in args.rewards.split(",")]
    advs = advantages(rewards, args.epsilon_std)
    print(json.dumps({"rewards": rewards, "advantages": advs}))
    return EXIT_OK


_COMMANDS = {
    "eval": _cmd_eval,
    "train-toy": _cmd_train_toy,
    "compare-schedules": _cmd_compare_schedules,
    "pipeline": _cmd_pipeline,
    "score-group": _cmd_score_group,
}


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=os.environ.get("REFREC_LOG", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_cfg = _load_config_file(args.config)
        return _COMMANDS[args.command](args, file_cfg)
    except (UsageError, SchemaError, ClientSchemaError, KeyError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    except ValueError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except Exception as e:  # pragma: no cover - defensive
        log.error("runtime failure: %s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
