# flowscore/main.py

import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config import ABLATIONS, RunConfig
from .errors import FlowScoreError, UsageError
from .evaluate import RankingReport, evaluate
from .export import export
from .kg import Dataset, load_dataset
from .logger import log
from .model import FlowModulatedScorer
from .params import load_into, save_checkpoint
from .reports import write_json
from .train import train

RESOLVED_CONFIG = "resolved_config"


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; usage errors here are exit 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


# flag -> choices (None: free value). Values stay strings; RunConfig parses them.
_FLAGS: Dict[str, Optional[List[str]]] = {
    "dataset": None,
    "task": ["relation", "entity"],
    "setting": ["transductive", "inductive"],
    "dim": None,
    "hops": None,
    "topk": None,
    "neighbor-samples": None,
    "heads": None,
    "temperature": None,
    "aggregator": ["attention", "mean", "concat_mlp"],
    "sigma": None,
    "lambda": None,
    "lr": None,
    "l2": None,
    "epochs": None,
    "batch-size": None,
    "negatives": None,
    "coupling": ["paired", "ot"],
    "inference": None,
    "ablation": list(ABLATIONS),
    "seed": None,
    "out": None,
    "checkpoint": None,
    "candidate-cap": None,
    "valid-limit": None,
    "workers": None,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowscore", description="Flow-modulated scoring for knowledge graph completion.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    for name, helptext in (
        ("train", "train a model, then evaluate the best checkpoint on test"),
        ("eval", "evaluate an existing checkpoint"),
        ("export", "write case-study CSVs from an existing checkpoint"),
    ):
        p = sub.add_parser(name, help=helptext)
        if name == "export":
            p.add_argument("kind", choices=["correlation", "flowvis"])
        p.add_argument("--config", default=None, help="key = value file; flags win over it")
        if name != "train":
            p.add_argument("--split", choices=["valid", "test"], default=None)
        for flag, choices in _FLAGS.items():
            p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), choices=choices, default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "kind")}
    cfg = RunConfig.load(args.config, overrides)
    if not cfg.dataset:
        raise UsageError("--dataset is required")
    return cfg


def metrics_payload(cfg: RunConfig, dataset: Dataset, report: RankingReport, split: str) -> Dict[str, Any]:
    payload: Dict[str, Any] = {
        "task": cfg.train.task,
        "dataset": dataset.name,
        "setting": cfg.setting,
        "split": split,
        "filtered": True,
        "ablation": cfg.ablation,
        "candidate_cap": cfg.candidate_cap,
    }
    if cfg.train.task == "entity":
        payload["sampled_candidates"] = report.sampled_candidates
    payload.update(report.to_dict())
    payload.setdefault("per_category", {})
    return payload


def _evaluate(model: FlowModulatedScorer, dataset: Dataset, cfg: RunConfig, split: str) -> RankingReport:
    return evaluate(
        model,
        dataset,
        split,
        seed=cfg.train.seed,
        workers=cfg.train.workers,
        candidate_cap=cfg.candidate_cap,
        batch_size=cfg.train.batch_size,
    )


def _load_model(cfg: RunConfig, dataset: Dataset) -> FlowModulatedScorer:
    model = FlowModulatedScorer(dataset.num_relations, cfg.train).init()
    load_into(model.store, cfg.checkpoint_path)
    log("info", "checkpoint_loaded", path=cfg.checkpoint_path, params=model.store.num_scalars())
    return model


def _echo_config(cfg: RunConfig, command: str) -> None:
    """train owns `resolved_config`; other commands write `resolved_config_<command>`."""
    name = RESOLVED_CONFIG if command == "train" else f"{RESOLVED_CONFIG}_{command}"
    cfg.write(str(Path(cfg.out) / name))


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    _echo_config(cfg, "train")
    dataset = load_dataset(cfg.dataset, cfg.setting)

    result = train(dataset, cfg.train, out_dir=str(out), candidate_cap=cfg.candidate_cap)
    save_checkpoint(result.model.store.params, cfg.checkpoint_path)
    log("info", "checkpoint_saved", path=cfg.checkpoint_path, best_epoch=result.best_epoch)

    report = _evaluate(result.model, dataset, cfg, "test")
    write_json(out / "metrics.json", metrics_payload(cfg, dataset, report, "test"))
    log("info", "metrics_written", path=str(out / "metrics.json"), mrr=report.mrr)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    _echo_config(cfg, "eval")
    dataset = load_dataset(cfg.dataset, cfg.setting)
    model = _load_model(cfg, dataset)
    report = _evaluate(model, dataset, cfg, cfg.split)
    path = Path(cfg.out) / f"metrics_{cfg.split}.json"
    write_json(path, metrics_payload(cfg, dataset, report, cfg.split))
    log("info", "metrics_written", path=str(path), mrr=report.mrr)
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    _echo_config(cfg, "export")
    dataset = load_dataset(cfg.dataset, cfg.setting)
    model = _load_model(cfg, dataset)
    export(args.kind, model, dataset, cfg.out, cfg.split, cfg.train.seed)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export": cmd_export}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except FlowScoreError as e:
        log("error", "command_failed", error=str(e), kind=type(e).__name__)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
