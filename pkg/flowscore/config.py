# flowscore/config.py

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

from .errors import UsageError

ENV_PREFIX = "FLOWSCORE_"

ABLATIONS = ("none", "no-topk", "no-energy-score", "no-flow")


@dataclass
class ContextConfig:
    dim: int = 64
    hops: int = 2
    top_k: int = 3
    neighbor_samples: int = 8
    heads: int = 4
    temperature: float = 0.95
    selection_mode: str = "energy_topk"  # energy_topk | random_k | dot_topk
    aggregator: str = "attention"  # attention | mean | concat_mlp

    def validate(self) -> None:
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise UsageError(f"dim ({self.dim}) must be a positive multiple of heads ({self.heads})")
        if self.hops < 1:
            raise UsageError(f"hops must be >= 1, got {self.hops}")
        if self.top_k < 1:
            raise UsageError(f"topk must be >= 1, got {self.top_k}")
        if self.neighbor_samples < 1:
            raise UsageError(f"neighbor_samples must be >= 1, got {self.neighbor_samples}")
        if not self.temperature > 0:
            raise UsageError(f"temperature must be > 0, got {self.temperature}")
        if self.selection_mode not in ("energy_topk", "random_k", "dot_topk"):
            raise UsageError(f"unknown selection_mode: {self.selection_mode}")
        if self.aggregator not in ("attention", "mean", "concat_mlp"):
            raise UsageError(f"unknown aggregator: {self.aggregator}")


@dataclass
class FlowConfig:
    sigma: float = 0.1
    coupling: str = "paired"  # paired | minibatch_ot
    inference: str = "midpoint"  # midpoint | mc:S
    enabled: bool = True

    @property
    def mc_samples(self) -> int:
        """0 for midpoint inference, S for mc:S."""
        if self.inference == "midpoint":
            return 0
        return int(self.inference.split(":", 1)[1])

    def validate(self) -> None:
        if not self.sigma >= 0:
            raise UsageError(f"sigma must be >= 0, got {self.sigma}")
        if self.coupling not in ("paired", "minibatch_ot"):
            raise UsageError(f"unknown coupling: {self.coupling}")
        if self.inference != "midpoint":
            head, _, count = self.inference.partition(":")
            if head != "mc" or not count.isdigit() or int(count) < 1:
                raise UsageError(f"inference must be 'midpoint' or 'mc:S' with S >= 1, got {self.inference}")


@dataclass
class TrainConfig:
    task: str = "relation"  # relation | entity
    lambda_cfm: float = 1.2
    epochs: int = 20
    batch_size: int = 128
    lr: float = 5e-3
    l2: float = 1e-7
    negatives_per_query: int = 64
    seed: int = 0
    valid_limit: int = 0
    workers: int = 1
    context: ContextConfig = field(default_factory=ContextConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)

    def validate(self) -> None:
        if self.task not in ("relation", "entity"):
            raise UsageError(f"unknown task: {self.task}")
        if not self.lambda_cfm >= 0:
            raise UsageError(f"lambda must be >= 0, got {self.lambda_cfm}")
        for name in ("epochs", "batch_size", "negatives_per_query", "workers"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.lr > 0 or not self.l2 >= 0:
            raise UsageError(f"lr must be > 0 and l2 >= 0 (lr={self.lr}, l2={self.l2})")
        if self.seed < 0 or self.valid_limit < 0:
            raise UsageError("seed and valid_limit must be non-negative")
        self.context.validate()
        self.flow.validate()


def _parse_bool(raw: str) -> bool:
    s = raw.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw}")


def _parse_coupling(raw: str) -> str:
    return "minibatch_ot" if raw.strip() in ("ot", "minibatch_ot") else raw.strip()


# key -> (section, attribute, parser). Keys are the flag names with '_'.
_FIELDS: Dict[str, Tuple[str, str, Callable[[str], Any]]] = {
    "dataset": ("run", "dataset", str),
    "setting": ("run", "setting", str),
    "out": ("run", "out", str),
    "checkpoint": ("run", "checkpoint", str),
    "candidate_cap": ("run", "candidate_cap", int),
    "split": ("run", "split", str),
    "ablation": ("run", "ablation", str),
    "task": ("train", "task", str),
    "lambda": ("train", "lambda_cfm", float),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "lr": ("train", "lr", float),
    "l2": ("train", "l2", float),
    "negatives": ("train", "negatives_per_query", int),
    "seed": ("train", "seed", int),
    "valid_limit": ("train", "valid_limit", int),
    "workers": ("train", "workers", int),
    "dim": ("context", "dim", int),
    "hops": ("context", "hops", int),
    "topk": ("context", "top_k", int),
    "neighbor_samples": ("context", "neighbor_samples", int),
    "heads": ("context", "heads", int),
    "temperature": ("context", "temperature", float),
    "selection_mode": ("context", "selection_mode", str),
    "aggregator": ("context", "aggregator", str),
    "sigma": ("flow", "sigma", float),
    "coupling": ("flow", "coupling", _parse_coupling),
    "inference": ("flow", "inference", str),
    "flow_enabled": ("flow", "enabled", _parse_bool),
}


def read_config_file(path: str) -> Dict[str, str]:
    """`key = value` per line, '#' starts a comment."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    out: Dict[str, str] = {}
    for line_no, raw in enumerate(p.read_bytes().splitlines(), start=1):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise UsageError(f"{path}: line {line_no}: invalid UTF-8") from None
        line = text.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}: line {line_no}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


@dataclass
class RunConfig:
    dataset: str = ""
    setting: str = "transductive"
    out: str = "runs/default"
    checkpoint: str = ""
    candidate_cap: int = 10000
    split: str = "test"
    ablation: str = "none"
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def checkpoint_path(self) -> str:
        return self.checkpoint or str(Path(self.out) / "model.fms")

    def _section(self, name: str) -> Any:
        return {
            "run": self,
            "train": self.train,
            "context": self.train.context,
            "flow": self.train.flow,
        }[name]

    def set(self, key: str, raw: Any) -> None:
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise UsageError(f"unknown config key: {key}")
        section, attr, parse = _FIELDS[key]
        try:
            value = parse(raw) if isinstance(raw, str) else raw
        except ValueError as e:
            raise UsageError(f"bad value for {key}: {raw!r} ({e})") from None
        setattr(self._section(section), attr, value)

    def apply_ablation(self) -> None:
        if self.ablation not in ABLATIONS:
            raise UsageError(f"unknown ablation: {self.ablation}")
        if self.ablation == "no-topk":
            self.train.context.selection_mode = "random_k"
        elif self.ablation == "no-energy-score":
            self.train.context.selection_mode = "dot_topk"
        elif self.ablation == "no-flow":
            self.train.flow.enabled = False
            self.train.lambda_cfm = 0.0

    def validate(self) -> None:
        if self.setting not in ("transductive", "inductive"):
            raise UsageError(f"unknown setting: {self.setting}")
        if self.split not in ("valid", "test"):
            raise UsageError(f"unknown split: {self.split}")
        if self.candidate_cap < 2:
            raise UsageError(f"candidate_cap must be >= 2, got {self.candidate_cap}")
        self.train.validate()

    @classmethod
    def load(
        cls,
        config_file: Optional[str] = None,
        overrides: Optional[Mapping[str, Any]] = None,
        env: Optional[Mapping[str, str]] = None,
    ) -> "RunConfig":
        """
        Defaults < config file < FLOWSCORE_<KEY> environment < overrides
        (parsed flags; None values are ignored).
        """
        cfg = cls()
        if config_file:
            for k, v in read_config_file(config_file).items():
                cfg.set(k, v)
        env = os.environ if env is None else env
        for key in _FIELDS:
            raw = env.get(ENV_PREFIX + key.upper())
            if raw is not None:
                cfg.set(key, raw)
        for k, v in (overrides or {}).items():
            if v is not None:
                cfg.set(k, v)
        cfg.apply_ablation()
        cfg.validate()
        return cfg

    def as_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for key, (section, attr, _) in _FIELDS.items():
            out[key] = getattr(self._section(section), attr)
        return out

    def to_lines(self) -> List[str]:
        lines = ["# resolved flowscore configuration"]
        for key, value in self.as_dict().items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return lines

    def write(self, path: str) -> None:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")
