"""Experiment configuration: JSON documents validated against ``config_schema.json``.

Link preset names::

    baseline            identity on every link
    fw<A>-bw<B>         activations quantized to A bits, gradients to B bits
    topK<r>             TopK r% on activations and gradients
    <fb>-topK<r>        same with feedback fb in {ef, ef21, efmixed} on both directions
    aqsgd-topK<r>       AQ-SGD TopK r% on activations, plain TopK r% on gradients
    topK<r>-reuse       gradients compressed at the activations' TopK indices
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, field
from importlib import resources

import jsonschema

from ..compressors import CompressorConfig
from ..nn_model import PRESETS
from ..pipeline import DirectionConfig, LinkConfig, PipelineConfig, TrainSettings
from .datasets import DatasetSpec

ENV_OUTPUT_DIR = "MPCOMPRESS_OUTPUT_DIR"
ENV_SEEDS = "MPCOMPRESS_SEEDS"


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(field, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.errors))


_PRESET = re.compile(
    r"^(?:(?P<fb>ef|ef21|efmixed|aqsgd)-)?topK(?P<r>\d+(?:\.\d+)?)(?P<reuse>-reuse)?$"
)
_QUANT = re.compile(r"^fw(?P<a>\d)-bw(?P<b>\d)$")
_FEEDBACK_NAMES = {"ef": "ef", "ef21": "ef21", "efmixed": "ef_mixed"}


def link_preset(name: str) -> LinkConfig:
    if name in ("baseline", "none", "identity"):
        return LinkConfig()
    m = _QUANT.match(name)
    if m:
        return LinkConfig(
            DirectionConfig(CompressorConfig("quantize", bits=int(m["a"]))),
            DirectionConfig(CompressorConfig("quantize", bits=int(m["b"]))),
        )
    m = _PRESET.match(name)
    if not m:
        raise ValueError(f"unknown link preset {name!r}")
    topk = CompressorConfig("topk", ratio=float(m["r"]) / 100.0)
    fb = m["fb"]
    if m["reuse"]:
        if fb:
            raise ValueError("index reuse is only defined for plain topK presets")
        return LinkConfig(DirectionConfig(topk), DirectionConfig(topk), reuse_indices=True)
    if fb is None:
        return LinkConfig(DirectionConfig(topk), DirectionConfig(topk))
    if fb == "aqsgd":
        return LinkConfig(DirectionConfig(topk, "aqsgd"), DirectionConfig(topk))
    mode = _FEEDBACK_NAMES[fb]
    return LinkConfig(DirectionConfig(topk, mode), DirectionConfig(topk, mode))


def _direction(d: dict) -> DirectionConfig:
    comp = CompressorConfig(d.get("kind", "identity"), bits=d.get("bits", 8), ratio=d.get("ratio", 1.0))
    return DirectionConfig(comp, d.get("feedback", "none"))


def _link(obj) -> LinkConfig:
    if isinstance(obj, str):
        return link_preset(obj)
    return LinkConfig(
        _direction(obj.get("forward", {})),
        _direction(obj.get("backward", {})),
        obj.get("reuse_indices", False),
    )


@dataclass
class OptimizerConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    t_max: int | None = None  # defaults to 2 * epochs


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    model: str = "mlp"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    degree: int = 3
    links: object = "baseline"
    epochs: int = 40
    batch_size: int = 50
    seeds: list = field(default_factory=lambda: [0])
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    warmup_epochs: int = 0
    eval_modes: str = "both"
    transport: str = "in_process"
    executor: str = "sequential"

    @property
    def t_max(self) -> int:
        return self.optimizer.t_max if self.optimizer.t_max is not None else max(1, 2 * self.epochs)

    def link_configs(self) -> list:
        if isinstance(self.links, list):
            return [_link(l) for l in self.links]
        return [_link(self.links)] * (self.degree - 1)

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            degree=self.degree,
            links=self.link_configs(),
            transport=self.transport,
            warmup_epochs=self.warmup_epochs,
            executor=self.executor,
        )

    def train_settings(self, seed: int) -> TrainSettings:
        return TrainSettings(
            lr0=self.optimizer.lr0,
            t_max=self.t_max,
            batch_size=self.batch_size,
            seed=seed,
            warmup_epochs=self.warmup_epochs,
            eval_modes=self.eval_modes,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def schema() -> dict:
    text = resources.files("mpcompress.harness").joinpath("config_schema.json").read_text()
    return json.loads(text)


def _check(cfg: ExperimentConfig) -> list:
    errors = []
    if cfg.model not in PRESETS:
        errors.append(("model", f"unknown preset {cfg.model!r}"))
    try:
        links = cfg.link_configs()
        if isinstance(cfg.links, list) and len(links) != cfg.degree - 1:
            errors.append(("links", f"{cfg.degree} stages need {cfg.degree - 1} link entries, got {len(links)}"))
    except ValueError as exc:
        errors.append(("links", str(exc)))
    if cfg.optimizer.t_max is not None and cfg.optimizer.t_max < cfg.epochs - 1:
        errors.append(("optimizer.t_max", "must cover every epoch index"))
    if cfg.warmup_epochs > cfg.epochs:
        errors.append(("warmup_epochs", "exceeds epochs"))
    if cfg.dataset.kind == "idx_files" and not (cfg.dataset.images_path and cfg.dataset.labels_path):
        errors.append(("dataset", "idx_files needs images_path and labels_path"))
    return errors


def from_dict(doc: dict, apply_env: bool = True) -> ExperimentConfig:
    validator = jsonschema.Draft7Validator(schema())
    errs = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errs:
        raise ConfigError(("/".join(str(p) for p in e.absolute_path) or "<root>", e.message) for e in errs)
    doc = dict(doc)
    if apply_env and os.environ.get(ENV_SEEDS):
        doc["seeds"] = [int(s) for s in os.environ[ENV_SEEDS].split(",") if s.strip()]
    cfg = ExperimentConfig(
        **{k: v for k, v in doc.items() if k not in ("dataset", "optimizer")},
        dataset=DatasetSpec(**doc.get("dataset", {})),
        optimizer=OptimizerConfig(**doc.get("optimizer", {})),
    )
    errors = _check(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path, apply_env: bool = True) -> ExperimentConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([("<file>", f"invalid JSON: {exc}")]) from exc
    return from_dict(doc, apply_env)
