"""Experiment configuration (JSON) and run manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from itss.data import SuiteParams
from itss.subspace import DEFAULT_H, DEFAULT_INIT_STD, DEFAULT_LOWDIM_LR, DEFAULT_LOWDIM_OPTIMIZER
from itss.train import TrainConfig

OUT_ENV = "ITSS_OUT"

# ModelSpec fields a config may set; num_classes comes from each task.
MODEL_FIELDS = ("kind", "input_dim", "hidden_dim", "depth", "seed", "seq_len", "init_gain", "bias_scale")


def _default_model():
    return {"kind": "mlp", "hidden_dim": 96, "depth": 2, "seed": 0, "seq_len": 4,
            "init_gain": 0.5, "bias_scale": 0.0}


@dataclass
class ExperimentConfig:
    suite: dict = field(default_factory=dict)
    model: dict = field(default_factory=_default_model)
    train: dict = field(default_factory=dict)
    dim: int = 32
    dims: list = field(default_factory=lambda: [8, 16, 32])
    h: int = DEFAULT_H
    lowdim_lr: float = DEFAULT_LOWDIM_LR
    lowdim_optimizer: str = DEFAULT_LOWDIM_OPTIMIZER
    init_std: float = DEFAULT_INIT_STD
    k_sigma: float = 3.0
    top_k: int = 10
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # e.g. {"task8": {"epochs": 64, "dim": 64}} for a task that needs a longer trajectory
    task_overrides: dict = field(default_factory=dict)
    out_dir: str = "runs"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if "input_dim" in self.model and "input_dim" in self.suite \
                and self.model["input_dim"] != self.suite["input_dim"]:
            raise ValueError("model.input_dim and suite.input_dim disagree")
        unknown = set(self.model) - set(MODEL_FIELDS)
        if unknown:
            raise ValueError(f"unknown model fields {sorted(unknown)}")
        self.suite_params()
        for tid in self.task_ids():
            cfg = self.train_config(tid, 0)
            if max(self.dims + [self.task_dim(tid)]) > cfg.epochs // cfg.checkpoint_every:
                raise ValueError(f"subspace dims exceed trajectory length for {tid}")

    def suite_params(self) -> SuiteParams:
        return SuiteParams(**self.suite)

    def task_ids(self) -> list[str]:
        return [f"task{i + 1}" for i in range(self.suite_params().num_tasks)]

    def train_config(self, task_id: str, seed: int) -> TrainConfig:
        over = {k: v for k, v in self.task_overrides.get(task_id, {}).items() if k != "dim"}
        return TrainConfig(**{**self.train, **over, "seed": seed})

    def task_dim(self, task_id: str) -> int:
        return int(self.task_overrides.get(task_id, {}).get("dim", self.dim))

    def model_kwargs(self) -> dict:
        kw = dict(self.model)
        kw.setdefault("input_dim", self.suite_params().input_dim)
        return kw

    def subspace_kwargs(self) -> dict:
        return {"h": self.h, "lowdim_lr": self.lowdim_lr,
                "lowdim_optimizer": self.lowdim_optimizer, "init_std": self.init_std}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def hash(self) -> str:
        """Identity of the computation; ``out_dir`` is excluded."""
        d = self.to_dict()
        d.pop("out_dir")
        return canonical_hash(d)

    def training_hash(self) -> str:
        """Identity of everything a full-space trajectory depends on."""
        return canonical_hash({"suite": self.suite, "model": self.model, "train": self.train,
                               "task_overrides": self.task_overrides})


def canonical_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def resolve_out(cli_out: str | None, config: ExperimentConfig) -> Path:
    """``--out`` wins, then ``$ITSS_OUT``, then the config's ``out_dir``."""
    if cli_out:
        return Path(cli_out)
    env = os.environ.get(OUT_ENV)
    return Path(env) if env else Path(config.out_dir)


@dataclass
class RunManifest:
    experiment: str
    config_hash: str
    config: dict
    artifacts: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    finished: float | None = None

    def save(self, path):
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))
