"""Experiment configuration: a JSON key-tree that round-trips losslessly.

The default benchmark is four synthetic scripts whose training volumes
follow the 2687:47411:4609:5631 ratio scaled to a 6000-instance budget,
with charset sizes {60, 20, 80, 30} and per-script stroke styles. The
default task order puts the large-charset script first, which maximizes
rehearsal-imbalance stress; two alternative orders ship alongside.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractViolation
from .glyphs import NoiseConfig, ScriptSpec
from .rehearsal import STRATEGIES
from .router import DM_ROUTER, MLP_ROUTER

ENV_SEED = "MRN_SEED"

MODE_MRN = "mrn"
MODE_BASELINE = "baseline"
MODE_BOUND = "bound"
MODES = (MODE_MRN, MODE_BASELINE, MODE_BOUND)


@dataclass
class RehearsalConfig:
    capacity: int = 200
    strategy: str = "random"

    def __post_init__(self):
        if self.capacity < 1:
            raise ContractViolation("rehearsal capacity must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ContractViolation(f"unknown strategy {self.strategy!r}")


@dataclass
class RouterConfig:
    variant: str = DM_ROUTER
    depth: int = 1
    alpha: float = 15.0
    hidden: int = 64          # baseline MLP width

    def __post_init__(self):
        if self.variant not in (DM_ROUTER, MLP_ROUTER):
            raise ContractViolation(f"unknown router variant {self.variant!r}")
        if self.alpha < 0:
            raise ContractViolation("alpha must be >= 0")
        if self.depth < 1:
            raise ContractViolation("router depth must be >= 1")


@dataclass
class TrainingConfig:
    iterations: int = 2000
    batch: int = 32
    max_lr: float = 0.04
    seed: int = 1
    frames: int = 12
    channels: int = 32
    stage2_iterations: int = 800
    stage2_max_lr: float = 0.01


@dataclass
class ExperimentConfig:
    scripts: list[ScriptSpec]
    order: list[int]
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    max_len: int = 6
    overlap: int = 3
    rehearsal: RehearsalConfig = field(default_factory=RehearsalConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    voting: str = "soft"
    output_dir: str = "runs/default"

    def __post_init__(self):
        ids = {s.script_id for s in self.scripts}
        if len(ids) != len(self.scripts):
            raise ContractViolation("duplicate script ids")
        if sorted(self.order) != sorted(set(self.order)) or not set(self.order) <= ids:
            raise ContractViolation(f"order {self.order} must be unique known script ids")
        if len(self.order) < 1:
            raise ContractViolation("schedule needs at least one task")
        if self.voting not in ("soft", "hard"):
            raise ContractViolation(f"voting must be soft or hard, got {self.voting!r}")

    def script(self, script_id: int) -> ScriptSpec:
        for s in self.scripts:
            if s.script_id == script_id:
                return s
        raise ContractViolation(f"no script with id {script_id}")

    def effective_seed(self) -> int:
        env = os.environ.get(ENV_SEED)
        return int(env) if env else self.training.seed

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for s in d["scripts"]:
            s["stroke_count_range"] = list(s["stroke_count_range"])
        d["noise"]["contrast"] = list(d["noise"]["contrast"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        scripts = [
            ScriptSpec(
                script_id=s["script_id"],
                charset_size=s["charset_size"],
                stroke_count_range=tuple(s["stroke_count_range"]),
                stroke_style=s["stroke_style"],
                zipf_s=s["zipf_s"],
                n_train=s["n_train"],
                n_test=s["n_test"],
                seed=s["seed"],
            )
            for s in d["scripts"]
        ]
        noise = NoiseConfig(
            sigma=d["noise"]["sigma"],
            jitter=d["noise"]["jitter"],
            contrast=tuple(d["noise"]["contrast"]),
        )
        return cls(
            scripts=scripts,
            order=list(d["order"]),
            noise=noise,
            max_len=d["max_len"],
            overlap=d["overlap"],
            rehearsal=RehearsalConfig(**d["rehearsal"]),
            router=RouterConfig(**d["router"]),
            training=TrainingConfig(**d["training"]),
            voting=d["voting"],
            output_dir=d["output_dir"],
        )


def default_scripts(data_seed: int = 100) -> list[ScriptSpec]:
    """Four scripts; train counts follow the benchmark ratio at 1/10 scale."""
    return [
        ScriptSpec(0, 60, (2, 4), "angular", 1.1, 267, 200, data_seed + 0),
        ScriptSpec(1, 20, (1, 3), "curved", 0.9, 4714, 200, data_seed + 1),
        ScriptSpec(2, 80, (3, 6), "dotted", 1.5, 458, 200, data_seed + 2),
        ScriptSpec(3, 30, (4, 7), "curved", 1.0, 560, 200, data_seed + 3),
    ]


# Task orders: large-charset-first stresses the rehearsal set hardest;
# the alternates alternate or defer the big charsets.
ORDER_LARGE_FIRST = [2, 0, 3, 1]
ORDER_ALTERNATING = [0, 1, 2, 3]
ORDER_LARGE_LAST = [1, 3, 0, 2]


def default_config(output_dir: str | Path = "runs/default") -> ExperimentConfig:
    return ExperimentConfig(
        scripts=default_scripts(),
        order=list(ORDER_LARGE_FIRST),
        output_dir=str(output_dir),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    from .storage import read_json

    return ExperimentConfig.from_dict(read_json(path))


def save_config(path: str | Path, cfg: ExperimentConfig) -> None:
    from .storage import write_json

    write_json(path, cfg.to_dict())
