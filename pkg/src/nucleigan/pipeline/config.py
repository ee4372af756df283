"""Run configuration: every stage's parameters, seeds and paths in one YAML file."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..mask_synth import SamplerParams
from ..stain_norm import DEFAULT_SPARSITY
from ..train_seg import SegTrainConfig
from ..train_synth import SynthTrainConfig
from .data import PAPER_TEST_ORGANS, PAPER_TRAIN_ORGANS

SYNTH_MODES = ("gan", "toy")


@dataclass
class DataConfig:
    patch: int = 256
    stride: int = 248
    train_organs: list[str] = field(default_factory=lambda: list(PAPER_TRAIN_ORGANS))
    test_organs: list[str] = field(default_factory=lambda: list(PAPER_TEST_ORGANS))

    def __post_init__(self) -> None:
        if self.patch < 1 or self.stride < 1:
            raise ValueError("patch and stride must be positive")
        self.train_organs = [str(o) for o in self.train_organs]
        self.test_organs = [str(o) for o in self.test_organs]


@dataclass
class StainConfig:
    enabled: bool = True
    target: str | None = None  # target image; None uses the first training patch
    sparsity: float = DEFAULT_SPARSITY
    max_iters: int = 200


@dataclass
class SynthStageConfig:
    mode: str = "gan"  # gan: trained mask-to-image generator; toy: colorized renders
    count: int = 4650
    profile_resolution: int = 16
    sampler: SamplerParams = field(default_factory=SamplerParams)
    train: SynthTrainConfig = field(default_factory=SynthTrainConfig)

    def __post_init__(self) -> None:
        if isinstance(self.sampler, dict):
            self.sampler = SamplerParams(**self.sampler)
        if isinstance(self.train, dict):
            self.train = SynthTrainConfig(**self.train)
        if self.mode not in SYNTH_MODES:
            raise ValueError(f"synth mode must be one of {SYNTH_MODES}, got {self.mode!r}")
        if self.count < 0:
            raise ValueError("synthetic count must be nonnegative")


@dataclass
class InferenceConfig:
    tile: int = 256
    overlap: int = 32
    min_area: int = 30


@dataclass
class RunConfig:
    seed: int = 0
    tiles_dir: str = "tiles"
    work_dir: str = "work"
    created_at: str | None = None  # pin for byte-identical manifests across runs
    data: DataConfig = field(default_factory=DataConfig)
    stain: StainConfig = field(default_factory=StainConfig)
    synth: SynthStageConfig = field(default_factory=SynthStageConfig)
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"]["sampler"] = self.synth.sampler.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        _reject_unknown(cls, d, "config")
        nested = {"data": DataConfig, "stain": StainConfig, "synth": SynthStageConfig,
                  "seg": SegTrainConfig, "inference": InferenceConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                _reject_unknown(typ, d[key], key)
                d[key] = typ(**d[key])
        return cls(**d)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_yaml(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        cfg = cls.from_yaml(path.read_text(encoding="utf-8"))
        # relative paths resolve against the config file's directory
        base = path.resolve().parent
        cfg.tiles_dir = str(base / cfg.tiles_dir)
        cfg.work_dir = str(base / cfg.work_dir)
        if cfg.stain.target is not None:
            cfg.stain.target = str(base / cfg.stain.target)
        return cfg


def _reject_unknown(typ, d: dict, where: str) -> None:
    known = {f.name for f in fields(typ)}
    extra = sorted(set(d) - known)
    if extra:
        raise ValueError(f"unknown {where} keys {extra}; expected some of {sorted(known)}")
