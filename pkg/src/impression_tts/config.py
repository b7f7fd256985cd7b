"""One structured run configuration (TOML) covering every CLI command.

Unknown sections or keys are rejected so a config file fully determines a run.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .control import ControlConfig
from .errors import ConfigError
from .estimator import EstimatorConfig
from .llm import LlmClientConfig
from .model import ModelConfig


@dataclass
class CorpusSection:
    n_speakers: int = 40
    utts_per_speaker: int = 50
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    noise_sigma: float = 0.1


@dataclass
class TrainSection:
    preset: str = "desk"
    pretrain_steps: int | None = None
    gan_steps: int | None = None
    control_steps: int | None = None
    batch_size: int = 8
    pretrain_lr: float = 2e-3
    warmup: int = 400
    control_lr: float = 1e-3
    gan_lr: float = 1e-3
    ref_crop: int = 80
    pretrain_latent_noise: float = 1.0
    control_latent_noise: float = 0.0


@dataclass
class EstimatorSection:
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 32
    rnn_hidden: int = 128
    train_crop: int = 80
    mixup_alpha: float = 1.0
    mixup_spread: float = 0.5


@dataclass
class EvalSection:
    deltas: tuple[float, ...] = (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)
    n_utts: int = 20
    n_speakers: int = 2
    pair: tuple[str, str] = ("E", "H")
    similarity_utts: int = 3
    embedder_speakers: int = 30
    embedder_utts: int = 20
    embedder_epochs: int = 8


@dataclass
class PathsSection:
    work_dir: str = "run"

    @property
    def root(self) -> Path:
        return Path(self.work_dir)

    @property
    def corpus(self) -> Path:
        return self.root / "corpus"

    @property
    def backbone(self) -> Path:
        return self.root / "backbone.ckpt"

    @property
    def control(self) -> Path:
        return self.root / "control.ckpt"

    @property
    def estimator(self) -> Path:
        return self.root / "estimator.ckpt"

    @property
    def embedder(self) -> Path:
        return self.root / "embedder.ckpt"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    train: TrainSection = field(default_factory=TrainSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    eval: EvalSection = field(default_factory=EvalSection)
    llm: LlmClientConfig = field(default_factory=LlmClientConfig)
    paths: PathsSection = field(default_factory=PathsSection)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "")

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def estimator_config(self) -> EstimatorConfig:
        e = self.estimator
        return EstimatorConfig(n_ssl_layers=self.model.n_ssl_layers, ssl_dim=self.model.ssl_dim,
                               frontend_seed=self.model.frontend_seed, rnn_hidden=e.rnn_hidden, lr=e.lr,
                               batch_size=e.batch_size, train_crop=e.train_crop, mixup_alpha=e.mixup_alpha,
                               mixup_spread=e.mixup_spread)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section [{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) in [{where or 'root'}]: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        key = f"{where}.{name}" if where else name
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, key)
        elif isinstance(current, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{key} must be an array")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid values in [{where or 'root'}]: {exc}") from exc
