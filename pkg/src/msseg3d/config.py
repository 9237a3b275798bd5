"""Experiment configuration: one JSON document with sections
{data, partition, model, train, ablation, analyze}.

The config snapshot written into a run directory is sufficient to reproduce
the run; no hidden state. Unknown keys are rejected so typos surface as
usage errors instead of silently running defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .volumes import PhantomSpec, SourceTransform


class ConfigError(ValueError):
    """Malformed configuration (usage error at the CLI boundary)."""


def _build(cls, mapping: dict, where: str):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where}: expected an object, got {type(mapping).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)} (known: {sorted(known)})")
    try:
        return cls(**mapping)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


@dataclass(frozen=True)
class AblationConfig:
    """The three method switches; rows exp1..exp5 of the ablation ladder."""

    use_mt: bool = True   # teacher/consistency training at all
    use_st: bool = True   # three students + two branch teachers (else single pair)
    use_swc: bool = True  # gated weighted consistency (else plain voxel MSE)

    def __post_init__(self):
        if self.use_st and not self.use_mt:
            raise ConfigError("use_st requires use_mt (branch teachers are EMA teachers)")


ABLATION_TABLE = {
    "exp1": AblationConfig(use_mt=False, use_st=False, use_swc=False),
    "exp2": AblationConfig(use_mt=True, use_st=False, use_swc=False),
    "exp3": AblationConfig(use_mt=True, use_st=False, use_swc=True),
    "exp4": AblationConfig(use_mt=True, use_st=True, use_swc=False),
    "exp5": AblationConfig(use_mt=True, use_st=True, use_swc=True),
}


def ablation_flags(name: str) -> AblationConfig:
    try:
        return ABLATION_TABLE[name]
    except KeyError:
        raise ConfigError(
            f"unknown ablation {name!r}; choose one of {sorted(ABLATION_TABLE)}"
        ) from None


@dataclass(frozen=True)
class SourceConfig:
    source_id: str
    n_train: int
    labeled: bool
    transform: SourceTransform = field(default_factory=SourceTransform)

    def __post_init__(self):
        if not self.source_id:
            raise ValueError("source_id must be nonempty")
        if self.n_train < 0:
            raise ValueError("n_train must be >= 0")


@dataclass(frozen=True)
class DataConfig:
    volume_dims: tuple[int, int, int] = (32, 32, 32)
    class_count: int = 2
    num_teeth: int = 3
    seed: int = 0
    test_per_source: int = 8
    sources: tuple[SourceConfig, ...] = ()

    def __post_init__(self):
        if self.test_per_source < 0:
            raise ValueError("test_per_source must be >= 0")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2 (background plus >= 1 tooth class)")
        if self.num_teeth < 1:
            raise ValueError("num_teeth must be >= 1")
        if len(self.volume_dims) != 3 or any(d < 1 for d in self.volume_dims):
            raise ValueError(f"volume_dims must be three positive ints, got {self.volume_dims}")
        ids = [s.source_id for s in self.sources]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate source ids in {ids}")

    def phantom_spec(self, source: SourceConfig) -> PhantomSpec:
        # all sources share one geometry seed: sample k is the same anatomy
        # everywhere, so inter-source differences are purely the transforms
        return PhantomSpec(
            source_id=source.source_id,
            num_teeth=self.num_teeth,
            class_count=self.class_count,
            volume_dims=tuple(self.volume_dims),
            transform=source.transform,
            rng_seed=self.seed,
        )


@dataclass(frozen=True)
class PartitionConfig:
    mixed_fraction: float = 0.5
    bins: int = 256
    per_source: bool = False

    def __post_init__(self):
        if not 0.0 <= self.mixed_fraction <= 1.0:
            raise ValueError("mixed_fraction must be in [0, 1]")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 8
    depth: int = 3
    in_channels: int = 1

    def __post_init__(self):
        if self.base_channels < 1 or self.depth < 1 or self.in_channels < 1:
            raise ValueError("base_channels, depth, and in_channels must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-4
    ema_decay: float = 0.99
    confidence_threshold: float = 0.9
    region_size: int = 4
    cons_weight_other: float = 0.5   # weight on the far-branch consistency term
    cons_weight_mixed: float = 0.5   # weight on the near-branch consistency term
    student_sync_rate: float = 0.0   # 0 disables cross-student parameter averaging
    student_sync_interval: int = 1   # steps between averaging events when enabled
    student_sync_main_weight: float = 1.0  # main's relative weight in the sync average
    weak_noise: float = 0.05         # teacher-input perturbation
    strong_noise: float = 0.1        # student-input perturbation
    strong_scale_jitter: float = 0.1  # +-10% intensity scaling on student inputs
    seed: int = 0
    checkpoint_every_steps: int = 0  # 0: checkpoints only at start and end
    eval_mode: str = "main"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must be in [0, 1]")
        if min(self.weak_noise, self.strong_noise, self.strong_scale_jitter) < 0:
            raise ValueError("perturbation magnitudes must be >= 0")
        if self.checkpoint_every_steps < 0:
            raise ValueError("checkpoint_every_steps must be >= 0")
        if not 0.0 < self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must be in (0, 1]")
        if self.cons_weight_other < 0 or self.cons_weight_mixed < 0:
            raise ValueError("consistency weights must be >= 0")
        if not 0.0 <= self.student_sync_rate <= 1.0:
            raise ValueError("student_sync_rate must be in [0, 1]")
        if self.student_sync_main_weight <= 0.0:
            raise ValueError("student_sync_main_weight must be > 0")
        if self.student_sync_interval < 1 or self.region_size < 1:
            raise ValueError("student_sync_interval and region_size must be >= 1")
        if self.eval_mode not in ("main", "ensemble"):
            raise ValueError(f"eval_mode must be 'main' or 'ensemble', got {self.eval_mode!r}")


@dataclass(frozen=True)
class AnalyzeConfig:
    kde_bandwidth: float = 0.05
    kde_points: int = 200
    embedding: str = "pca"  # or "tsne"
    seed: int = 0

    def __post_init__(self):
        if self.kde_bandwidth <= 0 or self.kde_points < 2:
            raise ValueError("kde_bandwidth must be > 0 and kde_points >= 2")
        if self.embedding not in ("pca", "tsne"):
            raise ValueError(f"embedding must be 'pca' or 'tsne', got {self.embedding!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: str = "exp5"
    analyze: AnalyzeConfig = field(default_factory=AnalyzeConfig)

    def __post_init__(self):
        ablation_flags(self.ablation)  # validates the name

    @property
    def flags(self) -> AblationConfig:
        return ablation_flags(self.ablation)

    def as_dict(self) -> dict:
        # JSON-canonical: every tuple becomes a list, so a dict produced here
        # equals the dict obtained by saving and re-reading the JSON file.
        d = asdict(self)
        d["data"]["volume_dims"] = list(self.data.volume_dims)
        d["data"]["sources"] = list(d["data"]["sources"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError(f"config root must be an object, got {type(d).__name__}")
        unknown = set(d) - {"data", "partition", "model", "train", "ablation", "analyze"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        data = dict(d.get("data", {}))
        if "volume_dims" in data:
            data["volume_dims"] = tuple(data["volume_dims"])
        if "sources" in data:
            data["sources"] = tuple(
                _build(
                    SourceConfig,
                    {**s, "transform": _build(
                        SourceTransform, s.get("transform", {}), f"data.sources[{i}].transform"
                    )},
                    f"data.sources[{i}]",
                )
                for i, s in enumerate(data["sources"])
            )
        ablation = d.get("ablation", "exp5")
        if not isinstance(ablation, str):
            raise ConfigError("ablation must be a string exp1..exp5")
        return cls(
            data=_build(DataConfig, data, "data"),
            partition=_build(PartitionConfig, d.get("partition", {}), "partition"),
            model=_build(ModelConfig, d.get("model", {}), "model"),
            train=_build(TrainConfig, d.get("train", {}), "train"),
            ablation=ablation,
            analyze=_build(AnalyzeConfig, d.get("analyze", {}), "analyze"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(raw)


def default_sources() -> tuple[SourceConfig, ...]:
    """Three-source default: a clean labeled main source, a mildly shifted
    unlabeled source (mixed candidate), and a strongly shifted one (other).
    The gap is carried by noise/blur, which normalization layers cannot undo.
    """
    return (
        SourceConfig(
            source_id="site-a",
            n_train=20,
            labeled=True,
            transform=SourceTransform(noise_stddev=0.02),
        ),
        SourceConfig(
            source_id="site-b",
            n_train=60,
            labeled=False,
            transform=SourceTransform(
                intensity_offset=0.03, noise_stddev=0.06, blur_radius=0.3
            ),
        ),
        SourceConfig(
            source_id="site-c",
            n_train=60,
            labeled=False,
            transform=SourceTransform(
                intensity_offset=-0.15, intensity_scale=0.8,
                noise_stddev=0.18, blur_radius=0.8,
            ),
        ),
    )


def default_config() -> ExperimentConfig:
    return ExperimentConfig(data=DataConfig(sources=default_sources()))


def merge_overrides(base: dict, overrides: dict) -> dict:
    """Recursively overlay CLI/flag overrides onto a config dict."""
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_overrides(out[key], value)
        else:
            out[key] = value
    return out
