"""Run configuration: flat ``section.key=value`` text files with presets.

Precedence: built-in defaults < config file < preset < command-line
overrides.  A run's fully-resolved config serializes to canonical sorted
text, which is what gets hashed into checkpoints and written beside outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .microworld import WorldConfig
from .model import FeatureSpace, ModelConfig
from .vocab import Vocabulary

PRESETS = ("row1", "row2", "row3", "row4", "row5")

WIDTH_PRESETS = {"toy": 64, "paper": 768}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_weight: float = 10.0
    beam_width: int = 2
    batch_size: int = 4
    mix: str = "1:1"  # labelled:unlabelled per batch
    learning_rate: float = 1e-5
    weight_decay: float = 1e-5
    epochs: int = 30
    seed: int = 0
    scr: bool = True
    scr_warmup_epochs: int = 1
    use_answer_ce: bool = True
    use_explanation_ce: bool = True
    unlabelled_answer_ce: bool = True
    explanatory_human_only: bool = False
    use_unlabelled: bool = True
    inference: str = "two_stage"  # or "base"
    max_rationale_len: int = 12
    max_answer_len: int = 4
    frontier_cap: int = 512
    keep_epoch_checkpoints: bool = False

    def mix_parts(self) -> tuple[int, int]:
        try:
            lab, unlab = (int(part) for part in self.mix.split(":"))
        except ValueError:
            raise ConfigError(f"train.mix must look like '1:1', got {self.mix!r}") from None
        if lab < 1 or unlab < 1:
            raise ConfigError("train.mix parts must be >= 1")
        return lab, unlab

    def validate(self) -> "TrainConfig":
        if self.lambda_weight < 0:
            raise ConfigError("train.lambda_weight must be >= 0")
        if self.beam_width < 1:
            raise ConfigError("train.beam_width must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.scr_warmup_epochs < 0:
            raise ConfigError("train.scr_warmup_epochs must be >= 0")
        if self.inference not in ("two_stage", "base"):
            raise ConfigError(f"train.inference must be two_stage or base, got {self.inference!r}")
        self.mix_parts()
        return self


@dataclass(frozen=True)
class ModelSettings:
    width_preset: str = "toy"
    embed_dim: int = 0  # 0: resolved from width_preset
    n_heads: int = 4
    n_blocks: int = 2
    ff_mult: int = 4
    max_seq_len: int = 64
    scene_tokens: int = 10
    encoder_hidden: int = 128
    score_mean: str = "arithmetic"
    train_encoder: bool = True
    dtype: str = "float64"
    extra_shapes: tuple[str, ...] = ()
    extra_colors: tuple[str, ...] = ()
    extra_sizes: tuple[str, ...] = ()

    def resolved_embed_dim(self) -> int:
        if self.embed_dim:
            return self.embed_dim
        if self.width_preset not in WIDTH_PRESETS:
            raise ConfigError(f"unknown model.width_preset {self.width_preset!r}")
        return WIDTH_PRESETS[self.width_preset]


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = ""

    def validate(self) -> "RunConfig":
        self.world.validate()
        self.train.validate()
        self.model.resolved_embed_dim()
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose one of {PRESETS}")
        return self


# the ablation ladder: each preset pins the mechanism toggles
PRESET_OVERRIDES: dict[str, dict[str, str]] = {
    "row1": {  # answer CE only
        "train.use_answer_ce": "true",
        "train.use_explanation_ce": "false",
        "train.scr": "false",
        "train.use_unlabelled": "false",
        "train.lambda_weight": "0",
        "train.inference": "base",
    },
    "row2": {  # explanation CE only
        "train.use_answer_ce": "false",
        "train.use_explanation_ce": "true",
        "train.scr": "false",
        "train.use_unlabelled": "false",
        "train.lambda_weight": "0",
        "train.inference": "base",
    },
    "row3": {  # joint CE baseline
        "train.use_answer_ce": "true",
        "train.use_explanation_ce": "true",
        "train.scr": "false",
        "train.use_unlabelled": "false",
        "train.lambda_weight": "0",
        "train.inference": "base",
    },
    "row4": {  # + self-critical reinforcement
        "train.use_answer_ce": "true",
        "train.use_explanation_ce": "true",
        "train.scr": "true",
        "train.use_unlabelled": "false",
        "train.inference": "two_stage",
    },
    "row5": {  # + unlabelled samples
        "train.use_answer_ce": "true",
        "train.use_explanation_ce": "true",
        "train.scr": "true",
        "train.use_unlabelled": "true",
        "train.inference": "two_stage",
    },
}

_SECTIONS = {"world": WorldConfig, "model": ModelSettings, "train": TrainConfig}


def _parse_value(raw: str, annotation, key: str):
    raw = raw.strip()
    if annotation in ("int", int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r} needs an integer, got {raw!r}") from None
    if annotation in ("float", float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r} needs a number, got {raw!r}") from None
    if annotation in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r} needs true/false, got {raw!r}")
    if annotation in ("str", str):
        return raw
    # remaining fields are token tuples, comma-separated
    return tuple(part.strip() for part in raw.split(",") if part.strip())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _field_map() -> dict[str, tuple[str, str, object]]:
    mapping = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            mapping[f"{section}.{f.name}"] = (section, f.name, f.type)
    mapping["preset"] = ("", "preset", str)
    return mapping


_FIELDS = _field_map()


def apply_overrides(config: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply raw key=value strings; unknown keys are rejected by name."""
    sections = {
        "world": dict(),
        "model": dict(),
        "train": dict(),
    }
    preset = None
    for key, raw in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        section, name, annotation = _FIELDS[key]
        if key == "preset":
            preset = raw.strip()
            continue
        sections[section][name] = _parse_value(raw, annotation, key)
    config = dataclasses.replace(
        config,
        world=dataclasses.replace(config.world, **sections["world"]),
        model=dataclasses.replace(config.model, **sections["model"]),
        train=dataclasses.replace(config.train, **sections["train"]),
    )
    if preset is not None:
        config = dataclasses.replace(config, preset=preset)
    return config


def apply_preset(config: RunConfig) -> RunConfig:
    if not config.preset:
        return config
    if config.preset not in PRESET_OVERRIDES:
        raise ConfigError(f"unknown preset {config.preset!r}; choose one of {PRESETS}")
    return apply_overrides(config, PRESET_OVERRIDES[config.preset])


def preset_train_config(train: TrainConfig, preset: str) -> TrainConfig:
    """Apply one ablation preset's toggles directly to a TrainConfig."""
    if not preset:
        return train
    if preset not in PRESET_OVERRIDES:
        raise ConfigError(f"unknown preset {preset!r}; choose one of {PRESETS}")
    updates = {}
    for key, raw in PRESET_OVERRIDES[preset].items():
        _, name, annotation = _FIELDS[key]
        updates[name] = _parse_value(raw, annotation, key)
    return dataclasses.replace(train, **updates)


def parse_kv_text(text: str, *, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        out[key.strip()] = raw.strip()
    return out


def load_run_config(
    path: str | Path | None = None,
    *,
    preset: str | None = None,
    overrides: list[str] | None = None,
) -> RunConfig:
    config = RunConfig()
    if path is not None:
        config = apply_overrides(config, parse_kv_text(Path(path).read_text(), source=str(path)))
    if preset:
        config = dataclasses.replace(config, preset=preset)
    config = apply_preset(config)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, raw = item.partition("=")
        config = apply_overrides(config, {key.strip(): raw.strip()})
        if key.strip() == "preset":
            config = apply_preset(config)
    return config.validate()


def resolved_text(config: RunConfig) -> str:
    """Canonical, fully-resolved config: sorted key=value lines."""
    lines = []
    for key in sorted(_FIELDS):
        section, name, _ = _FIELDS[key]
        if key == "preset":
            value = config.preset
        else:
            value = getattr(getattr(config, section), name)
        lines.append(f"{key}={_format_value(value)}")
    return "".join(line + "\n" for line in lines)


def build_components(config: RunConfig) -> tuple[Vocabulary, FeatureSpace, ModelConfig]:
    """The vocabulary, featurizer space, and model config a run needs."""
    extra_tokens = config.model.extra_shapes + config.model.extra_colors + config.model.extra_sizes
    vocab = Vocabulary.for_world(config.world, extra_tokens=extra_tokens)
    space = FeatureSpace.from_world(
        config.world,
        extra_shapes=config.model.extra_shapes,
        extra_colors=config.model.extra_colors,
        extra_sizes=config.model.extra_sizes,
    )
    model_config = ModelConfig(
        vocab_size=len(vocab),
        feature_dim=space.dim,
        embed_dim=config.model.resolved_embed_dim(),
        n_heads=config.model.n_heads,
        n_blocks=config.model.n_blocks,
        ff_mult=config.model.ff_mult,
        max_seq_len=config.model.max_seq_len,
        scene_tokens=config.model.scene_tokens,
        encoder_hidden=config.model.encoder_hidden,
        score_mean=config.model.score_mean,
        train_encoder=config.model.train_encoder,
        dtype=config.model.dtype,
        seed=config.train.seed,
    )
    return vocab, space, model_config
