"""Run configuration: flat dotted keys, file values overridden by flags.

A config file is plain text, one ``key = value`` per line, ``#`` comments.
Every run resolves the full key set up front; the resolved listing is echoed,
written next to the outputs, and hashed into checkpoints for provenance.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .matching import Ablation
from .params import ModelDims
from .synth import SynthSpec
from .training import TrainConfig

__all__ = ["ConfigError", "RunConfig", "CONFIG_SCHEMA"]


class ConfigError(ValueError):
    """Bad key, bad value, or an unusable combination."""


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default)
CONFIG_SCHEMA: dict[str, tuple] = {
    "model.embed": (int, 64),
    "model.hidden": (int, 64),
    "model.visual": (int, 32),
    "train.batch_size": (int, 15),
    "train.learning_rate": (float, 0.0004),
    "train.lr_decay_factor": (float, 10.0),
    "train.lr_decay_every": (int, 8000),
    "train.margin": (float, 0.1),
    "train.max_iterations": (int, 2000),
    "train.seed": (int, 0),
    "train.heldout_fraction": (float, 0.2),
    "train.checkpoint_every": (int, 500),
    "synth.num_images": (int, 500),
    "synth.regions_per_image": (int, 4),
    "synth.vocab_size": (int, 25),
    "synth.num_attribute_factors": (int, 3),
    "synth.noise_std": (float, 0.1),
    "synth.seed": (int, 0),
    "ablation.subj": (str, "mutual"),
    "ablation.loc": (str, "mutual"),
    "ablation.rel": (str, "mutual"),
    "data.path": (str, ""),
    "eval.protocol": (str, "gt"),
    "eval.dump_limit": (int, 20),
}


def _read_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


@dataclass
class RunConfig:
    values: dict[str, object]

    @classmethod
    def resolve(cls, config_file=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        """Defaults, then file values, then flag overrides; rejects unknown keys."""
        resolved = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
        layers = []
        if config_file is not None:
            layers.append(_read_config_file(config_file))
        if overrides:
            layers.append(dict(overrides))
        for layer in layers:
            for key, raw in layer.items():
                if key not in CONFIG_SCHEMA:
                    raise ConfigError(f"unknown config key {key!r}")
                parser = CONFIG_SCHEMA[key][0]
                if isinstance(raw, str):
                    try:
                        resolved[key] = parser(raw)
                    except ValueError as exc:
                        raise ConfigError(f"bad value for {key}: {exc}") from None
                else:
                    resolved[key] = raw
        cfg = cls(values=resolved)
        cfg.ablation()  # validates the mode names
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    def to_lines(self) -> list[str]:
        return [f"{key} = {self.values[key]}" for key in sorted(self.values)]

    def config_hash(self) -> str:
        text = "\n".join(self.to_lines())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def ablation(self) -> Ablation:
        return Ablation(subj=self["ablation.subj"], loc=self["ablation.loc"],
                        rel=self["ablation.rel"])

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(
            batch_size=self["train.batch_size"],
            learning_rate=self["train.learning_rate"],
            lr_decay_factor=self["train.lr_decay_factor"],
            lr_decay_every=self["train.lr_decay_every"],
            margin=self["train.margin"],
            max_iterations=self["train.max_iterations"],
            seed=self["train.seed"],
            ablation=self.ablation(),
        )
        cfg.validate()
        return cfg

    def synth_spec(self) -> SynthSpec:
        spec = SynthSpec(
            num_images=self["synth.num_images"],
            regions_per_image=self["synth.regions_per_image"],
            vocab_size=self["synth.vocab_size"],
            num_attribute_factors=self["synth.num_attribute_factors"],
            noise_std=self["synth.noise_std"],
            seed=self["synth.seed"],
        )
        spec.validate()
        return spec

    def model_dims(self, vocab_size: int, feature_dim: int | None = None) -> ModelDims:
        """Model shapes; vocabulary size comes from the dataset at hand."""
        visual = self["model.visual"]
        if feature_dim is not None and feature_dim != visual:
            raise ConfigError(
                f"model.visual = {visual} but the dataset carries {feature_dim}-dim features")
        return ModelDims(vocab_size=vocab_size, embed=self["model.embed"],
                         hidden=self["model.hidden"], visual=visual)
