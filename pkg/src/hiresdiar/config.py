"""Layered run configuration: declared defaults < file < environment < flags.

Every consumable key is declared here with a type and default; unknown
keys are rejected at load time no matter which layer supplies them. The
file format is plain text, one dotted ``key = value`` per line. The
environment layer uses the ``HIRESDIAR_`` prefix with ``__`` standing in
for the dot (``HIRESDIAR_REFINE__DIM=16``).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .features import FeatureConfig, frames_for_duration
from .model import ModelConfig
from .pipeline import PipelineConfig
from .synthesis import SynthesisConfig
from .training import TrainConfig

ENV_PREFIX = "HIRESDIAR_"


class UserError(Exception):
    """Invalid input or configuration; reported without a traceback (exit 1)."""


# key -> (type tag, default). Type tags: int, float, bool, str,
# floats (comma list), ints (comma list).
SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    "workers": ("int", 1),
    # signal front end
    "sample_rate": ("int", 16000),
    "n_mels": ("int", 64),
    "frame_hop_s": ("float", 0.010),
    "frame_window_s": ("float", 0.025),
    # model
    "d_model": ("int", 128),
    "n_enhancer_blocks": ("int", 5),
    "n_heads": ("int", 4),
    "conv_expansion": ("int", 4),
    # mixture synthesis
    "mixture_dur_s": ("float", 12.8),
    "samples_per_mixture": ("int", 4),
    "speaker_count_probs": ("floats", (0.10, 0.30, 0.30, 0.30)),
    "aug_pass_prob": ("float", 0.5),
    "snr_db_range": ("floats", (0.0, 20.0)),
    "specaug_drops_range": ("ints", (2, 5)),
    "specaug_width_range": ("ints", (1, 8)),
    "block_dur_range_s": ("floats", (0.5, 3.0)),
    "shuffle": ("bool", True),
    "specaug": ("bool", True),
    "augment": ("bool", True),
    "noise_dir": ("str", ""),
    "rir_dir": ("str", ""),
    # training
    "epochs": ("int", 20),
    "freeze_epochs": ("int", 10),
    "batches_per_epoch": ("int", 50),
    "batch_size": ("int", 100),
    "lr": ("float", 1e-3),
    "grad_clip": ("float", 0.0),
    "pretrain_steps": ("int", 500),
    "pretrain_batch_size": ("int", 64),
    "pretrain_frames": ("int", 288),
    # diarization pipeline
    "window_s": ("float", 3.2),
    "shift_s": ("float", 0.8),
    "refine.enabled": ("bool", True),
    "refine.dim": ("int", 32),
    "refine.attention_scale": ("float", 30.0),
    "top_p": ("float", 0.25),
    "eig_threshold": ("float", 0.3),
    "max_speakers": ("int", 10),
}


def _parse_value(key: str, raw: object) -> object:
    """Coerce a raw (usually string) value to the key's declared type."""
    tag = SCHEMA[key][0]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if tag == "int":
            return int(text)
        if tag == "float":
            return float(text)
        if tag == "bool":
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if tag == "floats":
            return tuple(float(p) for p in text.split(",") if p.strip())
        if tag == "ints":
            return tuple(int(p) for p in text.split(",") if p.strip())
        return text
    except ValueError as exc:
        raise UserError(f"config key {key!r}: {exc}") from exc


def _reject_unknown(keys, source: str) -> None:
    unknown = sorted(set(keys) - set(SCHEMA))
    if unknown:
        raise UserError(f"unknown config key(s) from {source}: {', '.join(unknown)}")


def _parse_config_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UserError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def _env_overrides(env) -> dict[str, str]:
    values: dict[str, str] = {}
    for name, value in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        values[key] = value
    return values


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration with typed accessors per module."""

    values: dict

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise KeyError(f"undeclared config key {key!r}")
        return self.values[key]

    def resolved(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in sorted(self.values.items())}

    # -- per-module builders -------------------------------------------------

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(sample_rate=self["sample_rate"], n_mels=self["n_mels"],
                             frame_hop_s=self["frame_hop_s"],
                             frame_window_s=self["frame_window_s"])

    def model_config(self, n_classes: int | None = None) -> ModelConfig:
        return ModelConfig(n_mels=self["n_mels"], d_model=self["d_model"],
                           n_enhancer_blocks=self["n_enhancer_blocks"],
                           n_heads=self["n_heads"],
                           conv_expansion=self["conv_expansion"], n_classes=n_classes)

    def synthesis_config(self) -> SynthesisConfig:
        mixture_frames = frames_for_duration(self["mixture_dur_s"], self["frame_hop_s"])
        per = self["samples_per_mixture"]
        if per < 1 or mixture_frames % per:
            raise UserError(
                f"mixture of {mixture_frames} frames does not split into "
                f"{per} equal samples")
        return SynthesisConfig(
            mixture_dur_s=self["mixture_dur_s"], samples_per_mixture=per,
            sample_frames=mixture_frames // per,
            speaker_count_probs=self["speaker_count_probs"],
            block_dur_range_s=self["block_dur_range_s"],
            specaug_drops_range=self["specaug_drops_range"],
            specaug_width_range=self["specaug_width_range"],
            aug_pass_prob=self["aug_pass_prob"], snr_db_range=self["snr_db_range"],
            augment_enabled=self["augment"], specaug_enabled=self["specaug"],
            shuffle_enabled=self["shuffle"],
            noise_dir=self["noise_dir"] or None, rir_dir=self["rir_dir"] or None)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["epochs"], freeze_epochs=self["freeze_epochs"],
            batches_per_epoch=self["batches_per_epoch"], batch_size=self["batch_size"],
            lr=self["lr"], grad_clip=self["grad_clip"] or None, seed=self["seed"],
            pretrain_steps=self["pretrain_steps"],
            pretrain_batch_size=self["pretrain_batch_size"],
            pretrain_frames=self["pretrain_frames"])

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            window_s=self["window_s"], shift_s=self["shift_s"],
            refine_enabled=self["refine.enabled"], refine_dim=self["refine.dim"],
            refine_attention_scale=self["refine.attention_scale"],
            top_p=self["top_p"], eig_threshold=self["eig_threshold"],
            max_speakers=self["max_speakers"], seed=self["seed"])


def load_config(config_file: str | Path | None = None,
                env=None,
                overrides: dict[str, object] | None = None) -> RunConfig:
    """Merge defaults, file, environment, and flag overrides (in that order)."""
    values = {key: default for key, (_, default) in SCHEMA.items()}

    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            raise UserError(f"config file not found: {path}")
        file_values = _parse_config_file(path)
        _reject_unknown(file_values, str(path))
        values.update({k: _parse_value(k, v) for k, v in file_values.items()})

    env_values = _env_overrides(os.environ if env is None else env)
    _reject_unknown(env_values, "environment")
    values.update({k: _parse_value(k, v) for k, v in env_values.items()})

    if overrides:
        _reject_unknown(overrides, "command line")
        values.update({k: _parse_value(k, v) for k, v in overrides.items()})

    return RunConfig(values)
