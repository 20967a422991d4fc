"""Two-stage training: utterance-level pretraining, then per-position training.

Stage 1 trains the convolutional backbone as a plain utterance classifier
(stats pooling plus margin softmax). Stage 2 attaches a randomly
initialized enhancer and a fresh per-position head, keeps the backbone
frozen through the first half of the schedule, then fine-tunes everything.
Batches are a pure function of the step index, so training is resumable
and bit-reproducible from any epoch checkpoint.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import SpeakerCorpus
from .features import FeatureConfig, MelExtractor
from .model import (
    CHECKPOINT_SCHEMA,
    HeeModel,
    ModelConfig,
    PooledSpeakerModel,
    majority_vote_positions,
    save_checkpoint,
)
from .synthesis import MixtureSynthesizer


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    freeze_epochs: int = 10
    batches_per_epoch: int = 50
    batch_size: int = 100
    lr: float = 1e-3
    grad_clip: float | None = None
    seed: int = 0
    pretrain_steps: int = 500
    pretrain_batch_size: int = 64
    pretrain_frames: int = 288

    def __post_init__(self):
        if self.epochs < 1 or self.batches_per_epoch < 1:
            raise ValueError("epochs and batches_per_epoch must be >= 1")
        if not 0 <= self.freeze_epochs <= self.epochs:
            raise ValueError("freeze_epochs must lie in [0, epochs]")
        if self.batch_size < 1 or self.pretrain_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.pretrain_frames % 8 != 0:
            raise ValueError("pretrain_frames must be divisible by 8")


class _JsonlLogger:
    """Append-only JSONL training log; truncates stale steps on resume."""

    def __init__(self, path: Path, start_step: int):
        self.path = Path(path)
        if self.path.exists() and start_step > 0:
            kept = [line for line in self.path.read_text().splitlines()
                    if line.strip() and json.loads(line).get("step", -1) < start_step]
            self.path.write_text("".join(f"{line}\n" for line in kept))
        elif self.path.exists():
            self.path.unlink()

    def log(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")


def _atomic_torch_save(payload: dict, path: Path) -> None:
    tmp = Path(f"{path}.tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Stage 1: utterance-level backbone pretraining.
# ---------------------------------------------------------------------------

def _mel_cache(corpus: SpeakerCorpus, feature_config: FeatureConfig) -> list[list[np.ndarray]]:
    extractor = MelExtractor(feature_config)
    return [[extractor(w).frames for w in utts] for utts in corpus.utterances]


def pretrain_backbone(
    corpus: SpeakerCorpus,
    model_config: ModelConfig,
    config: TrainConfig,
    workdir: Path,
    feature_config: FeatureConfig | None = None,
) -> Path:
    """Train a pooled utterance classifier; return the checkpoint path."""
    if corpus.n_speakers < 2:
        raise ValueError(f"pretraining needs >= 2 speakers, got {corpus.n_speakers}")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    feature_config = feature_config or FeatureConfig()
    model_config = ModelConfig(**{**asdict(model_config), "n_classes": corpus.n_speakers})

    torch.manual_seed(config.seed)
    model = PooledSpeakerModel(model_config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    mels = _mel_cache(corpus, feature_config)
    logger = _JsonlLogger(workdir / "pretrain_log.jsonl", start_step=0)

    model.train()
    for step in range(config.pretrain_steps):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed,
                                                            spawn_key=(2, step)))
        frames, labels = [], []
        for _ in range(config.pretrain_batch_size):
            spk = int(rng.integers(corpus.n_speakers))
            mel = mels[spk][int(rng.integers(len(mels[spk])))]
            if mel.shape[0] < config.pretrain_frames:
                raise ValueError(
                    f"utterance of {mel.shape[0]} frames shorter than "
                    f"pretrain_frames={config.pretrain_frames}")
            start = int(rng.integers(mel.shape[0] - config.pretrain_frames + 1))
            frames.append(mel[start:start + config.pretrain_frames])
            labels.append(spk)
        batch = torch.from_numpy(np.stack(frames))
        target = torch.tensor(labels, dtype=torch.long)

        loss = model(batch, target)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite pretraining loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        if config.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()

        with torch.no_grad():
            acc = (model.head.cosine_logits(model.embed_utterance(batch))
                   .argmax(dim=1) == target).float().mean().item()
        logger.log({"step": step, "loss": round(loss.item(), 6), "acc": round(acc, 4)})

    model.eval()
    path = workdir / "backbone.pt"
    save_checkpoint(path, model, kind="backbone-pretrain",
                    extra={"n_speakers": corpus.n_speakers})
    return path


# ---------------------------------------------------------------------------
# Stage 2: per-position training on synthesized mixtures.
# ---------------------------------------------------------------------------

TRAIN_STATE_SCHEMA = 1


def _save_train_state(path: Path, step: int, model, optimizer,
                      config: TrainConfig) -> None:
    _atomic_torch_save({
        "schema_version": TRAIN_STATE_SCHEMA,
        "kind": "train-state",
        "step": step,
        "train_config": asdict(config),
        "model_config": asdict(model.config),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "torch_rng_state": torch.get_rng_state(),
    }, path)


def _load_train_state(path: Path, config: TrainConfig, model_config: ModelConfig) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"unreadable training state {path}: {exc}") from exc
    if payload.get("kind") != "train-state" or "schema_version" not in payload:
        raise ValueError(f"{path} is not a training state file")
    if payload["schema_version"] != TRAIN_STATE_SCHEMA:
        raise ValueError(f"training state schema {payload['schema_version']} unsupported")
    if payload["train_config"] != asdict(config):
        raise ValueError("resume config does not match saved training configuration")
    if payload["model_config"] != asdict(model_config):
        raise ValueError("resume model configuration does not match saved state")
    return payload


def _set_backbone_frozen(model: HeeModel, frozen: bool) -> None:
    for param in model.backbone.parameters():
        param.requires_grad_(not frozen)


def train_hee(
    synthesizer: MixtureSynthesizer,
    n_classes: int,
    model_config: ModelConfig,
    config: TrainConfig,
    workdir: Path,
    pretrained: dict | None = None,
    resume: bool = False,
) -> tuple[Path, Path]:
    """Train the high-resolution extractor on synthesized mixtures.

    Returns (training checkpoint, inference checkpoint). With ``resume``
    the loop continues from ``workdir/train_state.pt``.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    model_config = ModelConfig(**{**asdict(model_config), "n_classes": n_classes})
    if synthesizer.config.sample_frames % 8 != 0:
        raise ValueError("sample_frames must be divisible by 8")

    torch.manual_seed(config.seed)
    model = HeeModel(model_config)
    if pretrained is not None:
        if pretrained.get("kind") != "backbone-pretrain":
            raise ValueError("stage-2 training expects a backbone-pretrain checkpoint")
        backbone_state = {k[len("backbone."):]: v
                          for k, v in pretrained["state_dict"].items()
                          if k.startswith("backbone.")}
        model.backbone.load_state_dict(backbone_state)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    state_path = workdir / "train_state.pt"
    start_step = 0
    if resume:
        payload = _load_train_state(state_path, config, model_config)
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        torch.set_rng_state(payload["torch_rng_state"])
        start_step = payload["step"]

    logger = _JsonlLogger(workdir / "train_log.jsonl", start_step)
    total_steps = config.epochs * config.batches_per_epoch
    frozen: bool | None = None

    model.train()
    for step in range(start_step, total_steps):
        epoch = step // config.batches_per_epoch + 1
        want_frozen = epoch <= config.freeze_epochs
        if want_frozen != frozen:
            _set_backbone_frozen(model, want_frozen)
            frozen = want_frozen

        samples = synthesizer.batch(step, config.batch_size)
        features = torch.from_numpy(np.stack([s.features for s in samples]))
        frame_labels = np.stack([s.labels for s in samples])
        positions = torch.from_numpy(
            majority_vote_positions(frame_labels).astype(np.int64))

        embeddings = model(features)
        loss = model.head(embeddings.reshape(-1, embeddings.shape[-1]),
                          positions.reshape(-1))
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite loss at step {step} (epoch {epoch})")
        optimizer.zero_grad()
        loss.backward()
        if config.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()

        logger.log({"step": step, "epoch": epoch, "loss": round(loss.item(), 6),
                    "backbone_frozen": frozen})
        if (step + 1) % config.batches_per_epoch == 0:
            _save_train_state(state_path, step + 1, model, optimizer, config)

    model.eval()
    train_path = workdir / "hee_train.pt"
    infer_path = workdir / "hee.pt"
    save_checkpoint(train_path, model, kind="hee-training")
    save_checkpoint(infer_path, model, kind="hee-inference")
    return train_path, infer_path
