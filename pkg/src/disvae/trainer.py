"""Training loop: sample same-speaker pairs, minimize the total loss with Adam, checkpoint.

Every step draws its randomness (pair sampling and reparameterization noise)
from a generator seeded with ``(seed, step)``. A run is therefore a pure
function of seed, corpus and config, and resuming from a checkpoint needs no
saved RNG state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .autograd import Tape, Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .data import CorpusManifest, FeatureCache, SegmentPair, sample_batch
from .errors import NumericError, TrainingError
from .model import DisentangledVAE, ModelConfig, total_loss
from .optim import Adam, clip_grad_norm
from .autograd import resolve_dtype

log = logging.getLogger(__name__)

LOG_HEADER = "step,total,recon,kl\n"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    beta: float = 1.0
    total_steps: int = 1000
    checkpoint_every: int = 500
    seed: int = 0
    precision: str = "f32"
    clip_grad_norm: float | None = None
    log_every: int = 100
    # "<speaker_id>/<utterance_id>" entries kept out of training, e.g. seen-speaker test utterances
    reserved_utterances: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "reserved_utterances", tuple(self.reserved_utterances))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.beta < 1:
            raise ValueError("beta must be >= 1")
        if self.total_steps < 0 or self.checkpoint_every < 1:
            raise ValueError("total_steps must be >= 0 and checkpoint_every >= 1")
        resolve_dtype(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def batch_arrays(batch: list[SegmentPair], dtype) -> tuple[Tensor, Tensor]:
    x1 = Tensor(np.stack([p.x1 for p in batch]), dtype=dtype)
    x2 = Tensor(np.stack([p.x2 for p in batch]), dtype=dtype)
    return x1, x2


def _provenance(batch: list[SegmentPair]) -> str:
    return "; ".join(f"{p.speaker_id}:{p.utterance_ids[0]}@{p.offsets[0]}+{p.utterance_ids[1]}@{p.offsets[1]}"
                     for p in batch)


def train_step(model: DisentangledVAE, optimizer: Adam, batch: list[SegmentPair], cfg: TrainConfig,
               rng: np.random.Generator, step: int = 0) -> tuple[float, dict]:
    """One Adam update on the batch-averaged total loss."""
    if len(batch) != cfg.batch_size:
        raise ValueError(f"batch has {len(batch)} pairs, config expects {cfg.batch_size}")
    model.train()
    x1, x2 = batch_arrays(batch, model.dtype)
    try:
        with Tape() as tape:
            loss, diag = total_loss(x1, x2, model, cfg.beta, rng)
        if not np.isfinite(loss.data):
            raise NumericError("loss is not finite")
    except NumericError as exc:
        raise TrainingError(f"step {step}: {exc}; batch {_provenance(batch)}") from exc
    optimizer.zero_grad()
    backward(loss, tape, optimizer.params)
    tape.free()
    if cfg.clip_grad_norm is not None:
        diag["grad_norm"] = clip_grad_norm(optimizer.params, cfg.clip_grad_norm)
    optimizer.step()
    return float(loss.data), diag


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step:07d}.dvc"


def _rewind_log(path: Path, step: int):
    """Drop loss rows written after ``step`` (left behind by an interrupted run)."""
    if not path.exists():
        path.write_text(LOG_HEADER)
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= step]
    path.write_text("".join(kept))


def train_loop(manifest: CorpusManifest, model_cfg: ModelConfig, cfg: TrainConfig, out_dir,
               resume=None) -> Path:
    """Train for ``cfg.total_steps`` updates; returns the final checkpoint path.

    Checkpoints go to ``out_dir/ckpt_<step>.dvc`` (step 0, every
    ``checkpoint_every`` steps, and the last step); losses to ``out_dir/loss.csv``.
    """
    if cfg.reserved_utterances:
        manifest = manifest.without(cfg.reserved_utterances)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss.csv"
    if resume is not None:
        model, step = load_checkpoint(resume)
        _rewind_log(log_path, step)
        log.info("resumed from %s at step %d", resume, step)
    else:
        model = DisentangledVAE(model_cfg, seed=cfg.seed)
        step = 0
        log_path.write_text(LOG_HEADER)
        save_checkpoint(checkpoint_path(out_dir, 0), model, 0)
    model.to(resolve_dtype(cfg.precision))
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    cache = FeatureCache()
    last = checkpoint_path(out_dir, step)

    with open(log_path, "a") as fh:
        while step < cfg.total_steps:
            step += 1
            rng = step_rng(cfg.seed, step)
            batch = sample_batch(manifest, rng, cfg.batch_size, cache)
            loss, diag = train_step(model, optimizer, batch, cfg, rng, step)
            fh.write(f"{step},{loss!r},{diag['recon']!r},{diag['kl']!r}\n")
            fh.flush()
            if step % cfg.log_every == 0:
                log.info("step %d total %.4f recon %.4f kl_s %.4f kl_c %.4f",
                         step, loss, diag["recon"], diag["kl_s"], diag["kl_c"])
            if step % cfg.checkpoint_every == 0 or step == cfg.total_steps:
                last = checkpoint_path(out_dir, step)
                save_checkpoint(last, model, step)
    return last


def read_loss_log(path) -> np.ndarray:
    """Loss log as an (n, 4) array of step, total, recon, kl."""
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
