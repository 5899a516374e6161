"""Disentangled VAE: pairwise encoder with a shared speaker latent, decoder, post-net, losses.

A pair of segments from one speaker is encoded independently. The speaker
blocks of the two posteriors are merged into one shared Gaussian (means
averaged, variances averaged), while each segment keeps its own content
block. Each segment is then reconstructed from ``z = z_speaker (+) z_content``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError
from .layers import BatchNorm1d, BiLSTM, Conv1d, LSTM, Linear, Module

ENCODER_STRIDES = (2, 2, 1)


@dataclass(frozen=True)
class ModelConfig:
    k: int = 64
    k1: int = 8
    k2: int = 56
    segment_frames: int = 64
    n_mels: int = 80
    beta: float = 1.0
    # layer widths; the defaults are the full-size model
    conv_channels: int = 512
    kernel: int = 5
    enc_lstm_hidden: int = 64
    enc_lstm_layers: int = 2
    enc_fc: int = 256
    dec_fc: int = 256
    dec_seq_width: int = 128
    dec_lstm1_hidden: int = 512
    dec_lstm2_hidden: int = 1024
    dec_lstm2_layers: int = 2
    postnet_channels: int = 512
    logvar_clamp: float = 8.0
    # ELBO reconstruction term: "mean" is per-entry MSE, "sum" is the 0.5*SSE Gaussian NLL
    recon_reduction: str = "mean"

    def __post_init__(self):
        if self.k1 + self.k2 != self.k:
            raise ValueError(f"k1 + k2 must equal k ({self.k1} + {self.k2} != {self.k})")
        if self.beta < 1:
            raise ValueError(f"beta must be >= 1, got {self.beta}")
        if self.recon_reduction not in ("mean", "sum"):
            raise ValueError(f"recon_reduction must be 'mean' or 'sum', got {self.recon_reduction!r}")
        if self.segment_frames % 4:
            raise ValueError("segment_frames must be divisible by 4")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Same topology and latent sizes with narrow layers, for CPU-scale experiments."""
        base = dict(conv_channels=64, enc_lstm_hidden=32, enc_fc=128, dec_fc=128, dec_seq_width=32,
                    dec_lstm1_hidden=64, dec_lstm2_hidden=96, postnet_channels=64)
        base.update(overrides)
        return cls(**base)

    @property
    def encoded_frames(self) -> int:
        t = self.segment_frames
        for s in ENCODER_STRIDES:
            t = (t + 2 * (self.kernel // 2) - self.kernel) // s + 1
        return t

    @property
    def flatten_width(self) -> int:
        return self.encoded_frames * 2 * self.enc_lstm_hidden

    @property
    def decoder_frames(self) -> int:
        return self.segment_frames // 4

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class LatentPosterior:
    """Diagonal Gaussian posterior, batched: every field is (B, dim)."""

    mu_s: Tensor
    logvar_s: Tensor
    mu_c: Tensor
    logvar_c: Tensor

    def __getitem__(self, index) -> "LatentPosterior":
        return LatentPosterior(self.mu_s[index], self.logvar_s[index], self.mu_c[index], self.logvar_c[index])


@dataclass
class LatentSample:
    z_s: Tensor
    z_c: Tensor
    z: Tensor


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c, pad = cfg.conv_channels, cfg.kernel // 2
        self.convs = [Conv1d(cfg.n_mels if i == 0 else c, c, cfg.kernel, s, pad, rng)
                      for i, s in enumerate(ENCODER_STRIDES)]
        self.norms = [BatchNorm1d(c) for _ in ENCODER_STRIDES]
        self.lstm = BiLSTM(c, cfg.enc_lstm_hidden, cfg.enc_lstm_layers, rng)
        self.fc = Linear(cfg.flatten_width, cfg.enc_fc, rng)
        self.mu_c = Linear(cfg.enc_fc, cfg.k2, rng)
        self.logvar_c = Linear(cfg.enc_fc, cfg.k2, rng)
        self.mu_s = Linear(cfg.enc_fc, cfg.k1, rng)
        self.logvar_s = Linear(cfg.enc_fc, cfg.k1, rng)
        self.cfg = cfg

    def __call__(self, x: Tensor) -> LatentPosterior:
        cfg = self.cfg
        if x.ndim != 3 or x.shape[1:] != (cfg.segment_frames, cfg.n_mels):
            raise ShapeError(f"encoder expects (B, {cfg.segment_frames}, {cfg.n_mels}), got {x.shape}")
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = ag.tanh(norm(conv(h)))
        h = self.lstm(h)
        h = h.reshape(h.shape[0], cfg.flatten_width)
        h = ag.tanh(self.fc(h))
        lim = cfg.logvar_clamp
        return LatentPosterior(
            mu_s=self.mu_s(h),
            logvar_s=ag.clip(self.logvar_s(h), -lim, lim),
            mu_c=self.mu_c(h),
            logvar_c=ag.clip(self.logvar_c(h), -lim, lim),
        )


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c, pad = cfg.conv_channels, cfg.kernel // 2
        self.fc1 = Linear(cfg.k, cfg.dec_fc, rng)
        self.fc2 = Linear(cfg.dec_fc, cfg.decoder_frames * cfg.dec_seq_width, rng)
        self.lstm1 = LSTM(cfg.dec_seq_width, cfg.dec_lstm1_hidden, 1, rng)
        self.convs = [Conv1d(cfg.dec_lstm1_hidden if i == 0 else c, c, cfg.kernel, 1, pad, rng)
                      for i in range(3)]
        self.norms = [BatchNorm1d(c) for _ in range(3)]
        self.lstm2 = LSTM(c, cfg.dec_lstm2_hidden, cfg.dec_lstm2_layers, rng)
        self.out = Linear(cfg.dec_lstm2_hidden, cfg.n_mels, rng)
        self.cfg = cfg

    def __call__(self, z: Tensor) -> Tensor:
        cfg = self.cfg
        if z.ndim != 2 or z.shape[1] != cfg.k:
            raise ShapeError(f"decoder expects (B, {cfg.k}) latents, got {z.shape}")
        h = ag.tanh(self.fc1(z))
        h = self.fc2(h).reshape(z.shape[0], cfg.decoder_frames, cfg.dec_seq_width)
        h = ag.repeat(h, cfg.segment_frames // cfg.decoder_frames, axis=1)
        h = self.lstm1(h)
        for conv, norm in zip(self.convs, self.norms):
            h = ag.tanh(norm(conv(h)))
        h = self.lstm2(h)
        return self.out(h)


class PostNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c, pad = cfg.postnet_channels, cfg.kernel // 2
        widths = [cfg.n_mels, c, c, c, c, cfg.n_mels]
        self.convs = [Conv1d(widths[i], widths[i + 1], cfg.kernel, 1, pad, rng) for i in range(5)]
        self.norms = [BatchNorm1d(c) for _ in range(4)]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for conv, norm in zip(self.convs[:4], self.norms):
            h = ag.tanh(norm(conv(h)))
        return self.convs[4](h)


class DisentangledVAE(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.cfg, rng)
        self.decoder = Decoder(self.cfg, rng)
        self.postnet = PostNet(self.cfg, rng)
        for name, p in self.named_parameters():
            p.name = name

    def to(self, dtype) -> "DisentangledVAE":
        """Cast parameters (and their optimizer moments) in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.adam_m = p.adam_m.astype(dtype)
            p.adam_v = p.adam_v.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.encoder.fc.weight.dtype

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameter values and batch-norm buffers by name."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def as_input(self, x) -> Tensor:
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        if data.ndim == 2:
            data = data[None]
        return Tensor(data, dtype=self.dtype)


# ---------------------------------------------------------------------------
# operations


def encode(x: Tensor, model: DisentangledVAE) -> LatentPosterior:
    return model.encoder(x)


def average_posteriors(p1: LatentPosterior, p2: LatentPosterior) -> tuple[Tensor, Tensor]:
    """Shared speaker block: mean of the means, mean of the variances.

    The variance average is evaluated as a shifted log-sum-exp so that identical
    inputs return their log-variance exactly and the result is symmetric.
    """
    if p1.mu_s.shape != p2.mu_s.shape:
        raise ShapeError(f"speaker blocks differ in shape: {p1.mu_s.shape} vs {p2.mu_s.shape}")
    mu = (p1.mu_s + p2.mu_s) * 0.5
    a, b = p1.logvar_s, p2.logvar_s
    shift = Tensor(np.maximum(a.data, b.data))
    logvar = shift + ag.log((ag.exp(a - shift) + ag.exp(b - shift)) * 0.5)
    return mu, logvar


def reparameterize(mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> Tensor:
    eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    return mu + ag.exp(logvar * 0.5) * eps


def sample_latent(mu_s: Tensor, logvar_s: Tensor, post: LatentPosterior, rng: np.random.Generator) -> LatentSample:
    z_s = reparameterize(mu_s, logvar_s, rng)
    z_c = reparameterize(post.mu_c, post.logvar_c, rng)
    return LatentSample(z_s, z_c, ag.concat([z_s, z_c], axis=-1))


def decode(z: Tensor, model: DisentangledVAE) -> Tensor:
    return model.decoder(z)


def postnet_refine(x_tilde: Tensor, model: DisentangledVAE) -> tuple[Tensor, Tensor]:
    """Return (residual, refined) with refined = decoder output + residual.

    In float32 the sum is formed in float64, where adding two float32 values is
    exact, so ``refined - x_tilde`` reproduces the residual bit for bit.
    """
    cfg = model.cfg
    if x_tilde.ndim != 3 or x_tilde.shape[1:] != (cfg.segment_frames, cfg.n_mels):
        raise ShapeError(f"post-net expects (B, {cfg.segment_frames}, {cfg.n_mels}), got {x_tilde.shape}")
    residual = model.postnet(x_tilde)
    if x_tilde.dtype == np.float32:
        refined = ag.astype(x_tilde, np.float64) + ag.astype(residual, np.float64)
    else:
        refined = x_tilde + residual
    return residual, refined


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    # expm1(v) - v >= 0 holds in floating point, so every term stays nonnegative
    terms = ag.square(mu) + (ag.expm1(logvar) - logvar)
    return ag.tsum(terms, axis=-1) * 0.5


def gaussian_nll(x: Tensor, x_tilde: Tensor, reduction: str = "mean") -> Tensor:
    """Per-segment reconstruction term of the ELBO.

    ``"mean"`` is the mean squared error over the segment's entries; ``"sum"``
    is the unit-variance Gaussian negative log-likelihood with constants
    dropped, 0.5 * sum of squared errors.
    """
    diff = x_tilde - x
    sq = ag.tsum(ag.square(diff).reshape(diff.shape[0], -1), axis=1)
    if reduction == "sum":
        return sq * 0.5
    return sq * (1.0 / (diff.size // diff.shape[0]))


def recon_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean absolute error over all entries."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"recon_loss: shapes {x.shape} and {x_hat.shape} differ")
    diff = x_hat - ag.astype(x, x_hat.dtype)
    return ag.abs_sum(diff) * (1.0 / diff.size)


@dataclass
class PairForward:
    """Everything one forward pass over a batch of pairs produces."""

    post1: LatentPosterior
    post2: LatentPosterior
    shared_mu: Tensor
    shared_logvar: Tensor
    z1: LatentSample
    z2: LatentSample
    x_tilde: Tensor  # (2B, T, 80): first B rows reconstruct x1
    residual: Tensor
    x_hat: Tensor
    recon_reduction: str = "mean"


def forward_pair(x1: Tensor, x2: Tensor, model: DisentangledVAE, rng: np.random.Generator) -> PairForward:
    if x1.shape != x2.shape:
        raise ShapeError(f"pair segments differ in shape: {x1.shape} vs {x2.shape}")
    b = x1.shape[0]
    post = encode(ag.concat([x1, x2], axis=0), model)
    p1, p2 = post[:b], post[b:]
    mu_s, logvar_s = average_posteriors(p1, p2)
    # one speaker draw shared by both reconstructions
    z_s = reparameterize(mu_s, logvar_s, rng)
    z_c1 = reparameterize(p1.mu_c, p1.logvar_c, rng)
    z_c2 = reparameterize(p2.mu_c, p2.logvar_c, rng)
    z1 = LatentSample(z_s, z_c1, ag.concat([z_s, z_c1], axis=-1))
    z2 = LatentSample(z_s, z_c2, ag.concat([z_s, z_c2], axis=-1))
    x_tilde = decode(ag.concat([z1.z, z2.z], axis=0), model)
    residual, x_hat = postnet_refine(x_tilde, model)
    return PairForward(p1, p2, mu_s, logvar_s, z1, z2, x_tilde, residual, x_hat, model.cfg.recon_reduction)


def _elbo_from(fw: PairForward, x1: Tensor, x2: Tensor, beta: float) -> tuple[Tensor, dict]:
    b = x1.shape[0]
    nll = gaussian_nll(ag.concat([x1, x2], axis=0), fw.x_tilde, fw.recon_reduction)
    recon = nll[:b] + nll[b:]
    kl_s = kl_divergence(fw.shared_mu, fw.shared_logvar)
    kl_c1 = kl_divergence(fw.post1.mu_c, fw.post1.logvar_c)
    kl_c2 = kl_divergence(fw.post2.mu_c, fw.post2.logvar_c)
    # the shared speaker block is part of both full posteriors
    kl1 = kl_s + kl_c1
    kl2 = kl_s + kl_c2
    loss = ag.mean(recon + (kl1 + kl2) * beta)
    diag = {
        "elbo_recon": float(recon.data.mean()),
        "kl_s": float(2 * kl_s.data.mean()),
        "kl_c": float((kl_c1.data + kl_c2.data).mean()),
    }
    return loss, diag


def elbo_loss(x1: Tensor, x2: Tensor, model: DisentangledVAE, beta: float,
              rng: np.random.Generator) -> tuple[Tensor, dict]:
    """Negative pairwise beta-ELBO averaged over the batch (to be minimized)."""
    fw = forward_pair(x1, x2, model, rng)
    return _elbo_from(fw, x1, x2, beta)


def total_loss(x1: Tensor, x2: Tensor, model: DisentangledVAE, beta: float,
               rng: np.random.Generator) -> tuple[Tensor, dict]:
    """ELBO loss plus post-net L1 reconstruction of both segments."""
    return total_loss_from(forward_pair(x1, x2, model, rng), x1, x2, beta)


def total_loss_from(fw: PairForward, x1: Tensor, x2: Tensor, beta: float) -> tuple[Tensor, dict]:
    elbo, diag = _elbo_from(fw, x1, x2, beta)
    b = x1.shape[0]
    l1 = recon_loss(x1, fw.x_hat[:b]) + recon_loss(x2, fw.x_hat[b:])
    loss = elbo + l1
    diag["postnet_l1"] = float(l1.data)
    diag["elbo"] = float(elbo.data)
    diag["recon"] = diag["elbo_recon"] + diag["postnet_l1"]
    diag["kl"] = diag["kl_s"] + diag["kl_c"]
    diag["total"] = float(loss.data)
    return loss, diag
