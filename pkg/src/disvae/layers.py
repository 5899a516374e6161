"""Layers used by the model: linear, 1-D convolution, batch norm, LSTM and BiLSTM.

All sequence tensors are time-major per example, i.e. shaped
``(batch, time, channels)``. Convolution, batch norm and the LSTM recurrence are
single tape nodes with hand-written backward passes; everything else is
composed from the primitives in :mod:`disvae.autograd`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor, record
from .errors import ShapeError


class Parameter(Tensor):
    """Trainable tensor carrying its Adam moments and step counter."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0


class Module:
    """Minimal container; parameters and buffers are discovered by attribute walk."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffers", ()):
            yield prefix + key, getattr(self, key)
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.n_in, self.n_out = n_in, n_out
        self.weight = Parameter(_uniform(rng, (n_out, n_in), n_in).astype(np.float32))
        self.bias = Parameter(_uniform(rng, (n_out,), n_in).astype(np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Linear expects last dim {self.n_in}, got {x.shape}")
        return linear(x, self.weight, self.bias)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ag.matmul(x, ag.transpose(weight)) + bias


# ---------------------------------------------------------------------------
# convolution


def conv_output_length(t: int, kernel: int, stride: int, padding: int) -> int:
    return (t + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution over time.

    x: (B, T, C_in); weight: (C_out, C_in, K); bias: (C_out,). Symmetric zero
    padding. Returns (B, T', C_out) with T' = floor((T + 2*pad - K)/stride) + 1.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects (batch, time, channels), got {x.shape}")
    c_out, c_in, k = weight.shape
    b, t, c = x.shape
    if c != c_in:
        raise ShapeError(f"conv1d: input has {c} channels, weight expects {c_in}")
    t_out = conv_output_length(t, k, stride, padding)
    if t_out < 1:
        raise ShapeError(f"conv1d: output length {t_out} < 1 for T={t}, kernel={k}, stride={stride}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    # (B, T_valid, C_in, K) -> strided frames -> (B*T', C_in*K)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, : stride * (t_out - 1) + 1 : stride]
    cols = np.ascontiguousarray(win).reshape(b * t_out, c_in * k)
    w2 = weight.data.reshape(c_out, c_in * k)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = out.reshape(b, t_out, c_out)

    def _bw(g):
        g2 = g.reshape(b * t_out, c_out)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ w2).reshape(b, t_out, c_in, k)
        gxp = np.zeros_like(xp)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            gxp[:, j : j + span : stride] += gcols[..., j]
        gx = gxp[:, padding : padding + t] if padding else gxp
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv1d", out, inputs, _bw)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator):
        self.c_in, self.c_out, self.kernel, self.stride, self.padding = c_in, c_out, kernel, stride, padding
        fan_in = c_in * kernel
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel), fan_in).astype(np.float32))
        self.bias = Parameter(_uniform(rng, (c_out,), fan_in).astype(np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


# ---------------------------------------------------------------------------
# batch norm


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of (B, T, C) or (B, C) input.

    Training mode normalizes with biased batch statistics and updates the
    running buffers in place (unbiased variance, as is conventional).
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv
        out = xhat * gamma.data + beta.data

        def _bw_eval(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return record("batchnorm", out.astype(x.dtype), (x, gamma, beta), _bw_eval)

    n = x.size // c
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    running_mean *= 1 - momentum
    running_mean += momentum * mu
    running_var *= 1 - momentum
    running_var += momentum * var * (n / max(n - 1, 1))

    def _bw(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record("batchnorm", out, (x, gamma, beta), _bw)


class BatchNorm1d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                         self.training, self.momentum, self.eps)


# ---------------------------------------------------------------------------
# recurrent layers


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ShapeError(f"LstmState: h {self.h.shape} and c {self.c.shape} differ")


def lstm(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor, state: LstmState | None = None,
         reverse: bool = False) -> tuple[Tensor, LstmState]:
    """Run one LSTM layer over a (B, T, D) sequence.

    Gate order in the stacked weights is (input, forget, output, candidate).
    With ``reverse`` the recurrence runs from the last frame to the first; the
    output stays aligned with input time indices. The returned final state is
    a plain value (no gradient flows through it).
    """
    b, t, d = x.shape
    four_h, h_size = w_hh.shape
    if w_ih.shape != (four_h, d):
        raise ShapeError(f"lstm: input width {d} does not match weight {w_ih.shape}")
    h = np.zeros((b, h_size), dtype=x.dtype) if state is None else state.h.astype(x.dtype)
    c = np.zeros((b, h_size), dtype=x.dtype) if state is None else state.c.astype(x.dtype)
    h0, c0 = h, c

    xw = x.data @ w_ih.data.T + bias.data  # (B, T, 4H)
    keep = ag.needs_grad(x, w_ih, w_hh, bias)
    steps = range(t - 1, -1, -1) if reverse else range(t)
    hs = np.empty((b, t, h_size), dtype=x.dtype)
    if keep:
        gates_i = np.empty((b, t, h_size), dtype=x.dtype)
        gates_f, gates_g, gates_o, cs, tcs = (np.empty_like(gates_i) for _ in range(5))
    whh_t = w_hh.data.T
    hsz = h_size
    for s in steps:
        z = xw[:, s] + h @ whh_t
        ifo = ag._sigmoid(z[:, : 3 * hsz])
        i, f, o = ifo[:, :hsz], ifo[:, hsz : 2 * hsz], ifo[:, 2 * hsz :]
        g = np.tanh(z[:, 3 * hsz :])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, s] = h
        if keep:
            gates_i[:, s], gates_f[:, s], gates_g[:, s], gates_o[:, s] = i, f, g, o
            cs[:, s], tcs[:, s] = c, tc
    final = LstmState(h.copy(), c.copy())

    def _bw(gout):
        dxw = np.empty((b, t, 4 * hsz), dtype=x.dtype)
        dwhh = np.zeros_like(w_hh.data)
        dh_next = np.zeros((b, hsz), dtype=x.dtype)
        dc_next = np.zeros((b, hsz), dtype=x.dtype)
        order = list(steps)
        for idx in range(len(order) - 1, -1, -1):
            s = order[idx]
            if idx > 0:
                prev = order[idx - 1]
                h_prev, c_prev = hs[:, prev], cs[:, prev]
            else:
                h_prev, c_prev = h0, c0
            i, f, g, o, tc = gates_i[:, s], gates_f[:, s], gates_g[:, s], gates_o[:, s], tcs[:, s]
            dh = gout[:, s] + dh_next
            do = dh * tc
            dc = dh * o * (1 - tc * tc) + dc_next
            dz = dxw[:, s]
            dz[:, :hsz] = dc * g * i * (1 - i)
            dz[:, hsz : 2 * hsz] = dc * c_prev * f * (1 - f)
            dz[:, 2 * hsz : 3 * hsz] = do * o * (1 - o)
            dz[:, 3 * hsz :] = dc * i * (1 - g * g)
            dc_next = dc * f
            dwhh += dz.T @ h_prev
            dh_next = dz @ w_hh.data
        dx = dxw @ w_ih.data
        dwih = dxw.reshape(-1, 4 * hsz).T @ x.data.reshape(-1, d)
        db = dxw.sum(axis=(0, 1))
        return dx, dwih, dwhh, db

    out = record("lstm", hs, (x, w_ih, w_hh, bias), _bw)
    return out, final


class LSTM(Module):
    """Stack of unidirectional LSTM layers."""

    def __init__(self, n_in: int, hidden: int, num_layers: int, rng: np.random.Generator):
        self.n_in, self.hidden, self.num_layers = n_in, hidden, num_layers
        self.layers = [_LstmCellParams(n_in if i == 0 else hidden, hidden, rng) for i in range(num_layers)]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"LSTM expects input width {self.n_in}, got {x.shape}")
        for layer in self.layers:
            x, _ = lstm(x, layer.w_ih, layer.w_hh, layer.bias)
        return x


class BiLSTM(Module):
    """Stack of bidirectional LSTM layers; per-step output width is 2*hidden."""

    def __init__(self, n_in: int, hidden: int, num_layers: int, rng: np.random.Generator):
        self.n_in, self.hidden, self.num_layers = n_in, hidden, num_layers
        self.fwd = []
        self.bwd = []
        for i in range(num_layers):
            width = n_in if i == 0 else 2 * hidden
            self.fwd.append(_LstmCellParams(width, hidden, rng))
            self.bwd.append(_LstmCellParams(width, hidden, rng))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"BiLSTM expects input width {self.n_in}, got {x.shape}")
        for f, r in zip(self.fwd, self.bwd):
            x = bilstm(x, f, r)
        return x


def bilstm(x: Tensor, fwd: "_LstmCellParams", bwd: "_LstmCellParams") -> Tensor:
    hf, _ = lstm(x, fwd.w_ih, fwd.w_hh, fwd.bias)
    hb, _ = lstm(x, bwd.w_ih, bwd.w_hh, bwd.bias, reverse=True)
    return ag.concat([hf, hb], axis=-1)


class _LstmCellParams(Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.w_ih = Parameter(_uniform(rng, (4 * hidden, n_in), hidden).astype(np.float32))
        self.w_hh = Parameter(_uniform(rng, (4 * hidden, hidden), hidden).astype(np.float32))
        bias = _uniform(rng, (4 * hidden,), hidden)
        bias[hidden : 2 * hidden] += 1.0  # forget gate
        self.bias = Parameter(bias.astype(np.float32))
