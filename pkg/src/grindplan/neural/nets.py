"""Layers and parameter containers built on the Tensor engine.

Dense and Conv1d carry their own weights; initialization is driven by a
caller-supplied numpy Generator so that identically seeded networks are
bit-identical. Conv1d runs as a windowed tensordot (one GEMM per call) and
its input gradient is computed as a transposed convolution.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ModelError
from .tensor import Tensor


class Module:
    """Base container: tracks parameters of attributes recursively."""

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = ""):
        out = []
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix=f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{key}.{i}."))
        return out

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ModelError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ModelError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        bound = np.sqrt(6.0 / (n_in + n_out))
        self.w = Tensor(rng.uniform(-bound, bound, (n_in, n_out)).astype(dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return x.matmul(self.w) + self.b


def _conv1d_raw(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Correlation of (B, Cin, L) with (Cout, Cin, K) -> (B, Cout, L_out)."""
    k = w.shape[2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(x, k, axis=2)[:, :, ::stride, :]  # (B, Cin, L_out, K)
    out = np.tensordot(win, w, axes=([1, 3], [1, 2]))           # (B, L_out, Cout)
    return np.ascontiguousarray(out.transpose(0, 2, 1))


class Conv1d(Module):
    """1D convolution over (batch, channels, length) tensors."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, dtype=np.float32):
        bound = np.sqrt(6.0 / (c_in * kernel + c_out * kernel))
        self.w = Tensor(rng.uniform(-bound, bound, (c_out, c_in, kernel)).astype(dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def forward(self, x: Tensor) -> Tensor:
        w, b, stride, pad = self.w, self.b, self.stride, self.pad
        batch, c_in, length = x.data.shape
        if c_in != w.data.shape[1]:
            raise ModelError(f"conv expects {w.data.shape[1]} channels, got {c_in}")
        k = w.data.shape[2]
        if length + 2 * pad < k:
            raise ModelError(f"length {length} too short for k={k} p={pad}")
        out_data = _conv1d_raw(x.data, w.data, stride, pad)
        out_data += b.data[None, :, None]

        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
        win = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]

        def backward(g):
            if b.requires_grad:
                b._accumulate(g.sum(axis=(0, 2)))
            if w.requires_grad:
                # (B, Cout, L_out) x (B, Cin, L_out, K) -> (Cout, Cin, K)
                w._accumulate(np.tensordot(g, win, axes=([0, 2], [0, 2])))
            if x.requires_grad:
                if stride > 1:
                    dil = np.zeros(g.shape[:2] + ((g.shape[2] - 1) * stride + 1,), dtype=g.dtype)
                    dil[:, :, ::stride] = g
                else:
                    dil = g
                w_t = np.ascontiguousarray(w.data[:, :, ::-1].swapaxes(0, 1))
                full = _conv1d_raw(dil, w_t, 1, k - 1)
                # windows may stop short of the padded end; those inputs get 0
                dxp = np.zeros(g.shape[:1] + (x.data.shape[1], length + 2 * pad), dtype=g.dtype)
                dxp[:, :, :full.shape[2]] = full
                x._accumulate(dxp[:, :, pad:pad + length])

        return Tensor._result(out_data, (x, w, b), backward)


class GroupNorm(Module):
    """Normalizes (batch, channels, length) within channel groups."""

    def __init__(self, groups: int, channels: int, eps: float = 1e-5, dtype=np.float32):
        if channels % groups != 0:
            raise ModelError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        gamma, beta, groups, eps = self.gamma, self.beta, self.groups, self.eps
        batch, channels, length = x.data.shape
        xg = x.data.reshape(batch, groups, -1)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = ((xg - mu) * inv_std).reshape(batch, channels, length)
        out_data = gamma.data[None, :, None] * xhat + beta.data[None, :, None]
        n = xg.shape[2]

        def backward(g):
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2)))
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2)))
            if x.requires_grad:
                dxhat = (g * gamma.data[None, :, None]).reshape(batch, groups, -1)
                xh = xhat.reshape(batch, groups, -1)
                s1 = dxhat.sum(axis=2, keepdims=True)
                s2 = (dxhat * xh).sum(axis=2, keepdims=True)
                dx = inv_std / n * (n * dxhat - s1 - xh * s2)
                x._accumulate(dx.reshape(batch, channels, length))

        return Tensor._result(out_data, (x, gamma, beta), backward)


class SiLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.silu()


class Mish(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.mish()


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def sinusoidal_embedding(steps: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Transformer-style position features for integer step indices, (B, dim)."""
    if dim % 2 != 0:
        raise ModelError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = np.asarray(steps, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(dtype)
