"""Adam optimizer and multi-shard gradient accumulation."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..errors import ModelError
from .tensor import Tensor


class Adam:
    """Adam with bias correction; raises on non-finite gradients."""

    def __init__(self, params: list, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ModelError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {i}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def state_dict(self) -> dict:
        state = {"t": np.asarray([self.t], dtype=np.float64)}
        for i in range(len(self.params)):
            state[f"m.{i}"] = self.m[i]
            state[f"v.{i}"] = self.v[i]
        return state

    def load_state_dict(self, state: dict):
        self.t = int(state["t"][0])
        for i in range(len(self.params)):
            self.m[i] = np.asarray(state[f"m.{i}"], dtype=self.params[i].data.dtype)
            self.v[i] = np.asarray(state[f"v.{i}"], dtype=self.params[i].data.dtype)


def sharded_loss_and_grads(loss_fn, params: list, batches: list, workers: int = 0):
    """Average per-shard losses and gradients across `batches`.

    loss_fn(batch) must build a fresh graph over the shared parameter tensors
    and return a scalar Tensor. With workers > 1 the forward passes run in
    threads (shards only read parameter data, so forwards are independent);
    backward passes then run sequentially in shard order, so the accumulated
    gradients never depend on thread timing. Returns the averaged loss as a
    float and leaves the averaged gradients in param.grad.
    """
    if not batches:
        raise ModelError("no shards given")

    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            losses = list(pool.map(loss_fn, batches))
    else:
        losses = [loss_fn(b) for b in batches]

    scale = 1.0 / len(batches)
    total = 0.0
    acc = [None] * len(params)
    for loss in losses:
        for p in params:
            p.grad = None
        loss.backward()
        total += float(loss.data)
        for i, p in enumerate(params):
            if p.grad is None:
                continue
            if acc[i] is None:
                acc[i] = p.grad * scale
            else:
                acc[i] += p.grad * scale
    for p, g in zip(params, acc):
        p.grad = g
    return total * scale
