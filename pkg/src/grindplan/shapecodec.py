"""Variational autoencoder over heightfield grids.

Compresses a G x G grid into a small latent vector and back. Encoding at
planning time is deterministic (posterior mean); the reparameterized sample
is used only inside the training loss. Grids are rescaled to [-1, 1] before
the MLP and mapped back with clamping on decode.
"""
from __future__ import annotations

import numpy as np

from . import serialio
from .errors import DataError, ModelError
from .geometry import Heightfield
from .neural import Adam, Dense, Module, Tensor

_SEED_TAG = 0xC0DEC


class VaeModel(Module):
    """Grid MLP encoder/decoder pair with a diagonal-Gaussian latent."""

    def __init__(self, grid: int, latent_dim: int, hidden: tuple, h_max: float,
                 rng: np.random.Generator):
        n_in = grid * grid
        h1, h2 = hidden
        self.grid = grid
        self.latent_dim = latent_dim
        self.hidden = (h1, h2)
        self.h_max = float(h_max)
        self.trained = False
        self.enc1 = Dense(n_in, h1, rng)
        self.enc2 = Dense(h1, h2, rng)
        self.mu_head = Dense(h2, latent_dim, rng)
        self.logvar_head = Dense(h2, latent_dim, rng)
        self.dec1 = Dense(latent_dim, h2, rng)
        self.dec2 = Dense(h2, h1, rng)
        self.dec3 = Dense(h1, n_in, rng)

    # grids enter as heights in [0, h_max]; the MLP sees [-1, 1]
    def _to_unit(self, grids: np.ndarray) -> np.ndarray:
        flat = grids.reshape(grids.shape[0], -1).astype(np.float32)
        return flat * np.float32(2.0 / self.h_max) - np.float32(1.0)

    def _encode_t(self, x: Tensor):
        h = self.enc2(self.enc1(x).mish()).mish()
        return self.mu_head(h), self.logvar_head(h)

    def _decode_t(self, z: Tensor) -> Tensor:
        return self.dec3(self.dec2(self.dec1(z).mish()).mish())

    def _require_trained(self):
        if not self.trained:
            raise ModelError("codec has not been trained")

    def encode_batch(self, grids: np.ndarray) -> np.ndarray:
        self._require_trained()
        grids = np.asarray(grids)
        if grids.ndim == 2:
            grids = grids[None]
        if grids.shape[-1] != self.grid or grids.shape[-2] != self.grid:
            raise ModelError(f"codec expects {self.grid}x{self.grid} grids, got {grids.shape}")
        mu, _ = self._encode_t(Tensor(self._to_unit(grids)))
        return mu.data

    def encode(self, s: Heightfield) -> np.ndarray:
        return self.encode_batch(s.grid[None])[0]

    def decode_batch(self, z: np.ndarray) -> np.ndarray:
        self._require_trained()
        z = np.asarray(z, dtype=np.float32)
        if z.ndim == 1:
            z = z[None]
        if z.shape[-1] != self.latent_dim:
            raise ModelError(f"codec expects {self.latent_dim}-dim latents, got {z.shape}")
        out = self._decode_t(Tensor(z)).data
        heights = (out + 1.0) * np.float32(0.5 * self.h_max)
        return np.clip(heights, 0.0, self.h_max).reshape(-1, self.grid, self.grid)

    def decode(self, z: np.ndarray) -> Heightfield:
        return Heightfield(self.decode_batch(z)[0].astype(np.float64), h_max=self.h_max)

    def save(self, dirpath):
        meta = {
            "grid": self.grid,
            "latent_dim": self.latent_dim,
            "hidden": list(self.hidden),
            "h_max": self.h_max,
            "trained": self.trained,
        }
        serialio.save_checkpoint(dirpath, "codec", meta, self.state_dict())

    @classmethod
    def load(cls, dirpath) -> "VaeModel":
        meta, params = serialio.load_checkpoint(dirpath, "codec")
        model = cls(int(meta["grid"]), int(meta["latent_dim"]), tuple(meta["hidden"]),
                    float(meta["h_max"]), np.random.default_rng(0))
        model.load_state_dict(params)
        model.trained = bool(meta["trained"])
        return model


def _sample_pool(dataset, n_pool: int, n_holdout: int, rng: np.random.Generator):
    """Draw distinct (episode, step) shape indices and gather them as arrays."""
    total = dataset.episodes * (dataset.episode_steps + 1)
    want = n_pool + n_holdout
    if want > total:
        raise DataError(f"pool+holdout {want} exceeds dataset shapes {total}")
    idx = rng.choice(total, size=want, replace=False)
    eps, steps = np.divmod(idx, dataset.episode_steps + 1)
    order = np.argsort(idx)  # contiguous reads off the memmap
    grids = np.empty((want, dataset.grid, dataset.grid), dtype=np.float32)
    for j in order:
        grids[j] = dataset.shapes[eps[j], steps[j]]
    return grids[:n_pool], grids[n_pool:]


def train_vae(dataset, cfg, seed: int = 0, log_every: int = 0) -> VaeModel:
    """Fit the codec on a pool of dataset shapes; returns the frozen model.

    Loss is reconstruction MSE in rescaled units plus beta_kl times the
    Gaussian KL. Aborts on a non-finite loss.
    """
    if dataset.episodes < 1:
        raise DataError("empty dataset")
    rng = np.random.default_rng([seed, _SEED_TAG])
    pool, holdout = _sample_pool(dataset, cfg.pool, cfg.holdout, rng)
    model = VaeModel(dataset.grid, cfg.latent_dim, tuple(cfg.hidden), dataset.h_max, rng)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    n = pool.shape[0]
    history = []
    for step in range(cfg.train_steps):
        batch = pool[rng.integers(0, n, size=cfg.batch)]
        x = Tensor(model._to_unit(batch))
        mu, logvar = model._encode_t(x)
        noise = Tensor(rng.standard_normal((cfg.batch, cfg.latent_dim)).astype(np.float32))
        z = mu + (logvar * 0.5).exp() * noise
        recon = model._decode_t(z)
        mse = ((recon - x) ** 2).mean()
        kl = ((mu * mu + logvar.exp() - logvar - 1.0) * 0.5).sum(axis=1).mean()
        loss = mse + cfg.beta_kl * kl
        value = float(loss.data)
        if not np.isfinite(value):
            raise ModelError(f"codec loss diverged at step {step}: {value}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(value)
        if log_every and (step + 1) % log_every == 0:
            print(f"codec step {step + 1}/{cfg.train_steps} loss {value:.5f}")
    model.trained = True
    model.train_stats = {
        "final_loss": history[-1] if history else None,
        "holdout_mae": holdout_mae(model, holdout),
        "steps": cfg.train_steps,
    }
    return model


def holdout_mae(model: VaeModel, grids: np.ndarray, batch: int = 256) -> float:
    """Mean per-cell absolute round-trip error in height units."""
    total, count = 0.0, 0
    for lo in range(0, grids.shape[0], batch):
        chunk = grids[lo:lo + batch].astype(np.float32)
        recon = model.decode_batch(model.encode_batch(chunk))
        total += float(np.abs(recon - chunk).sum())
        count += chunk.size
    return total / count
