"""Conditional trajectory VAE baseline.

Encodes H-step latent+action windows to a trajectory latent u conditioned on
the window's start and goal shape latents; planning samples u from the prior,
decodes, and refines u by cost descent. Much cheaper to sample than the
diffusion model, at the price of plan quality.
"""
from __future__ import annotations

import logging

import numpy as np

from . import guidance, serialio
from .diffuser import ACTION_DIM, _ConvBlock, _Down, _ResBlock, _Up, encode_dataset
from .errors import ModelError
from .neural import Adam, Conv1d, Dense, Module, Tensor

log = logging.getLogger(__name__)

_SEED_TRAIN = 0xC4AE
_SEED_PLAN = 0xCF1E


class CvaeNet(Module):
    """Conv encoder/decoder pair over (batch, channels, horizon) windows.

    The condition vector enters every residual block the same way the
    diffusion net injects its timestep embedding.
    """

    def __init__(self, channels: int, u_dim: int, cond_dim: int, widths: tuple,
                 groups: int, horizon: int, rng: np.random.Generator):
        if len(widths) < 2:
            raise ModelError("need at least two widths")
        factor = 2 ** len(widths)
        if horizon % factor != 0:
            raise ModelError(f"horizon {horizon} not divisible by {factor}")
        w0 = widths[0]
        self.widths = tuple(widths)
        self.horizon = horizon
        self.bottom = horizon // factor
        self.cond_proj = Dense(cond_dim, w0, rng)
        self.enc_res = []
        self.enc_down = []
        c_prev = channels
        for w in widths:
            self.enc_res.append(_ResBlock(c_prev, w, w0, groups, rng))
            self.enc_down.append(_Down(w, rng))
            c_prev = w
        flat = widths[-1] * self.bottom
        self.enc_mu = Dense(flat, u_dim, rng)
        self.enc_logvar = Dense(flat, u_dim, rng)
        self.dec_in = Dense(u_dim, flat, rng)
        self.dec_res = []
        self.dec_up = []
        rev = list(reversed(widths))
        for k, w in enumerate(rev):
            c_out = rev[k + 1] if k + 1 < len(rev) else w0
            self.dec_up.append(_Up(w, rng))
            self.dec_res.append(_ResBlock(w, c_out, w0, groups, rng))
        self.final_block = _ConvBlock(w0, w0, groups, rng)
        self.final_conv = Conv1d(w0, channels, 1, rng)

    def _emb(self, cond: Tensor) -> Tensor:
        return self.cond_proj(cond)

    def encode(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        emb = self._emb(cond)
        for res, down in zip(self.enc_res, self.enc_down):
            x = down(res(x, emb))
        b = x.data.shape[0]
        x = x.reshape(b, self.widths[-1] * self.bottom)
        return self.enc_mu(x), self.enc_logvar(x)

    def decode(self, u: Tensor, cond: Tensor) -> Tensor:
        emb = self._emb(cond)
        b = u.data.shape[0]
        x = self.dec_in(u).reshape(b, self.widths[-1], self.bottom)
        for up, res in zip(self.dec_up, self.dec_res):
            x = res(up(x), emb)
        return self.final_conv(self.final_block(x))


class CvaeModel:
    """Trained CVAE plus the normalization stats needed for planning."""

    def __init__(self, net: CvaeNet, latent_dim: int, u_dim: int,
                 norm_min: np.ndarray, norm_max: np.ndarray, horizon: int,
                 widths: tuple, groups: int):
        self.net = net
        self.latent_dim = latent_dim
        self.u_dim = u_dim
        self.norm_min = np.asarray(norm_min, dtype=np.float64)
        self.norm_max = np.asarray(norm_max, dtype=np.float64)
        self.horizon = horizon
        self.widths = tuple(widths)
        self.groups = groups
        self.trained = False
        self.train_stats = {}

    @property
    def channels(self) -> int:
        return self.latent_dim + ACTION_DIM

    def _span(self) -> np.ndarray:
        return np.maximum(self.norm_max - self.norm_min, 1e-8)

    def normalize(self, tau: np.ndarray, clamp: bool = False) -> np.ndarray:
        out = 2.0 * (np.asarray(tau, dtype=np.float64) - self.norm_min) / self._span() - 1.0
        if clamp:
            if np.any(out < -1.0) or np.any(out > 1.0):
                log.warning("values outside training range clamped before decoding")
            out = np.clip(out, -1.0, 1.0)
        return out.astype(np.float32)

    def denormalize(self, tau: np.ndarray) -> np.ndarray:
        tau = np.asarray(tau, dtype=np.float64)
        return (tau + 1.0) * 0.5 * self._span() + self.norm_min

    def make_cond(self, z_start: np.ndarray, z_goal: np.ndarray) -> np.ndarray:
        """Normalized condition vector from raw start/goal shape latents."""
        dz = self.latent_dim
        pad = np.zeros(ACTION_DIM)
        zs = self.normalize(np.concatenate([z_start, pad]), clamp=True)[:dz]
        zg = self.normalize(np.concatenate([z_goal, pad]), clamp=True)[:dz]
        return np.concatenate([zs, zg])

    def decode_np(self, u: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """Decode one trajectory latent to a normalized (H, channels) window."""
        if not self.trained:
            raise ModelError("cvae has not been trained")
        u = np.asarray(u, dtype=np.float32)
        if u.shape != (self.u_dim,):
            raise ModelError(f"expected a ({self.u_dim},) trajectory latent, got {u.shape}")
        out = self.net.decode(Tensor(u[None]), Tensor(cond[None].astype(np.float32)))
        return out.data[0].T.astype(np.float32)

    def save(self, dirpath):
        meta = {
            "latent_dim": self.latent_dim,
            "u_dim": self.u_dim,
            "widths": list(self.widths),
            "groups": self.groups,
            "horizon": self.horizon,
            "norm_min": [float(v) for v in self.norm_min],
            "norm_max": [float(v) for v in self.norm_max],
            "trained": self.trained,
        }
        serialio.save_checkpoint(dirpath, "cvae", meta, self.net.state_dict())

    @classmethod
    def load(cls, dirpath) -> "CvaeModel":
        meta, params = serialio.load_checkpoint(dirpath, "cvae")
        net = CvaeNet(meta["latent_dim"] + ACTION_DIM, meta["u_dim"],
                      2 * meta["latent_dim"], tuple(meta["widths"]),
                      meta["groups"], meta["horizon"], np.random.default_rng(0))
        net.load_state_dict(params)
        model = cls(net, meta["latent_dim"], meta["u_dim"],
                    np.array(meta["norm_min"]), np.array(meta["norm_max"]),
                    meta["horizon"], tuple(meta["widths"]), meta["groups"])
        model.trained = bool(meta["trained"])
        return model


def train_cvae(dataset, vae, cfg, horizon: int, seed: int = 0,
               log_every: int = 0) -> CvaeModel:
    """Fit the CVAE on random windows, conditioned on each window's own
    start and end latents (teacher conditioning)."""
    if dataset.episode_steps < horizon:
        raise ModelError(f"episodes too short for horizon {horizon}")
    rng = np.random.default_rng([seed, _SEED_TRAIN])
    latents = encode_dataset(dataset, vae)
    k, steps = dataset.episodes, dataset.episode_steps
    dz = vae.latent_dim
    actions = np.asarray(dataset.actions, dtype=np.float32)
    norm_min = np.concatenate([latents.reshape(-1, dz).min(axis=0), dataset.action_min])
    norm_max = np.concatenate([latents.reshape(-1, dz).max(axis=0), dataset.action_max])
    net = CvaeNet(dz + ACTION_DIM, cfg.latent_dim, 2 * dz, tuple(cfg.widths),
                  cfg.groups, horizon, rng)
    model = CvaeModel(net, dz, cfg.latent_dim, norm_min, norm_max, horizon,
                      tuple(cfg.widths), cfg.groups)
    span = model._span().astype(np.float32)
    lo = model.norm_min.astype(np.float32)
    t0_max = steps - horizon
    opt = Adam(net.parameters(), lr=cfg.lr)
    window = np.arange(horizon)[None, :]
    history = []
    for step in range(cfg.train_steps):
        eps_idx = rng.integers(0, k, size=cfg.batch)
        t0 = rng.integers(0, t0_max + 1, size=cfg.batch)
        tau0 = np.concatenate([
            latents[eps_idx[:, None], t0[:, None] + window],
            actions[eps_idx[:, None], t0[:, None] + window],
        ], axis=2)
        tau0 = (2.0 * (tau0 - lo) / span - 1.0).astype(np.float32)
        cond = np.concatenate([tau0[:, 0, :dz], tau0[:, -1, :dz]], axis=1)
        x = Tensor(np.ascontiguousarray(tau0.transpose(0, 2, 1)))
        cond_t = Tensor(cond)
        mu, logvar = net.encode(x, cond_t)
        noise = Tensor(rng.standard_normal(mu.data.shape).astype(np.float32))
        u = mu + (logvar * 0.5).exp() * noise
        recon = net.decode(u, cond_t)
        mse = ((recon - x) ** 2).mean()
        kl = ((mu * mu + logvar.exp() - logvar - 1.0) * 0.5).sum(axis=1).mean()
        loss = mse + cfg.beta_kl * kl
        if not np.isfinite(loss.data):
            raise ModelError(f"cvae loss diverged at step {step}")
        for p in net.parameters():
            p.grad = None
        loss.backward()
        opt.step()
        history.append(float(loss.data))
        if log_every and step % log_every == 0:
            log.info("cvae step %d loss %.4f", step, history[-1])
    model.trained = True
    model.train_stats = {
        "final_loss": float(np.mean(history[-50:])) if history else float("nan"),
        "steps": len(history),
    }
    return model


def _objective(model: CvaeModel, u: np.ndarray, cond: np.ndarray,
               ctx, prior_weight: float) -> tuple[float, np.ndarray]:
    tau_raw = model.denormalize(model.decode_np(u, cond))
    f = guidance.total_cost(tau_raw, ctx) + prior_weight * float(u @ u)
    return f, tau_raw


def _objective_grad(model: CvaeModel, u: np.ndarray, cond: np.ndarray,
                    ctx, prior_weight: float) -> np.ndarray:
    """Exact d objective / d u: cost gradient pulled back through the decoder."""
    u_t = Tensor(u[None].astype(np.float32), requires_grad=True)
    traj = model.net.decode(u_t, Tensor(cond[None].astype(np.float32)))
    g_norm = guidance.guide_gradient(traj.data[0].T.astype(np.float64), ctx)
    pullback = (traj * Tensor(g_norm.T[None].astype(np.float32))).sum()
    pullback.backward()
    return u_t.grad[0].astype(np.float64) + 2.0 * prior_weight * u


def refine_plan(model: CvaeModel, ctx, z_start: np.ndarray, z_goal: np.ndarray,
                cfg, seed: int = 0) -> tuple[np.ndarray, dict]:
    """Sample a trajectory latent from the prior and descend on total_cost.

    Backtracking line search keeps the objective non-increasing. Constrained
    slots (start/goal latents) are overwritten with their raw values in the
    returned trajectory. Returns (raw trajectory, info) where info carries
    the objective history and the pre-overwrite conditioning residual.
    """
    if not model.trained:
        raise ModelError("cvae has not been trained")
    rng = np.random.default_rng([seed, _SEED_PLAN])
    cond = model.make_cond(z_start, z_goal)
    dz = model.latent_dim
    u = rng.standard_normal(model.u_dim)
    f, tau = _objective(model, u, cond, ctx, cfg.prior_weight)
    history = [f]
    decoded0 = model.decode_np(u, cond)
    residual = float(np.linalg.norm(decoded0[0, :dz] - cond[:dz]))
    for _ in range(cfg.refine_steps):
        grad = _objective_grad(model, u, cond, ctx, cfg.prior_weight)
        gnorm = float(np.linalg.norm(grad))
        if gnorm < 1e-12:
            break
        step = cfg.refine_lr / max(1.0, gnorm)
        improved = False
        for _ in range(8):
            u_try = u - step * grad
            f_try, tau_try = _objective(model, u_try, cond, ctx, cfg.prior_weight)
            if f_try <= f:
                u, f, tau = u_try, f_try, tau_try
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        history.append(f)
    tau = tau.copy()
    tau[0, :dz] = z_start
    tau[-1, :dz] = z_goal
    return tau, {"objective": history, "cond_residual": residual}
