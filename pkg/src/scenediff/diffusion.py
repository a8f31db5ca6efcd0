"""Noise schedule, forward corruption, training and unguided reverse sampling.

Only the action channels are diffused; the state channels are always the
rollout of the actions from each agent's agent-frame initial state.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import denoiser as den
from . import dynamics as dyn
from . import tensor as tn
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    K: int
    beta: np.ndarray  # (K+1,), beta[0] unused (0)
    alpha_bar: np.ndarray  # (K+1,), alpha_bar[0] = 1
    sigma: np.ndarray  # (K+1,), sigma[0] unused, sigma[1] = 0

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    def check_k(self, k: int) -> int:
        k = int(k)
        if not 1 <= k <= self.K:
            raise ValueError(f"diffusion step k={k} outside 1..{self.K}")
        return k


def cosine_schedule(K: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    k = np.arange(K + 1)
    f = np.cos(((k / K + s) / (1 + s)) * math.pi / 2) ** 2
    alpha_bar = f / f[0]
    beta = np.zeros(K + 1)
    beta[1:] = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], max_beta)
    sigma = np.zeros(K + 1)
    # sigma_1 = 0 since alpha_bar[0] = 1; the final step adds no noise anyway
    sigma[1:] = np.sqrt(beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
    return NoiseSchedule(K, beta, alpha_bar, sigma)


def mean_coefficients(schedule: NoiseSchedule, k: int):
    """``(c0, ck)`` with ``mu = c0 * tau0_hat + ck * tau_k``."""
    k = schedule.check_k(k)
    ab, ab_prev, b = schedule.alpha_bar[k], schedule.alpha_bar[k - 1], schedule.beta[k]
    c0 = math.sqrt(ab_prev) * b / (1.0 - ab)
    ck = math.sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab)
    return c0, ck


def predicted_mean(tau0_a, tauk_a, k: int, schedule: NoiseSchedule):
    # at k=1 ck is exactly 0 because alpha_bar[0] = 1
    c0, ck = mean_coefficients(schedule, k)
    return tau0_a * c0 + tauk_a * ck


def corrupt(tau0_a, k: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    k = schedule.check_k(k)
    tau0_a = np.asarray(tau0_a, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != tau0_a.shape:
        raise ValueError(f"noise shape {eps.shape} differs from trajectory shape {tau0_a.shape}")
    ab = schedule.alpha_bar[k]
    return math.sqrt(ab) * tau0_a + math.sqrt(1.0 - ab) * eps


def full_block(s0, actions) -> np.ndarray:
    """Numpy ``(B, N, T, 6)`` block from actions."""
    with tn.no_grad():
        return dyn.full_trajectory(s0, actions).data


# ---------------------------------------------------------------- rng

def scene_key(name: str) -> int:
    return zlib.crc32(str(name).encode("utf-8"))


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-style generator keyed by ``(seed, *keys)``."""
    return np.random.default_rng([int(seed)] + [int(k) for k in keys])


# ---------------------------------------------------------------- training

class Adam:
    """Adam over a dict of named tensors, updating ``.data`` in place."""

    def __init__(self, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(name, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


@dataclass
class TrainExample:
    """One scene window: conditioning context plus ground-truth agent-frame actions."""

    ctx: den.Context
    actions: np.ndarray  # (B, T, 2)

    @property
    def tau0(self) -> np.ndarray:
        return full_block(self.ctx.s0, self.actions[:, None])


def example_loss(ex: TrainExample, params: dict, dims: den.DenoiserDims, schedule: NoiseSchedule, k: int, eps) -> Tensor:
    """Mean squared error over all 6 channels for one example at step ``k``."""
    tau0_a = ex.actions[:, None]
    tau0 = full_block(ex.ctx.s0, tau0_a)
    tauk = full_block(ex.ctx.s0, corrupt(tau0_a, k, eps, schedule))
    pred_a = den.forward(tauk, k, ex.ctx, params, dims)
    pred = dyn.full_trajectory(ex.ctx.s0, pred_a)
    return tn.mean((pred - tau0) ** 2)


def train_step(batch, params: dict, dims, schedule: NoiseSchedule, opt: Adam, rng: np.random.Generator):
    """One Adam update on a list of :class:`TrainExample`; returns the batch loss."""
    total = None
    for ex in batch:
        k = int(rng.integers(1, schedule.K + 1))
        eps = rng.standard_normal(ex.actions[:, None].shape)
        loss = example_loss(ex, params, dims, schedule, k, eps)
        total = loss if total is None else total + loss
    total = total / len(batch)
    value = float(total.data)
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite training loss {value}")
    g = tn.backward(total)
    opt.step(params, {name: g[p] for name, p in params.items() if p in g})
    return value


# ---------------------------------------------------------------- sampling

def reverse_step(tauk_a, k: int, ctx, params, dims, schedule: NoiseSchedule, rng, perturb=None) -> np.ndarray:
    """Shared body of unguided and guided reverse steps; returns ``tau^{k-1}_a``.

    ``perturb(mu, k)`` optionally maps the predicted mean to a new mean.
    """
    k = schedule.check_k(k)
    with tn.no_grad():
        tauk = full_block(ctx.s0, tauk_a)
        pred = den.forward(tauk, k, ctx, params, dims).data
        mu = predicted_mean(pred, tauk_a, k, schedule)
    if perturb is not None:
        mu = perturb(mu, k)
    if k == 1:
        return mu
    z = rng.standard_normal(mu.shape)
    return mu + schedule.sigma[k] * z


def denoise_step(tauk, k: int, ctx, params, dims, schedule, rng) -> np.ndarray:
    """``tau^k`` (6 channels) -> ``tau^{k-1}`` (6 channels, rollout-consistent)."""
    tauk = np.asarray(tauk.data if isinstance(tauk, Tensor) else tauk)
    a = reverse_step(tauk[..., 4:], k, ctx, params, dims, schedule, rng)
    return full_block(ctx.s0, a)


def initial_noise(ctx, N: int, dims, seed: int, key: int) -> np.ndarray:
    return make_rng(seed, key, 0).standard_normal((ctx.num_agents, N, dims.T, dims.d_a))


def sample(scene, params, dims, schedule: NoiseSchedule, N: int = 1, seed: int = 0, ctx=None) -> np.ndarray:
    """Full unguided reverse chain -> agent-frame ``(B, N, T, 6)``."""
    if ctx is None:
        ctx = den.build_context(scene, dims)
    key = scene_key(scene.name)
    a = initial_noise(ctx, N, dims, seed, key)
    for k in range(schedule.K, 0, -1):
        a = reverse_step(a, k, ctx, params, dims, schedule, make_rng(seed, key, k))
    return full_block(ctx.s0, a)


def fit(examples, params: dict, dims, schedule: NoiseSchedule, steps: int, batch_size: int = 8, lr: float = 1e-4,
        seed: int = 0, opt: Adam | None = None, callback=None) -> list:
    """Run ``steps`` Adam updates on minibatches drawn without replacement from
    ``examples``; returns the per-step losses."""
    if not examples:
        raise ValueError("no training examples")
    rng = make_rng(seed, 1)
    opt = opt or Adam(lr)
    losses = []
    for i in range(steps):
        idx = rng.choice(len(examples), size=min(batch_size, len(examples)), replace=False)
        losses.append(train_step([examples[j] for j in idx], params, dims, schedule, opt, rng))
        if callback is not None:
            callback(i, losses[-1])
    return losses
