"""Guided reverse diffusion: projected Adam perturbation of the predicted mean
plus sample filtration.

``J`` is any callable mapping an agent-frame ``(B, N, T, 6)`` trajectory tensor
to per-sample losses of shape ``(N,)`` or ``(B, N)``.  Losses are minimized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import denoiser as den
from . import diffusion as dif
from . import dynamics as dyn
from . import tensor as tn
from .tensor import Tensor


@dataclass(frozen=True)
class GuidanceConfig:
    alpha: float = 0.05
    W: int = 5
    N: int = 4
    l: int = 5
    clip_enabled: bool = True
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.W < 0:
            raise ValueError("W must be >= 0")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.l < 1:
            raise ValueError("l must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass
class GuidanceLog:
    """Side channel for skipped inner steps and per-step loss values."""

    skipped: list = field(default_factory=list)  # (k, j) pairs with non-finite gradients
    losses: list = field(default_factory=list)  # (k, mean J before perturbation)


def aggregate(losses) -> np.ndarray:
    """Per-sample scene loss ``(N,)``: mean over agents for ``(B, N)`` inputs."""
    arr = np.asarray(losses.data if isinstance(losses, Tensor) else losses, dtype=np.float64)
    if arr.ndim == 1:
        return arr
    if arr.ndim == 2:
        return arr.mean(axis=0)
    raise ValueError(f"loss must have shape (N,) or (B, N), got {arr.shape}")


def _objective(J, s0, mu):
    """Scalar whose gradient w.r.t. ``mu`` is each sample's own aggregated gradient."""
    mu_t = Tensor(mu, requires_grad=True)
    out = J(dyn.full_trajectory(s0, mu_t))
    out = tn.as_tensor(out)
    if out.ndim == 2:
        out = tn.mean(out, 0)
    elif out.ndim != 1:
        raise ValueError(f"loss must have shape (N,) or (B, N), got {out.shape}")
    total = tn.sum_(out)
    if not total.requires_grad:
        return float(total.data), np.zeros_like(mu)
    g = tn.backward(total).get(mu_t)
    return float(total.data), (np.zeros_like(mu) if g is None else g)


def clip_displacement(mu, mu0, bound: float) -> np.ndarray:
    """``mu0 + clip(mu - mu0, -bound, bound)``, nudged so the bound holds exactly
    in floating point."""
    out = mu0 + np.clip(mu - mu0, -bound, bound)
    bad = np.abs(out - mu0) > bound
    while np.any(bad):
        out = np.where(bad, np.nextafter(out, mu0), out)
        bad = np.abs(out - mu0) > bound
    return out


def perturb_mean(mu0, J, s0, k: int, schedule, cfg: GuidanceConfig, log: GuidanceLog | None = None) -> np.ndarray:
    """``W`` projected Adam descent steps on ``J`` starting from ``mu0``.

    The displacement from ``mu0`` is clipped to ``+-beta_k`` after every inner
    step.  Adam moments start fresh at every call.
    """
    mu0 = np.asarray(mu0, dtype=np.float64)
    if cfg.W == 0:
        return mu0
    bound = float(schedule.beta[k])
    b1, b2 = cfg.adam_betas
    m = np.zeros_like(mu0)
    v = np.zeros_like(mu0)
    mu = mu0
    for j in range(1, cfg.W + 1):
        with np.errstate(all="ignore"):
            value, g = _objective(J, s0, mu)
        if j == 1 and log is not None:
            log.losses.append((k, value))
        if not np.all(np.isfinite(g)):
            if log is not None:
                log.skipped.append((k, j))
            continue
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = cfg.alpha * (m / (1 - b1**j)) / (np.sqrt(v / (1 - b2**j)) + cfg.adam_eps)
        mu = mu - step
        if cfg.clip_enabled:
            mu = clip_displacement(mu, mu0, bound)
    return mu


def guided_denoise_step(tauk, k: int, ctx, params, dims, schedule, J, cfg: GuidanceConfig, rng, log=None) -> np.ndarray:
    """Reverse step with the predicted mean replaced by its perturbed version."""
    tauk = np.asarray(tauk.data if isinstance(tauk, Tensor) else tauk)

    def perturb(mu, kk):
        return perturb_mean(mu, J, ctx.s0, kk, schedule, cfg, log)

    a = dif.reverse_step(tauk[..., 4:], k, ctx, params, dims, schedule, rng, perturb=perturb)
    return dif.full_block(ctx.s0, a)


def filtrate(samples, J):
    """Index of the sample with the lowest scene-aggregated loss and that sample
    as a ``(B, 1, T, 6)`` block.  Ties go to the lowest index."""
    samples = np.asarray(samples.data if isinstance(samples, Tensor) else samples)
    if samples.shape[1] == 1:
        return 0, samples
    with tn.no_grad():
        scores = aggregate(J(Tensor(samples)))
    idx = int(np.argmin(scores))
    return idx, samples[:, idx : idx + 1]


def guided_sample(scene, params, dims, schedule, J, cfg: GuidanceConfig, seed: int = 0, ctx=None, return_info: bool = False):
    """K guided steps over ``cfg.N`` samples followed by filtration."""
    if ctx is None:
        ctx = den.build_context(scene, dims)
    key = dif.scene_key(scene.name)
    log = GuidanceLog()
    a = dif.initial_noise(ctx, cfg.N, dims, seed, key)

    def perturb(mu, k):
        return perturb_mean(mu, J, ctx.s0, k, schedule, cfg, log)

    use = perturb if cfg.W > 0 else None
    for k in range(schedule.K, 0, -1):
        a = dif.reverse_step(a, k, ctx, params, dims, schedule, dif.make_rng(seed, key, k), perturb=use)
    samples = dif.full_block(ctx.s0, a)
    idx, best = filtrate(samples, J)
    if return_info:
        return best, {"index": idx, "samples": samples, "log": log}
    return best
