"""Finite-difference self-check of every hand-written loss gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimator import (
    EstimatorBatch,
    Net,
    VrbConfig,
    airl_loss,
    airl_loss_and_grad,
    draw_batch_noise,
    make_estimator,
    vrb_loss,
    vrb_loss_and_grad,
)
from .numcore import finite_diff_grad, rng_stream
from .policy import (
    PpoConfig,
    RolloutBatch,
    make_policy,
    make_value,
    ppo_clip_loss,
    ppo_clip_loss_and_grad,
    sample_actions,
    value_loss,
    value_loss_and_grad,
)

LOSSES = ("vrb_loss", "airl_loss", "ppo_clip_loss", "value_loss")
STATE, ACTS, LATENT = 3, 3, 2


@dataclass(frozen=True)
class GradCheck:
    loss: str
    instance: int
    rel_error: float


def relative_error(analytic, numeric) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(num / den) if den > 0 else float(num)


def _jitter(params, rng):
    # random biases keep probes away from ReLU kinks at exactly zero
    return params + rng.normal(scale=0.1, size=params.shape)


def _estimator_case(rng, n=4):
    est = make_estimator(STATE, ACTS, rng, LATENT, (5,), (5,))
    est = est.with_flat(_jitter(est.flat(), rng))
    bits = lambda: (rng.random((n, ACTS)) < 0.5).astype(float)
    batch = EstimatorBatch(rng.normal(size=(n, STATE)), bits(), rng.normal(size=(n, STATE)),
                           rng.normal(size=(n, STATE)), bits(), rng.normal(size=(n, STATE)))
    return est, batch


def _rollout_case(rng, n=6):
    pol = make_policy(STATE, ACTS, rng, hidden=(5, 5))
    pol = Net(pol.spec, _jitter(pol.params, rng))
    x = rng.normal(size=(n, STATE))
    a, lp, c = sample_actions(pol, x, rng)
    dones = np.zeros(n, dtype=bool)
    dones[-1] = True
    b = RolloutBatch(x, a, x, lp + rng.normal(scale=0.05, size=n), dones, c)
    b.advantages = rng.normal(size=n)
    b.returns = rng.normal(size=n)
    return pol, b


def check_instance(loss: str, rng: np.random.Generator) -> float:
    if loss == "vrb_loss":
        est, batch = _estimator_case(rng)
        cfg = VrbConfig(phi=float(rng.uniform(0, 1)), latent_dim=LATENT)
        noise = draw_batch_noise(rng, batch, LATENT)
        _, g, _ = vrb_loss_and_grad(batch, est, cfg, noise)
        fd = finite_diff_grad(lambda p: vrb_loss(batch, est.with_flat(p), cfg, noise=noise)[0], est.flat(), 1e-6)
    elif loss == "airl_loss":
        est, batch = _estimator_case(rng)
        _, g, _ = airl_loss_and_grad(batch, est, VrbConfig())
        fd = finite_diff_grad(lambda p: airl_loss(batch, est.with_flat(p), VrbConfig()), est.flat(), 1e-6)
    elif loss == "ppo_clip_loss":
        pol, b = _rollout_case(rng)
        cfg = PpoConfig(epsilon_clip=0.05)
        adv = b.advantages
        _, g, _ = ppo_clip_loss_and_grad(pol, b, cfg, adv)
        fd = finite_diff_grad(lambda p: ppo_clip_loss(Net(pol.spec, p), b, cfg, adv), pol.params, 1e-6)
    elif loss == "value_loss":
        _, b = _rollout_case(rng)
        val = make_value(STATE, rng, hidden=(5, 5))
        val = Net(val.spec, _jitter(val.params, rng))
        _, g = value_loss_and_grad(val, b)
        fd = finite_diff_grad(lambda p: value_loss(Net(val.spec, p), b), val.params, 1e-6)
    else:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    return relative_error(g, fd)


def gradient_suite(instances_per_loss: int = 25, seed: int = 0) -> list[GradCheck]:
    """Random small instances of each loss, each on its own rng stream."""
    out = []
    for li, loss in enumerate(LOSSES):
        for i in range(instances_per_loss):
            rng = rng_stream(seed, 10_000 * (li + 1) + i)
            out.append(GradCheck(loss, i, check_instance(loss, rng)))
    return out
