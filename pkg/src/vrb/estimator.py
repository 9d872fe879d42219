"""Variational reward estimator.

Two Gaussian encoder heads map states to latents: ``E_g`` reads the state
together with the multi-hot system action, ``E_h`` reads a single state and is
shared between ``x_t`` and ``x_{t+1}``. Two scalar heads score the latents,

    f = D_g(z_g) + gamma * D_h(z'_h) + sign * D_h(z_h)

with ``sign = -1`` (potential-based shaping) unless configured otherwise. The
estimator objective is the expert-minus-policy score gap with a Lagrangian
penalty on the policy-side KL of the latents to a standard normal; the
functions here return it in minimization form.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericError, PreconditionError, ShapeError
from .numcore import (
    AdamState,
    MlpSpec,
    adam_step,
    backward_from_cache,
    forward_with_cache,
    init_params,
    mlp_forward,
)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 5.0
SHAPING_SIGNS = {"airl_minus": -1.0, "paper_plus": 1.0}


@dataclass(frozen=True)
class VrbConfig:
    gamma: float = 0.99
    phi: float = 0.001
    i_c: float = 0.5
    adaptive_phi: bool = False
    phi_step: float = 0.0
    shaping_sign: str = "airl_minus"
    latent_dim: int = 16
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.shaping_sign not in SHAPING_SIGNS:
            raise ValueError(f"shaping_sign must be one of {sorted(SHAPING_SIGNS)}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.phi < 0 or self.i_c <= 0 or self.phi_step < 0:
            raise ValueError("phi and phi_step must be >= 0 and i_c > 0")


@dataclass
class Net:
    spec: MlpSpec
    params: np.ndarray

    def copy(self) -> "Net":
        return Net(self.spec, self.params.copy())


@dataclass
class Estimator:
    """Encoder heads (``enc_g``, ``enc_h``) and reward heads (``d_g``, ``d_h``)."""

    enc_g: Net
    enc_h: Net
    d_g: Net
    d_h: Net
    latent_dim: int

    def nets(self) -> tuple[Net, Net, Net, Net]:
        return (self.enc_g, self.enc_h, self.d_g, self.d_h)

    @property
    def n_params(self) -> int:
        return sum(n.spec.n_params for n in self.nets())

    def flat(self) -> np.ndarray:
        return np.concatenate([n.params for n in self.nets()])

    def with_flat(self, flat: np.ndarray) -> "Estimator":
        nets, off = [], 0
        for n in self.nets():
            k = n.spec.n_params
            nets.append(Net(n.spec, np.array(flat[off:off + k])))
            off += k
        return Estimator(*nets, latent_dim=self.latent_dim)

    def copy(self) -> "Estimator":
        return self.with_flat(self.flat())


def make_estimator(state_dim: int, action_dim: int, rng: np.random.Generator, latent_dim: int = 16,
                   encoder_hidden=(64,), head_hidden=(64,)) -> Estimator:
    d = latent_dim
    specs = (
        MlpSpec((state_dim + action_dim, *encoder_hidden, 2 * d)),
        MlpSpec((state_dim, *encoder_hidden, 2 * d)),
        MlpSpec((d, *head_hidden, 1)),
        MlpSpec((d, *head_hidden, 1)),
    )
    return Estimator(*(Net(s, init_params(s, rng)) for s in specs), latent_dim=d)


@dataclass
class LatentTriple:
    """Reparameterized latents for a batch; arrays have shape (batch, d)."""

    z_g: np.ndarray
    z_h: np.ndarray
    z_next: np.ndarray
    mu: tuple  # (mu_g, mu_h, mu_next)
    logvar: tuple  # clamped log-variances in the same order
    noise: np.ndarray  # (3, batch, d)


@dataclass
class EstimatorBatch:
    expert_x: np.ndarray
    expert_a: np.ndarray
    expert_xn: np.ndarray
    policy_x: np.ndarray
    policy_a: np.ndarray
    policy_xn: np.ndarray
    expert_log_pi: np.ndarray | None = None
    policy_log_pi: np.ndarray | None = None

    def __post_init__(self):
        for side in ("expert", "policy"):
            x, a, xn = (np.atleast_2d(np.asarray(getattr(self, f"{side}_{k}"), dtype=np.float64)) for k in ("x", "a", "xn"))
            if not (x.shape[0] == a.shape[0] == xn.shape[0]):
                raise ShapeError(f"{side} arrays disagree on batch length")
            setattr(self, f"{side}_x", x)
            setattr(self, f"{side}_a", a)
            setattr(self, f"{side}_xn", xn)

    @property
    def n_expert(self) -> int:
        return self.expert_x.shape[0]

    @property
    def n_policy(self) -> int:
        return self.policy_x.shape[0]


def draw_noise(rng: np.random.Generator, n: int, latent_dim: int, scale: float = 1.0) -> np.ndarray:
    return scale * rng.standard_normal((3, n, latent_dim))


def _split(out: np.ndarray, d: int):
    mu = out[:, :d]
    raw = out[:, d:]
    return mu, np.clip(raw, LOGVAR_MIN, LOGVAR_MAX), (raw > LOGVAR_MIN) & (raw < LOGVAR_MAX)


def kl_std_normal(mean, log_variance) -> float | np.ndarray:
    """KL(N(mean, diag exp(log_variance)) || N(0, I)), summed over the last axis."""
    mean = np.asarray(mean, dtype=np.float64)
    lv = np.asarray(log_variance, dtype=np.float64)
    if mean.shape != lv.shape:
        raise ShapeError(f"mean shape {mean.shape} != log-variance shape {lv.shape}")
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(lv))):
        raise NumericError("kl_std_normal received non-finite input")
    # expm1 keeps exp(lv) - 1 - lv accurate (and >= 0) for tiny log-variances
    kl = 0.5 * np.sum(mean**2 + np.maximum(np.expm1(lv) - lv, 0.0), axis=-1)
    return float(kl) if kl.ndim == 0 else kl


@dataclass
class _Pass:
    f: np.ndarray
    kl: np.ndarray
    lat: LatentTriple
    caches: dict = field(default_factory=dict)
    masks: tuple = ()


def _check_widths(est: Estimator, x, a, xn):
    if x.shape[1] != est.enc_h.spec.input_width or xn.shape[1] != est.enc_h.spec.input_width:
        raise ShapeError(f"expected state width {est.enc_h.spec.input_width}, got {x.shape[1]} / {xn.shape[1]}")
    if x.shape[1] + a.shape[1] != est.enc_g.spec.input_width:
        raise ShapeError(f"expected state+action width {est.enc_g.spec.input_width}, got {x.shape[1] + a.shape[1]}")


def _forward(est: Estimator, cfg: VrbConfig, x, a, xn, noise) -> _Pass:
    x, a, xn = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (x, a, xn))
    _check_widths(est, x, a, xn)
    d = est.latent_dim
    n = x.shape[0]
    out_g, c_g = forward_with_cache(est.enc_g.spec, est.enc_g.params, np.hstack([x, a]))
    out_h, c_h = forward_with_cache(est.enc_h.spec, est.enc_h.params, np.vstack([x, xn]))
    mu_g, lv_g, m_g = _split(out_g, d)
    mu_hh, lv_hh, m_hh = _split(out_h, d)
    mu_h, mu_n = mu_hh[:n], mu_hh[n:]
    lv_h, lv_n = lv_hh[:n], lv_hh[n:]
    if noise is None:
        noise = np.zeros((3, n, d))
    z_g = mu_g + np.exp(0.5 * lv_g) * noise[0]
    z_h = mu_h + np.exp(0.5 * lv_h) * noise[1]
    z_n = mu_n + np.exp(0.5 * lv_n) * noise[2]
    dg, c_dg = forward_with_cache(est.d_g.spec, est.d_g.params, z_g)
    dh, c_dh = forward_with_cache(est.d_h.spec, est.d_h.params, np.vstack([z_n, z_h]))
    sign = SHAPING_SIGNS[cfg.shaping_sign]
    f = dg[:, 0] + cfg.gamma * dh[:n, 0] + sign * dh[n:, 0]
    kl = kl_std_normal(mu_g, lv_g) + kl_std_normal(mu_h, lv_h) + kl_std_normal(mu_n, lv_n)
    lat = LatentTriple(z_g, z_h, z_n, (mu_g, mu_h, mu_n), (lv_g, lv_h, lv_n), noise)
    return _Pass(f, kl, lat, {"g": c_g, "h": c_h, "dg": c_dg, "dh": c_dh}, (m_g, m_hh))


def _backward(est: Estimator, cfg: VrbConfig, p: _Pass, df: np.ndarray, dkl: np.ndarray) -> np.ndarray:
    """Flat parameter gradient of ``sum(df * f) + sum(dkl * kl)``."""
    n = df.shape[0]
    sign = SHAPING_SIGNS[cfg.shaping_sign]
    g_dg, dz_g = backward_from_cache(est.d_g.spec, est.d_g.params, p.caches["dg"], df[:, None])
    up_h = np.concatenate([cfg.gamma * df, sign * df])[:, None]
    g_dh, dz_hh = backward_from_cache(est.d_h.spec, est.d_h.params, p.caches["dh"], up_h)
    dz_n, dz_h = dz_hh[:n], dz_hh[n:]
    lat = p.lat
    w = dkl[:, None]

    def head_grad(dz, mu, lv, eps):
        sigma = np.exp(0.5 * lv)
        dmu = dz + w * mu
        dlv = dz * eps * 0.5 * sigma + w * 0.5 * (np.exp(lv) - 1.0)
        return dmu, dlv

    dmu_g, dlv_g = head_grad(dz_g, lat.mu[0], lat.logvar[0], lat.noise[0])
    dmu_h, dlv_h = head_grad(dz_h, lat.mu[1], lat.logvar[1], lat.noise[1])
    dmu_n, dlv_n = head_grad(dz_n, lat.mu[2], lat.logvar[2], lat.noise[2])
    m_g, m_hh = p.masks
    out_g = np.hstack([dmu_g, dlv_g * m_g])
    out_h = np.hstack([np.vstack([dmu_h, dmu_n]), np.vstack([dlv_h, dlv_n]) * m_hh])
    g_eg, _ = backward_from_cache(est.enc_g.spec, est.enc_g.params, p.caches["g"], out_g)
    g_eh, _ = backward_from_cache(est.enc_h.spec, est.enc_h.params, p.caches["h"], out_h)
    return np.concatenate([g_eg, g_eh, g_dg, g_dh])


def encode(est: Estimator, x_t, x_next, a_t, rng: np.random.Generator | None = None,
           noise: np.ndarray | None = None, noise_scale: float = 1.0) -> LatentTriple:
    """Reparameterized sample of ``(z_g, z_h, z'_h)``; ``rng=None`` and no
    explicit noise gives the mean encoding."""
    x_t, x_next, a_t = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (x_t, x_next, a_t))
    if noise is None and rng is not None:
        noise = draw_noise(rng, x_t.shape[0], est.latent_dim, noise_scale)
    return _forward(est, VrbConfig(latent_dim=est.latent_dim), x_t, a_t, x_next, noise).lat


def f_score(est: Estimator, lat: LatentTriple, gamma: float, shaping_sign: str = "airl_minus") -> np.ndarray:
    dg = mlp_forward(est.d_g.spec, est.d_g.params, lat.z_g)[:, 0]
    dh_next = mlp_forward(est.d_h.spec, est.d_h.params, lat.z_next)[:, 0]
    dh = mlp_forward(est.d_h.spec, est.d_h.params, lat.z_h)[:, 0]
    return dg + gamma * dh_next + SHAPING_SIGNS[shaping_sign] * dh


def score(est: Estimator, cfg: VrbConfig, x, a, xn, noise=None) -> np.ndarray:
    """f for a batch of transitions; mean encoding when ``noise`` is None."""
    return _forward(est, cfg, x, a, xn, noise).f


def discriminator_log_probs(f, log_pi):
    """``(log D, log(1 - D))`` for ``D = exp(f) / (exp(f) + pi)``, in log space."""
    u = np.asarray(f, dtype=np.float64) - np.asarray(log_pi, dtype=np.float64)
    return -np.logaddexp(0.0, -u), -np.logaddexp(0.0, u)


def discriminator_prob(f, log_pi):
    # clamp keeps the result strictly inside (0, 1) in float64
    u = np.clip(np.asarray(f, dtype=np.float64) - np.asarray(log_pi, dtype=np.float64), -700.0, 36.0)
    d = np.exp(-np.logaddexp(0.0, -u))
    return float(d) if d.ndim == 0 else d


def shaped_reward(f, log_pi):
    r = np.asarray(f, dtype=np.float64) - np.asarray(log_pi, dtype=np.float64)
    return float(r) if r.ndim == 0 else r


def _require_sides(batch: EstimatorBatch, policy_only: bool = False):
    if batch.n_policy == 0 or (not policy_only and batch.n_expert == 0):
        raise PreconditionError("estimator batch needs non-empty expert and policy sides")


def bottleneck_penalty(batch: EstimatorBatch, est: Estimator, cfg: VrbConfig) -> float:
    """Mean policy-side KL of the three latent heads minus the bound ``i_c``."""
    _require_sides(batch, policy_only=True)
    p = _forward(est, cfg, batch.policy_x, batch.policy_a, batch.policy_xn, None)
    return float(np.mean(p.kl)) - cfg.i_c


def _loss(batch: EstimatorBatch, est: Estimator, cfg: VrbConfig, noise, phi: float, with_grad: bool):
    _require_sides(batch)
    ne, np_ = batch.n_expert, batch.n_policy
    noise_e, noise_p = (None, None) if noise is None else noise
    pe = _forward(est, cfg, batch.expert_x, batch.expert_a, batch.expert_xn, noise_e)
    pp = _forward(est, cfg, batch.policy_x, batch.policy_a, batch.policy_xn, noise_p)
    mean_e, mean_p, mean_kl = float(np.mean(pe.f)), float(np.mean(pp.f)), float(np.mean(pp.kl))
    loss = -(mean_e - mean_p - phi * (mean_kl - cfg.i_c))
    if not np.isfinite(loss):
        raise NumericError("estimator loss is not finite")
    diag = {"mean_expert_f": mean_e, "mean_policy_f": mean_p, "mean_policy_kl": mean_kl,
            "mean_expert_kl": float(np.mean(pe.kl)), "phi": phi}
    if cfg.adaptive_phi:
        diag["phi_next"] = max(0.0, phi + cfg.phi_step * (mean_kl - cfg.i_c))
    grad = None
    if with_grad:
        grad = _backward(est, cfg, pe, np.full(ne, -1.0 / ne), np.zeros(ne))
        grad += _backward(est, cfg, pp, np.full(np_, 1.0 / np_), np.full(np_, phi / np_))
    return loss, grad, diag


def draw_batch_noise(rng: np.random.Generator, batch: EstimatorBatch, latent_dim: int, scale: float = 1.0):
    return (draw_noise(rng, batch.n_expert, latent_dim, scale), draw_noise(rng, batch.n_policy, latent_dim, scale))


def vrb_loss(batch: EstimatorBatch, est: Estimator, cfg: VrbConfig, rng: np.random.Generator | None = None,
             noise=None, phi: float | None = None) -> tuple[float, dict]:
    """Minimization form of the bottlenecked estimator objective.

    Noise comes from ``noise`` (a pair of ``(3, n, d)`` arrays for the expert
    and policy sides) or is drawn from ``rng``; with neither, latents are the
    encoder means.
    """
    if noise is None and rng is not None:
        noise = draw_batch_noise(rng, batch, est.latent_dim, cfg.noise_scale)
    loss, _, diag = _loss(batch, est, cfg, noise, cfg.phi if phi is None else phi, False)
    return loss, diag


def vrb_loss_and_grad(batch, est, cfg, noise=None, phi=None):
    return _loss(batch, est, cfg, noise, cfg.phi if phi is None else phi, True)


def airl_loss(batch: EstimatorBatch, est: Estimator, cfg: VrbConfig) -> float:
    """Bottleneck-free objective: mean encoding and zero multiplier."""
    return _loss(batch, est, replace(cfg, adaptive_phi=False), None, 0.0, False)[0]


def airl_loss_and_grad(batch, est, cfg):
    return _loss(batch, est, replace(cfg, adaptive_phi=False), None, 0.0, True)


def update_estimator(opt: AdamState, est: Estimator, batch: EstimatorBatch, cfg: VrbConfig, noise=None,
                     phi: float | None = None, variant: str = "vrb") -> tuple[AdamState, Estimator, dict]:
    """One Adam step on all estimator parameters.

    ``variant="airl"`` optimizes the bottleneck-free objective instead. When
    ``cfg.adaptive_phi`` is set, ``diag["phi_next"]`` carries the dual update.
    """
    if variant == "airl":
        loss, grad, diag = airl_loss_and_grad(batch, est, cfg)
    else:
        loss, grad, diag = vrb_loss_and_grad(batch, est, cfg, noise, phi)
    opt, flat = adam_step(opt, est.flat(), grad)
    diag["loss"] = loss
    return opt, est.with_flat(flat), diag
