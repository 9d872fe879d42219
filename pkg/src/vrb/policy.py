"""Multi-Bernoulli dialog policy, value function, GAE and the PPO losses."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericError, ShapeError, StructureError
from .estimator import Net
from .numcore import AdamState, MlpSpec, adam_step, backward_from_cache, forward_with_cache, init_params, mlp_forward


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    epsilon_clip: float = 0.02
    epochs_per_batch: int = 4
    minibatch_size: int = 64
    value_coef: float = 0.5
    normalize_advantages: bool = True
    act_threshold_max: int = 0  # cap on acts per greedy turn; 0 = no cap


def make_policy(state_dim: int, n_acts: int, rng: np.random.Generator, hidden=(64, 64),
                output_bias: float = 0.0) -> Net:
    """``output_bias`` sets every initial logit offset; negative values start
    the policy sparse, emitting few acts per turn."""
    spec = MlpSpec((state_dim, *hidden, n_acts))
    params = init_params(spec, rng)
    params[spec.layer_slices()[-1][1]] = output_bias
    return Net(spec, params)


def make_value(state_dim: int, rng: np.random.Generator, hidden=(64, 64)) -> Net:
    spec = MlpSpec((state_dim, *hidden, 1))
    return Net(spec, init_params(spec, rng))


def _log_sig(x):
    return -np.logaddexp(0.0, -x)


def _bit_log_mass(logits: np.ndarray, a: np.ndarray) -> np.ndarray:
    return a * _log_sig(logits) + (1.0 - a) * _log_sig(-logits)


def _sigmoid(x):
    return np.exp(_log_sig(x))


def _coerced_mask(shape, coerced) -> np.ndarray:
    """1 for bits that count toward the log-mass; a coerced act's own bit is free."""
    mask = np.ones(shape)
    if coerced is not None:
        coerced = np.asarray(coerced)
        rows = np.flatnonzero(coerced >= 0)
        mask[rows, coerced[rows]] = 0.0
    return mask


def sample_actions(pol: Net, states, rng: np.random.Generator):
    """Batched draw. Returns ``(actions, log_pi, coerced_index)``.

    An all-zero draw becomes the single most probable act; its stored log-mass
    is that of the merged outcome ``{e_k, 0}``, which equals the product over
    the other bits of their off-probabilities.
    """
    x = np.atleast_2d(np.asarray(states, dtype=np.float64))
    logits = mlp_forward(pol.spec, pol.params, x)
    u = rng.random(logits.shape)
    a = (u < _sigmoid(logits)).astype(np.float64)
    coerced = np.full(x.shape[0], -1)
    empty = np.flatnonzero(a.sum(axis=1) == 0)
    for i in empty:
        k = int(np.argmax(logits[i]))
        a[i, k] = 1.0
        coerced[i] = k
    mask = _coerced_mask(a.shape, coerced)
    log_pi = np.sum(mask * _bit_log_mass(logits, a), axis=1)
    return a, log_pi, coerced


def sample_action(pol: Net, x, rng: np.random.Generator):
    """Single-state draw; returns ``(action, log_pi, coerced_index)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != pol.spec.input_width:
        raise ShapeError(f"expected state of length {pol.spec.input_width}, got shape {x.shape}")
    a, lp, c = sample_actions(pol, x[None, :], rng)
    return a[0], float(lp[0]), int(c[0])


def action_log_prob(pol: Net, x, a, coerced=None):
    """Log-mass of ``a`` under the independent-Bernoulli head (pre-coercion
    unless ``coerced`` names a coerced act index)."""
    single = np.asarray(x).ndim == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.shape[1] != pol.spec.output_width:
        raise ShapeError(f"expected action of length {pol.spec.output_width}, got {a.shape[1]}")
    logits = mlp_forward(pol.spec, pol.params, x)
    c = None if coerced is None else np.atleast_1d(coerced)
    lp = np.sum(_coerced_mask(a.shape, c) * _bit_log_mass(logits, a), axis=1)
    return float(lp[0]) if single else lp


def greedy_action(pol: Net, x, max_acts: int = 0) -> np.ndarray:
    logits = mlp_forward(pol.spec, pol.params, np.asarray(x, dtype=np.float64))
    a = (logits > 0.0).astype(np.float64)
    if max_acts and a.sum() > max_acts:
        keep = np.argsort(-logits, kind="stable")[:max_acts]
        a = np.zeros_like(a)
        a[keep] = 1.0
    if not a.any():
        a[int(np.argmax(logits))] = 1.0
    return a


@dataclass
class RolloutBatch:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    log_pi_old: np.ndarray
    dones: np.ndarray  # True on the last transition of each episode
    coerced: np.ndarray = None
    rewards: np.ndarray = None
    value_pred: np.ndarray = None
    advantages: np.ndarray = None
    returns: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.states.shape[0]
        if self.coerced is None:
            self.coerced = np.full(n, -1)
        self.dones = np.asarray(self.dones, dtype=bool)

    def __len__(self) -> int:
        return self.states.shape[0]

    def subset(self, idx) -> "RolloutBatch":
        pick = lambda v: None if v is None else v[idx]
        return RolloutBatch(self.states[idx], self.actions[idx], self.next_states[idx], self.log_pi_old[idx],
                            self.dones[idx], self.coerced[idx], pick(self.rewards), pick(self.value_pred),
                            pick(self.advantages), pick(self.returns))


def gae(rewards, values, dones, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Backward GAE recursion and discounted returns-to-go, per episode.

    The successor value after a ``done`` transition is 0.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    n = rewards.shape[0]
    if n and not dones[-1]:
        raise StructureError("last transition must close an episode")
    adv = np.zeros(n)
    ret = np.zeros(n)
    next_adv = next_ret = next_v = 0.0
    for t in range(n - 1, -1, -1):
        if dones[t]:
            next_adv = next_ret = next_v = 0.0
        delta = rewards[t] + gamma * next_v - values[t]
        next_adv = delta + gamma * lam * next_adv
        next_ret = rewards[t] + gamma * next_ret
        adv[t], ret[t] = next_adv, next_ret
        next_v = values[t]
    return adv, ret


def compute_gae(batch: RolloutBatch, val: Net, cfg: PpoConfig) -> RolloutBatch:
    if batch.rewards is None:
        raise StructureError("rewards must be filled before computing advantages")
    values = mlp_forward(val.spec, val.params, batch.states)[:, 0]
    adv, ret = gae(batch.rewards, values, batch.dones, cfg.gamma, cfg.lam)
    return replace(batch, value_pred=values, advantages=adv, returns=ret)


def normalized(adv: np.ndarray) -> np.ndarray:
    if adv.shape[0] < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def _ppo_terms(pol: Net, batch: RolloutBatch, cfg: PpoConfig, adv: np.ndarray):
    logits, cache = forward_with_cache(pol.spec, pol.params, batch.states)
    mask = _coerced_mask(batch.actions.shape, batch.coerced)
    log_pi = np.sum(mask * _bit_log_mass(logits, batch.actions), axis=1)
    with np.errstate(over="ignore"):
        ratio = np.exp(log_pi - batch.log_pi_old)
    bad = np.flatnonzero(~np.isfinite(ratio))
    if bad.size:
        raise NumericError(f"non-finite probability ratio at transition {int(bad[0])}")
    eps = cfg.epsilon_clip
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    surr = np.minimum(ratio * adv, clipped * adv)
    return logits, cache, mask, ratio, surr


def ppo_clip_loss_and_grad(pol: Net, batch: RolloutBatch, cfg: PpoConfig, adv=None):
    """Negated clipped surrogate and its parameter gradient."""
    if adv is None:
        adv = normalized(batch.advantages) if cfg.normalize_advantages else batch.advantages
    logits, cache, mask, ratio, surr = _ppo_terms(pol, batch, cfg, adv)
    n = len(batch)
    eps = cfg.epsilon_clip
    # gradient flows only where the unclipped branch attains the min
    active = (ratio * adv <= np.clip(ratio, 1 - eps, 1 + eps) * adv) | ((ratio >= 1 - eps) & (ratio <= 1 + eps))
    dlogp = -(active * ratio * adv) / n
    dlogits = dlogp[:, None] * mask * (batch.actions - _sigmoid(logits))
    grad, _ = backward_from_cache(pol.spec, pol.params, cache, dlogits)
    diag = {"mean_ratio": float(ratio.mean()), "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
            "mean_abs_ratio_dev": float(np.mean(np.abs(ratio - 1.0)))}
    return -float(surr.mean()), grad, diag


def ppo_clip_loss(pol: Net, batch: RolloutBatch, cfg: PpoConfig, adv=None) -> float:
    return ppo_clip_loss_and_grad(pol, batch, cfg, adv)[0]


def unclipped_surrogate(pol: Net, batch: RolloutBatch, adv) -> float:
    mask = _coerced_mask(batch.actions.shape, batch.coerced)
    logits = mlp_forward(pol.spec, pol.params, batch.states)
    log_pi = np.sum(mask * _bit_log_mass(logits, batch.actions), axis=1)
    return float(np.mean(np.exp(log_pi - batch.log_pi_old) * adv))


def value_loss_and_grad(val: Net, batch: RolloutBatch):
    v, cache = forward_with_cache(val.spec, val.params, batch.states)
    err = v[:, 0] - batch.returns
    grad, _ = backward_from_cache(val.spec, val.params, cache, (2.0 * err / len(batch))[:, None])
    return float(np.mean(err**2)), grad


def value_loss(val: Net, batch: RolloutBatch) -> float:
    v = mlp_forward(val.spec, val.params, batch.states)[:, 0]
    return float(np.mean((v - batch.returns) ** 2))


@dataclass
class PolicyOptim:
    policy: AdamState
    value: AdamState


def update_policy(opt: PolicyOptim, pol: Net, val: Net, batch: RolloutBatch, cfg: PpoConfig,
                  rng: np.random.Generator) -> tuple[PolicyOptim, Net, Net, dict]:
    """``epochs_per_batch`` passes of shuffled minibatch Adam steps on the
    clipped surrogate (policy) and ``value_coef`` times the value loss."""
    if batch.advantages is None or batch.returns is None:
        raise StructureError("batch needs advantages and returns; run compute_gae first")
    adv_all = normalized(batch.advantages) if cfg.normalize_advantages else batch.advantages
    n = len(batch)
    mb = max(1, min(cfg.minibatch_size, n))
    p_state, v_state = opt.policy, opt.value
    pol_params, val_params = pol.params, val.params
    clip_fracs, vlosses = [], []
    for _ in range(cfg.epochs_per_batch):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            sub = batch.subset(idx)
            _, g_pol, d = ppo_clip_loss_and_grad(Net(pol.spec, pol_params), sub, cfg, adv_all[idx])
            vl, g_val = value_loss_and_grad(Net(val.spec, val_params), sub)
            p_state, pol_params = adam_step(p_state, pol_params, g_pol)
            v_state, val_params = adam_step(v_state, val_params, cfg.value_coef * g_val)
            clip_fracs.append(d["clip_fraction"])
            vlosses.append(vl)
    new_pol, new_val = Net(pol.spec, pol_params), Net(val.spec, val_params)
    _, _, post = ppo_clip_loss_and_grad(new_pol, batch, cfg, adv_all)
    diag = {
        "clip_fraction": float(np.mean(clip_fracs)) if clip_fracs else 0.0,
        "value_loss": float(np.mean(vlosses)) if vlosses else 0.0,
        "mean_ratio": post["mean_ratio"],
        "mean_abs_ratio_dev": post["mean_abs_ratio_dev"],
    }
    return PolicyOptim(p_state, v_state), new_pol, new_val, diag
