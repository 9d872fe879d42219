"""Adversarial training loop: estimator and policy updates alternate once per
iteration against the expert corpus and fresh simulator rollouts."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import config as config_mod
from .checkpoint import read_container, write_container
from .config import TrainConfig
from .env.corpus import generate_corpus, read_corpus
from .env.metrics import MetricsReport, evaluate_sessions
from .env.schema import World, toy_world
from .env.simulator import SUCCESS, DialogEnv, Session, expert_policy, sample_goal, state_dim
from .errors import CompatibilityError, NumericError
from .estimator import (
    Estimator,
    EstimatorBatch,
    Net,
    bottleneck_penalty,
    draw_batch_noise,
    make_estimator,
    score,
    shaped_reward,
    update_estimator,
)
from .numcore import AdamState, MlpSpec, rng_state, rng_stream, restore_rng
from .policy import (
    PolicyOptim,
    RolloutBatch,
    compute_gae,
    greedy_action,
    make_policy,
    make_value,
    sample_actions,
    update_policy,
)

log = logging.getLogger(__name__)

STREAMS = {"init": 1, "rollout": 2, "expert": 3, "noise": 4, "minibatch": 5}
EVAL_STREAM_BASE = 1_000_000


@dataclass
class Checkpoint:
    config: TrainConfig
    schema_hash: str
    iteration: int
    policy: Net
    value: Net
    estimator: Estimator
    policy_opt: AdamState
    value_opt: AdamState
    estimator_opt: AdamState
    phi: float
    rngs: dict


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    RECORD_COLUMNS = (
        "iteration", "rollout_iteration", "policy_transitions", "rollout_success", "mean_reward",
        "mean_expert_f", "mean_policy_f", "f_gap", "mean_policy_kl", "bottleneck_penalty", "phi",
        "estimator_loss", "clip_fraction", "value_loss", "mean_ratio",
    )
    SNAPSHOT_COLUMNS = ("iteration", "avg_turns", "match_rate", "inform_precision", "inform_recall",
                        "inform_f1", "success_rate", "session_count")

    def records_csv(self) -> str:
        return _csv(self.RECORD_COLUMNS, self.records)

    def snapshots_csv(self) -> str:
        return _csv(self.SNAPSHOT_COLUMNS, self.snapshots)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        a, b = out / "report.csv", out / "eval.csv"
        a.write_text(self.records_csv(), encoding="utf-8")
        b.write_text(self.snapshots_csv(), encoding="utf-8")
        return a, b


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


@dataclass
class ExpertData:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray

    @classmethod
    def from_sessions(cls, world: World, sessions, pad_to: int = 0) -> "ExpertData":
        """Corpus transitions; with ``pad_to`` each session is followed by
        absorbing transitions up to that many steps."""
        vocab = world.schema.vocab
        dx = state_dim(world.schema)
        xs, acts, xns = [], [], []
        for s in sessions:
            for t in s.turns:
                xs.append(t.state_before)
                acts.append(vocab.sys_multi_hot(t.sys_action))
                xns.append(t.state_after)
            pad = max(0, pad_to - len(s.turns))
            xs += [np.zeros(dx)] * pad
            acts += [np.zeros(vocab.n_sys)] * pad
            xns += [np.zeros(dx)] * pad
        return cls(np.array(xs), np.array(acts), np.array(xns))

    def __len__(self) -> int:
        return self.states.shape[0]


def load_world(cfg: TrainConfig) -> World:
    return World.load(cfg.env.schema_path) if cfg.env.schema_path else toy_world()


def load_expert_sessions(cfg: TrainConfig, world: World) -> list[Session]:
    if cfg.env.corpus_path:
        return read_corpus(cfg.env.corpus_path, world, cfg.env.turn_cap)
    return generate_corpus(world, cfg.env.corpus_sessions, rng_stream(cfg.env.corpus_seed, 0),
                           cfg.env.goal, cfg.env.turn_cap)


def init_checkpoint(cfg: TrainConfig, world: World) -> Checkpoint:
    rngs = {name: rng_stream(cfg.seed, sid) for name, sid in STREAMS.items()}
    init = rngs["init"]
    dx, na = state_dim(world.schema), world.schema.vocab.n_sys
    pol = make_policy(dx, na, init, cfg.nets.policy_hidden, cfg.nets.policy_output_bias)
    val = make_value(dx, init, cfg.nets.value_hidden)
    est = make_estimator(dx, na, init, cfg.vrb.latent_dim, cfg.nets.encoder_hidden, cfg.nets.head_hidden)
    return Checkpoint(
        config=cfg, schema_hash=world.schema_hash, iteration=0, policy=pol, value=val, estimator=est,
        policy_opt=AdamState.zeros(pol.spec.n_params, cfg.policy_lr),
        value_opt=AdamState.zeros(val.spec.n_params, cfg.value_lr),
        estimator_opt=AdamState.zeros(est.n_params, cfg.estimator_lr),
        phi=cfg.vrb.phi, rngs=rngs,
    )


def run_episodes(world: World, goals, act: Callable, turn_cap: int = 20) -> list[Session]:
    """Play all goals in lockstep; ``act(envs, states)`` returns one act vector
    (or a concrete action tuple) per active environment."""
    envs = [DialogEnv(world, g, turn_cap) for g in goals]
    active = list(envs)
    while active:
        moves = act(active, np.array([e.state for e in active]))
        for env, move in zip(active, moves):
            env.step(move if isinstance(move, tuple) else env.lexicalize(move))
        active = [e for e in active if not e.terminal]
    return [e.session() for e in envs]


def collect_rollouts(pol: Net, world: World, cfg: TrainConfig, rng: np.random.Generator):
    goals = [sample_goal(world, rng, cfg.env.goal) for _ in range(cfg.sessions_per_iteration)]
    records = {}

    def act(envs, states):
        a, lp, c = sample_actions(pol, states, rng)
        for env, ai, lpi, ci in zip(envs, a, lp, c):
            records.setdefault(id(env), []).append((ai, lpi, ci))
        return list(a)

    sessions = run_episodes(world, goals, act, cfg.env.turn_cap)
    xs, acts, xns, lps, cs, dones = [], [], [], [], [], []
    envs_order = list(records)
    for key, s in zip(envs_order, sessions):
        steps = records[key]
        for i, (t, (ai, lpi, ci)) in enumerate(zip(s.turns, steps)):
            xs.append(t.state_before)
            xns.append(t.state_after)
            acts.append(ai)
            lps.append(lpi)
            cs.append(ci)
            dones.append(i == len(s.turns) - 1)
    batch = RolloutBatch(np.array(xs), np.array(acts), np.array(xns), np.array(lps), np.array(dones),
                         np.array(cs, dtype=np.int64))
    return batch, sessions


def absorbing_steps(batch: RolloutBatch, turn_cap: int) -> np.ndarray:
    """Absorbing steps owed after each episode end (zero elsewhere)."""
    owed = np.zeros(len(batch), dtype=np.int64)
    start = 0
    for end in np.flatnonzero(batch.dones):
        owed[end] = max(0, turn_cap - (end - start + 1))
        start = end + 1
    return owed


def absorbing_tail(f_abs: float, owed: np.ndarray, gamma: float) -> np.ndarray:
    """Discounted value of ``owed`` absorbing steps scored ``f_abs`` each,
    folded onto the episode's last real transition."""
    k = owed.astype(np.float64)
    if gamma == 1.0:
        return f_abs * k
    return f_abs * gamma * (1.0 - gamma ** k) / (1.0 - gamma)


def policy_actor(pol: Net, max_acts: int = 0) -> Callable:
    def act(envs, states):
        return [greedy_action(pol, x, max_acts) for x in states]
    return act


def expert_actor(envs, states):
    return [expert_policy(e) for e in envs]


def evaluate_policy(source, world: World, n_sessions: int, rng: np.random.Generator,
                    cfg: TrainConfig | None = None) -> MetricsReport:
    """Greedy rollouts of a checkpoint, a policy net, or ``"expert"``."""
    if isinstance(source, Checkpoint):
        if source.schema_hash != world.schema_hash:
            raise CompatibilityError("checkpoint schema hash does not match the world")
        cfg = cfg or source.config
        actor = policy_actor(source.policy, cfg.ppo.act_threshold_max)
    elif isinstance(source, Net):
        actor = policy_actor(source, cfg.ppo.act_threshold_max if cfg else 0)
    elif source == "expert":
        actor = expert_actor
    else:
        actor = source
    cfg = cfg or TrainConfig()
    goals = [sample_goal(world, rng, cfg.env.goal) for _ in range(n_sessions)]
    return evaluate_sessions(world, run_episodes(world, goals, actor, cfg.env.turn_cap))


def final_evaluation(ck: Checkpoint, world: World, n_sessions: int | None = None) -> MetricsReport:
    """Greedy metrics on a goal stream reserved for end-of-training reports."""
    cfg = ck.config
    return evaluate_policy(ck, world, n_sessions or cfg.eval_sessions, rng_stream(cfg.seed, EVAL_STREAM_BASE - 1), cfg)


def train_iteration(ck: Checkpoint, world: World, expert: ExpertData, trace: Callable | None = None) -> dict:
    cfg = ck.config
    emit = trace or (lambda step: None)
    it = ck.iteration

    emit("corpus_sample")
    cap = cfg.sessions_per_iteration * cfg.env.turn_cap
    expert_idx = ck.rngs["expert"].integers(len(expert), size=cap)

    emit("rollout")
    batch, sessions = collect_rollouts(ck.policy, world, cfg, ck.rngs["rollout"])
    batch.meta["rollout_iteration"] = it
    px, pa, pxn, plp = batch.states, batch.actions, batch.next_states, batch.log_pi_old
    owed = absorbing_steps(batch, cfg.env.turn_cap) if cfg.absorbing_padding else np.zeros(len(batch), dtype=np.int64)
    n_abs = int(owed.sum())
    if n_abs:
        zx, za = np.zeros((n_abs, px.shape[1])), np.zeros((n_abs, pa.shape[1]))
        px, pa, pxn = np.vstack([px, zx]), np.vstack([pa, za]), np.vstack([pxn, zx])
        plp = np.concatenate([plp, np.zeros(n_abs)])
    n = px.shape[0]
    idx = expert_idx[:n]
    est_batch = EstimatorBatch(expert.states[idx], expert.actions[idx], expert.next_states[idx],
                               px, pa, pxn, policy_log_pi=plp)

    emit("encode")
    noise = draw_batch_noise(ck.rngs["noise"], est_batch, ck.estimator.latent_dim, cfg.vrb.noise_scale)

    emit("bottleneck")
    penalty = bottleneck_penalty(est_batch, ck.estimator, cfg.vrb)

    emit("estimator_update")
    est, opt, phi = ck.estimator, ck.estimator_opt, ck.phi
    for _ in range(cfg.estimator_steps):
        opt, est, ediag = update_estimator(opt, est, est_batch, cfg.vrb, noise, phi=phi, variant=cfg.variant)
        if cfg.vrb.adaptive_phi and cfg.variant == "vrb":
            phi = ediag["phi_next"]

    emit("reward")
    f = score(est, cfg.vrb, batch.states, batch.actions, batch.next_states)
    rewards = shaped_reward(f, batch.log_pi_old)
    if n_abs:
        dx, na = batch.states.shape[1], batch.actions.shape[1]
        f_abs = float(score(est, cfg.vrb, np.zeros(dx), np.zeros(na), np.zeros(dx))[0])
        rewards = rewards + absorbing_tail(f_abs, owed, cfg.ppo.gamma)
    if cfg.reward_centering:
        rewards = rewards - rewards.mean()
    batch = replace(batch, rewards=rewards)

    emit("policy_update")
    batch = compute_gae(batch, ck.value, cfg.ppo)
    popt, pol, val, pdiag = update_policy(PolicyOptim(ck.policy_opt, ck.value_opt), ck.policy, ck.value, batch,
                                         cfg.ppo, ck.rngs["minibatch"])

    ck.estimator, ck.estimator_opt, ck.phi = est, opt, phi
    ck.policy, ck.value, ck.policy_opt, ck.value_opt = pol, val, popt.policy, popt.value
    ck.iteration = it + 1
    record = {
        "iteration": it,
        "rollout_iteration": batch.meta["rollout_iteration"],
        "policy_transitions": len(batch),
        "rollout_success": float(np.mean([s.t_u == SUCCESS for s in sessions])),
        "mean_reward": float(np.mean(batch.rewards)),
        "mean_expert_f": ediag["mean_expert_f"],
        "mean_policy_f": ediag["mean_policy_f"],
        "f_gap": ediag["mean_expert_f"] - ediag["mean_policy_f"],
        "mean_policy_kl": ediag["mean_policy_kl"],
        "bottleneck_penalty": penalty,
        "phi": ediag["phi"],
        "estimator_loss": ediag["loss"],
        "clip_fraction": pdiag["clip_fraction"],
        "value_loss": pdiag["value_loss"],
        "mean_ratio": pdiag["mean_ratio"],
    }
    bad = [k for k, v in record.items() if isinstance(v, float) and not np.isfinite(v)]
    if bad:
        raise NumericError(f"non-finite diagnostics {bad} at iteration {it}")
    return record


def train(cfg: TrainConfig, world: World | None = None, expert_sessions=None, resume: Checkpoint | None = None,
          trace: Callable | None = None) -> tuple[Checkpoint, TrainReport]:
    world = world or load_world(cfg)
    if resume is not None:
        if resume.schema_hash != world.schema_hash:
            raise CompatibilityError("checkpoint schema hash does not match the world")
        ck = resume
        ck.config = cfg
    else:
        ck = init_checkpoint(cfg, world)
    sessions = expert_sessions if expert_sessions is not None else load_expert_sessions(cfg, world)
    expert = ExpertData.from_sessions(world, sessions, cfg.env.turn_cap if cfg.absorbing_padding else 0)
    report = TrainReport()
    while ck.iteration < cfg.iterations:
        record = train_iteration(ck, world, expert, trace)
        report.records.append(record)
        done = ck.iteration
        if cfg.eval_every > 0 and done % cfg.eval_every == 0:
            m = evaluate_policy(ck, world, cfg.eval_sessions, rng_stream(cfg.seed, EVAL_STREAM_BASE + done), cfg)
            report.snapshots.append({"iteration": done, **m.as_dict()})
            log.info("iter %d success=%.3f match=%.3f f1=%.3f turns=%.2f", done, m.success_rate, m.match_rate,
                     m.inform_f1, m.avg_turns)
        log.debug("iter %d %s", record["iteration"], record)
    return ck, report


def _net_arrays(prefix: str, net: Net) -> dict:
    return {f"{prefix}.params": net.params, f"{prefix}.widths": np.array(net.spec.layer_widths, dtype=np.int64)}


def _adam_arrays(prefix: str, st: AdamState) -> dict:
    return {f"{prefix}.m": st.first_moment, f"{prefix}.v": st.second_moment}


def _adam_meta(st: AdamState) -> dict:
    return {"step_count": st.step_count, "learning_rate": st.learning_rate, "beta1": st.beta1,
            "beta2": st.beta2, "epsilon_stab": st.epsilon_stab}


def save_checkpoint(ck: Checkpoint, path) -> None:
    arrays = {}
    arrays.update(_net_arrays("policy", ck.policy))
    arrays.update(_net_arrays("value", ck.value))
    for name, net in zip(("enc_g", "enc_h", "d_g", "d_h"), ck.estimator.nets()):
        arrays.update(_net_arrays(f"estimator.{name}", net))
    arrays.update(_adam_arrays("opt.policy", ck.policy_opt))
    arrays.update(_adam_arrays("opt.value", ck.value_opt))
    arrays.update(_adam_arrays("opt.estimator", ck.estimator_opt))
    meta = {
        "config": config_mod.to_dict(ck.config),
        "schema_hash": ck.schema_hash,
        "iteration": ck.iteration,
        "phi": ck.phi,
        "latent_dim": ck.estimator.latent_dim,
        "activations": {"policy": [ck.policy.spec.activation, ck.policy.spec.output_activation]},
        "opt": {k: _adam_meta(v) for k, v in
                (("policy", ck.policy_opt), ("value", ck.value_opt), ("estimator", ck.estimator_opt))},
        "rngs": {k: rng_state(g) for k, g in ck.rngs.items()},
    }
    write_container(path, arrays, meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = read_container(path)

    def net(prefix):
        return Net(MlpSpec(tuple(int(w) for w in arrays[f"{prefix}.widths"])), arrays[f"{prefix}.params"])

    def adam(prefix, m):
        return AdamState(arrays[f"{prefix}.m"], arrays[f"{prefix}.v"], **m)

    est = Estimator(*(net(f"estimator.{n}") for n in ("enc_g", "enc_h", "d_g", "d_h")), latent_dim=meta["latent_dim"])
    return Checkpoint(
        config=config_mod.from_dict(meta["config"]),
        schema_hash=meta["schema_hash"],
        iteration=meta["iteration"],
        policy=net("policy"),
        value=net("value"),
        estimator=est,
        policy_opt=adam("opt.policy", meta["opt"]["policy"]),
        value_opt=adam("opt.value", meta["opt"]["value"]),
        estimator_opt=adam("opt.estimator", meta["opt"]["estimator"]),
        phi=meta["phi"],
        rngs={k: restore_rng(s) for k, s in meta["rngs"].items()},
    )


METRIC_COLUMNS = ("avg_turns", "match_rate", "inform_f1", "success_rate")
METRIC_LABELS = {"avg_turns": "Turns", "match_rate": "Match", "inform_f1": "Inform F1", "success_rate": "Success"}


def ablation_compare(cfg: TrainConfig, seeds, world: World | None = None, expert_sessions=None,
                     eval_sessions: int | None = None, variants=None) -> dict:
    """Train each variant on every seed and summarize final greedy metrics as
    seed-median with interquartile range."""
    world = world or load_world(cfg)
    sessions = expert_sessions if expert_sessions is not None else load_expert_sessions(cfg, world)
    variants = variants or {"vrb": cfg, "airl": replace(cfg, variant="airl")}
    per_seed = {name: [] for name in variants}
    for name, vcfg in variants.items():
        for seed in seeds:
            ck, _ = train(replace(vcfg, seed=int(seed)), world, sessions)
            per_seed[name].append(final_evaluation(ck, world, eval_sessions))
    rows = []
    for name, reports in per_seed.items():
        row = {"variant": name}
        for col in METRIC_COLUMNS:
            vals = np.array([getattr(r, col) for r in reports])
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            row[col] = float(med)
            row[f"{col}_q1"] = float(q1)
            row[f"{col}_q3"] = float(q3)
        rows.append(row)
    return {"rows": rows, "per_seed": per_seed}


def ablation_csv(table: dict) -> str:
    cols = ["variant"]
    for c in METRIC_COLUMNS:
        cols += [c, f"{c}_q1", f"{c}_q3"]
    return _csv(cols, table["rows"])
