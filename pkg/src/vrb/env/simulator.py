"""Goal sampling, agenda-based user simulator, state encoding, the dialog
environment and the rule-based expert."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..errors import ConfigurationError, ProtocolError, StateError
from .schema import BYE, Act, DomainSchema, World, action

ONGOING, SUCCESS, FAILURE = "ongoing", "success", "failure"


@dataclass(frozen=True)
class UserGoal:
    domains: tuple[str, ...]
    constraints: dict  # domain -> {slot: value index}, slots in schema order
    requests: dict  # domain -> tuple of requestable slot names

    def request_pairs(self) -> list[tuple[str, str]]:
        return [(d, s) for d in self.domains for s in self.requests.get(d, ())]

    def to_json(self) -> dict:
        return {
            "domains": list(self.domains),
            "constraints": {d: dict(self.constraints[d]) for d in self.domains},
            "requests": {d: list(self.requests.get(d, ())) for d in self.domains},
        }

    @classmethod
    def from_json(cls, data: dict) -> "UserGoal":
        domains = tuple(data["domains"])
        return cls(
            domains,
            {d: {s: int(v) for s, v in data["constraints"][d].items()} for d in domains},
            {d: tuple(data["requests"].get(d, ())) for d in domains},
        )


@dataclass(frozen=True)
class GoalConfig:
    min_domains: int = 1
    max_domains: int = 2
    min_constraints: int = 1
    max_constraints: int = 3
    request_prob: float = 0.5
    # every goal domain asks for something, so voiced requests mark the end of its constraints
    request_every_domain: bool = True


def sample_goal(world: World, rng: np.random.Generator, cfg: GoalConfig = GoalConfig()) -> UserGoal:
    """Draw a goal whose constraints are copied from a random entity, so it is
    always satisfiable."""
    schema, db = world.schema, world.db
    n_dom = len(schema.domains)
    lo, hi = cfg.min_domains, min(cfg.max_domains, n_dom)
    if not 1 <= lo <= hi:
        raise ConfigurationError(f"bad goal domain range [{cfg.min_domains}, {cfg.max_domains}] for {n_dom} domains")
    k = int(rng.integers(lo, hi + 1))
    picked = [schema.domains[i] for i in rng.permutation(n_dom)[:k]]
    constraints, requests = {}, {}
    for d in picked:
        entities = db.in_domain(d.name)
        if not entities:
            raise ConfigurationError(f"no entities for domain {d.name!r}")
        ent = entities[int(rng.integers(len(entities)))]
        n_slots = len(d.informable)
        c_lo, c_hi = min(cfg.min_constraints, n_slots), min(cfg.max_constraints, n_slots)
        n_c = int(rng.integers(c_lo, c_hi + 1))
        chosen = sorted(rng.permutation(n_slots)[:n_c])
        constraints[d.name] = {d.informable[i].name: ent.informable[d.informable[i].name] for i in chosen}
        req = [s.name for s in d.requestable if rng.random() < cfg.request_prob]
        if not req and cfg.request_every_domain and d.requestable:
            req = [d.requestable[int(rng.integers(len(d.requestable)))].name]
        requests[d.name] = tuple(req)
    if not any(requests.values()):
        with_req = [d for d in picked if d.requestable]
        if with_req:
            d = with_req[int(rng.integers(len(with_req)))]
            requests[d.name] = (d.requestable[int(rng.integers(len(d.requestable)))].name,)
    return UserGoal(tuple(d.name for d in picked), constraints, requests)


@dataclass
class AgendaState:
    """User-side memory: pending agenda items plus what the system has done."""

    items: tuple  # ("constraint", d, s) | ("requests", d, "")
    stated: frozenset = frozenset()
    voiced: frozenset = frozenset()
    bookings: dict = field(default_factory=dict)  # domain -> entity id
    informed: dict = field(default_factory=dict)  # (domain, slot) -> value index
    turn: int = 0


def init_agenda(goal: UserGoal) -> AgendaState:
    items = []
    for d in goal.domains:
        items += [("constraint", d, s) for s in goal.constraints[d]]
        if goal.requests.get(d):
            items.append(("requests", d, ""))
    return AgendaState(tuple(items))


def validate_sys_action(world: World, sys_action: Sequence[Act]) -> None:
    schema, db = world.schema, world.db
    for act in sys_action:
        if act.kind == "bye":
            continue
        dom = schema.domain(act.domain)
        if act.kind == "request":
            dom.informable_slot(act.slot)
        elif act.kind == "inform":
            slot = dom.requestable_slot(act.slot)
            if not isinstance(act.value, (int, np.integer)) or not 0 <= act.value < len(slot.values):
                raise ProtocolError(f"inform value {act.value!r} out of range for {act.domain}.{act.slot}")
        elif act.kind == "book":
            if db.get(act.value).domain != act.domain:
                raise ProtocolError(f"entity {act.value!r} does not belong to domain {act.domain!r}")
        else:
            raise ProtocolError(f"unknown system act kind {act.kind!r}")


def request_answered(world: World, goal: UserGoal, agenda: AgendaState, domain: str, slot: str) -> bool:
    """Whether the last informed value for ``domain.slot`` agrees with the booked
    entity (or, for domains without booking, with some goal-satisfying entity)."""
    value = agenda.informed.get((domain, slot))
    if value is None:
        return False
    if world.schema.domain(domain).requires_booking:
        booked = agenda.bookings.get(domain)
        return booked is not None and world.db.get(booked).requestable[slot] == value
    return any(e.requestable[slot] == value for e in world.db.matches(domain, goal.constraints.get(domain, {})))


def booking_matches(world: World, goal: UserGoal, agenda: AgendaState, domain: str) -> bool:
    booked = agenda.bookings.get(domain)
    if booked is None:
        return False
    ent = world.db.get(booked)
    return all(ent.informable[s] == v for s, v in goal.constraints[domain].items())


def outstanding_requests(world: World, goal: UserGoal, agenda: AgendaState) -> set:
    return {(d, s) for d, s in agenda.voiced if not request_answered(world, goal, agenda, d, s)}


def goal_achieved(world: World, goal: UserGoal, agenda: AgendaState) -> bool:
    for d in goal.domains:
        if any((d, s) not in agenda.stated for s in goal.constraints[d]):
            return False
        if world.schema.domain(d).requires_booking and not booking_matches(world, goal, agenda, d):
            return False
    return all(request_answered(world, goal, agenda, d, s) for d, s in goal.request_pairs())


def user_step(world: World, goal: UserGoal, agenda: AgendaState, sys_action: Sequence[Act], turn_cap: int = 20):
    """Advance the agenda-based user by one system turn.

    Returns ``(user_action, t_u, new_agenda)``. The user answers system
    requests for constrained slots, states all remaining constraints of a
    domain once it is booked, voices a domain's requests as soon as all of its
    constraints are stated, and otherwise pops the next agenda item.
    """
    validate_sys_action(world, sys_action)
    stated, voiced = set(agenda.stated), set(agenda.voiced)
    bookings, informed = dict(agenda.bookings), dict(agenda.informed)
    items = list(agenda.items)
    booked_now = []
    for act in sys_action:
        if act.kind == "book":
            bookings[act.domain] = act.value
            booked_now.append(act.domain)
    for act in sys_action:
        if act.kind == "inform":
            informed[(act.domain, act.slot)] = int(act.value)
    turn = agenda.turn + 1
    new = replace(agenda, items=tuple(items), stated=frozenset(stated), voiced=frozenset(voiced),
                  bookings=bookings, informed=informed, turn=turn)
    if any(a.kind == "bye" for a in sys_action):
        return (BYE,), (SUCCESS if goal_achieved(world, goal, new) else FAILURE), new

    out: list[Act] = []
    fresh = False

    def state(d, s):
        nonlocal fresh
        out.append(Act("inform_constraint", d, s, goal.constraints[d][s]))
        if (d, s) not in stated:
            stated.add((d, s))
            fresh = True

    def voice():
        nonlocal fresh
        for d in goal.domains:
            reqs = goal.requests.get(d, ())
            if reqs and all((d, s) in stated for s in goal.constraints[d]) and (d, reqs[0]) not in voiced:
                for s in reqs:
                    out.append(Act("request", d, s))
                    voiced.add((d, s))
                fresh = True

    for act in sys_action:
        if act.kind == "request" and act.domain in goal.constraints and act.slot in goal.constraints[act.domain]:
            state(act.domain, act.slot)
    for d in booked_now:
        if d in goal.constraints:
            for s in goal.constraints[d]:
                if (d, s) not in stated:
                    state(d, s)
    voice()
    if not fresh:
        while items:
            kind, d, s = items.pop(0)
            if kind == "constraint" and (d, s) not in stated:
                state(d, s)
                voice()
                break
    new = replace(new, items=tuple(items), stated=frozenset(stated), voiced=frozenset(voiced))
    if turn >= turn_cap:
        return (BYE,), FAILURE, new
    return action(out), ONGOING, new


@dataclass(frozen=True)
class BeliefState:
    constraints: dict = field(default_factory=dict)  # (domain, slot) -> value index
    requests: frozenset = frozenset()  # outstanding (domain, slot)


@dataclass(frozen=True)
class QueryFeature:
    counts: dict = field(default_factory=dict)  # domain -> match count (0 when no query issued)
    booked: frozenset = frozenset()


class StateLayout:
    """Bit layout of the encoded dialog state ``[user acts; system acts; belief; query]``."""

    def __init__(self, schema: DomainSchema):
        self.schema = schema
        vocab = schema.vocab
        self.user_off = 0
        self.sys_off = vocab.n_user
        off = self.sys_off + vocab.n_sys
        self.belief_off = off
        self.constraint_index = {}
        for d in schema.domains:
            for s in d.informable:
                for v in range(len(s.values)):
                    self.constraint_index[(d.name, s.name, v)] = off
                    off += 1
        self.request_index = {}
        for d in schema.domains:
            for s in d.requestable:
                self.request_index[(d.name, s.name)] = off
                off += 1
        self.query_off = off
        self.query_index = {}
        for d in schema.domains:
            for bucket in ("0", "1", "2+", "booked"):
                self.query_index[(d.name, bucket)] = off
                off += 1
        self.dim = off

    def names(self) -> list[str]:
        vocab = self.schema.vocab
        out = ["user:" + ":".join(filter(None, k)) for k in vocab.user_keys]
        out += ["sys:" + ":".join(filter(None, k)) for k in vocab.sys_keys]
        out += [None] * (self.dim - len(out))
        for (d, s, v), i in self.constraint_index.items():
            out[i] = f"belief:{d}:{s}={v}"
        for (d, s), i in self.request_index.items():
            out[i] = f"request:{d}:{s}"
        for (d, b), i in self.query_index.items():
            out[i] = f"query:{d}:{b}"
        return out


def dst_encode(schema: DomainSchema, user_action, prev_sys_action, belief: BeliefState, query: QueryFeature) -> np.ndarray:
    layout = _layout(schema)
    vocab = schema.vocab
    x = np.zeros(layout.dim)
    for a in user_action:
        x[layout.user_off + vocab.user_index(a)] = 1.0
    for a in prev_sys_action:
        x[layout.sys_off + vocab.sys_index(a)] = 1.0
    for (d, s), v in belief.constraints.items():
        x[layout.constraint_index[(d, s, v)]] = 1.0
    for d, s in belief.requests:
        x[layout.request_index[(d, s)]] = 1.0
    for d in schema.domains:
        n = query.counts.get(d.name, 0)
        x[layout.query_index[(d.name, "0" if n == 0 else "1" if n == 1 else "2+")]] = 1.0
        if d.name in query.booked:
            x[layout.query_index[(d.name, "booked")]] = 1.0
    return x


_LAYOUTS: dict = {}


def _layout(schema: DomainSchema) -> StateLayout:
    key = id(schema)
    if key not in _LAYOUTS or _LAYOUTS[key].schema is not schema:
        _LAYOUTS[key] = StateLayout(schema)
    return _LAYOUTS[key]


def state_dim(schema: DomainSchema) -> int:
    return _layout(schema).dim


@dataclass
class Turn:
    user_action: tuple
    state_before: np.ndarray
    sys_action: tuple
    state_after: np.ndarray


@dataclass
class Session:
    goal: UserGoal
    turns: list
    final_user_action: tuple = ()
    t_u: str = ONGOING

    @property
    def turn_count(self) -> int:
        return len(self.turns)


class DialogEnv:
    """One episode: goal, user agenda, system bookings, and the encoded state."""

    def __init__(self, world: World, goal: UserGoal, turn_cap: int = 20):
        self.world = world
        self.goal = goal
        self.turn_cap = turn_cap
        self.agenda = init_agenda(goal)
        self.user_action: tuple = ()
        self.prev_sys_action: tuple = ()
        self.t_u = ONGOING
        self.turns: list[Turn] = []
        self.state = self.encode()

    @property
    def terminal(self) -> bool:
        return self.t_u != ONGOING

    def stated_constraints(self, domain: str) -> dict:
        return {s: v for s, v in self.goal.constraints.get(domain, {}).items() if (domain, s) in self.agenda.stated}

    def matches(self, domain: str) -> list:
        return self.world.db.matches(domain, self.stated_constraints(domain))

    def belief(self) -> BeliefState:
        cons = {(d, s): self.goal.constraints[d][s] for d, s in self.agenda.stated}
        return BeliefState(cons, frozenset(outstanding_requests(self.world, self.goal, self.agenda)))

    def query(self) -> QueryFeature:
        counts = {}
        for d in self.world.schema.domains:
            counts[d.name] = len(self.matches(d.name)) if self.stated_constraints(d.name) else 0
        return QueryFeature(counts, frozenset(self.agenda.bookings))

    def encode(self) -> np.ndarray:
        return dst_encode(self.world.schema, self.user_action, self.prev_sys_action, self.belief(), self.query())

    def outstanding(self) -> set:
        return outstanding_requests(self.world, self.goal, self.agenda)

    def reference_entity(self, domain: str):
        booked = self.agenda.bookings.get(domain)
        if booked is not None:
            return self.world.db.get(booked)
        found = self.matches(domain) or self.world.db.in_domain(domain)
        return found[0]

    def lexicalize(self, bits) -> tuple:
        """Turn a multi-hot system act vector into concrete acts.

        Bookings take the first entity matching the stated constraints; informs
        read the booked entity (or that first match when nothing is booked).
        """
        keys = self.world.schema.vocab.sys_keys
        chosen = [keys[i] for i in np.flatnonzero(np.asarray(bits) > 0.5)]
        acts, booked = [], {}
        for kind, d, s in chosen:
            if kind == "book":
                ent = (self.matches(d) or self.world.db.in_domain(d))[0]
                booked[d] = ent
                acts.append(Act("book", d, "", ent.id))
        for kind, d, s in chosen:
            if kind == "request":
                acts.append(Act("request", d, s))
            elif kind == "inform":
                ent = booked.get(d) or self.reference_entity(d)
                acts.append(Act("inform", d, s, ent.requestable[s]))
            elif kind == "bye":
                acts.append(BYE)
        return action(acts)

    def step(self, sys_action) -> tuple[np.ndarray, dict]:
        if self.terminal:
            raise StateError("dialog already terminated")
        sys_action = action(sys_action)
        if not sys_action:
            raise ProtocolError("system action must contain at least one act")
        before, prior_user = self.state, self.user_action
        user_action, t_u, self.agenda = user_step(self.world, self.goal, self.agenda, sys_action, self.turn_cap)
        self.prev_sys_action = sys_action
        self.user_action = user_action
        self.t_u = t_u
        self.state = self.encode()
        self.turns.append(Turn(prior_user, before, sys_action, self.state))
        return self.state, {"t_u": t_u, "user_action": user_action, "turn": self.agenda.turn}

    def session(self) -> Session:
        return Session(self.goal, list(self.turns), self.user_action if self.terminal else (), self.t_u)


def env_apply(env: DialogEnv, sys_action) -> tuple[np.ndarray, dict]:
    return env.step(sys_action)


def expert_policy(env: DialogEnv) -> tuple:
    """Goal-aware rule policy used to produce the expert corpus."""
    if env.terminal:
        raise StateError("dialog already terminated")
    world, goal, agenda = env.world, env.goal, env.agenda
    outstanding = env.outstanding()
    for d in goal.domains:
        dom = world.schema.domain(d)
        unstated = [s for s in goal.constraints[d] if (d, s) not in agenda.stated]
        pending = sorted(s for dd, s in outstanding if dd == d)
        if dom.requires_booking and not booking_matches(world, goal, agenda, d):
            stated = env.stated_constraints(d)
            matches = env.matches(d)
            if unstated and (not stated or len(matches) != 1):
                return (Act("request", d, unstated[0]),)
            ent = matches[0]
            return action([Act("book", d, "", ent.id)] + [Act("inform", d, s, ent.requestable[s]) for s in pending])
        if pending:
            ent = env.reference_entity(d)
            return action(Act("inform", d, s, ent.requestable[s]) for s in pending)
        if unstated:
            return (Act("request", d, unstated[0]),)
    return (BYE,)


def run_expert(world: World, goal: UserGoal, turn_cap: int = 20) -> Session:
    env = DialogEnv(world, goal, turn_cap)
    while not env.terminal:
        env.step(expert_policy(env))
    return env.session()
