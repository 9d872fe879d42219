"""Dialog-level evaluation: Turns, Match rate, Inform F1, Success rate.

Scores are computed from each session's goal and the system acts it
contains, independently of the user simulator's own bookkeeping.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

from ..errors import PreconditionError, StateError
from .schema import World
from .simulator import ONGOING, Session


@dataclass(frozen=True)
class MetricsReport:
    avg_turns: float
    match_rate: float
    inform_precision: float
    inform_recall: float
    inform_f1: float
    success_rate: float
    session_count: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SessionScore:
    turns: int
    match: float | None  # None when the goal has no booking-required domain
    tp: int
    fp: int
    fn: int
    success: bool


def _final_system_record(session: Session):
    bookings, informed = {}, {}
    for turn in session.turns:
        for act in turn.sys_action:
            if act.kind == "book":
                bookings[act.domain] = act.value
        for act in turn.sys_action:
            if act.kind == "inform":
                informed[(act.domain, act.slot)] = act.value
    return bookings, informed


def score_session(world: World, session: Session) -> SessionScore:
    if session.t_u == ONGOING:
        raise StateError("cannot score a session that has not terminated")
    goal, db, schema = session.goal, world.db, world.schema
    bookings, informed = _final_system_record(session)

    def booked_ok(d):
        if d not in bookings:
            return False
        ent = db.get(bookings[d])
        return all(ent.informable[s] == v for s, v in goal.constraints[d].items())

    def inform_ok(d, s, v):
        if d not in goal.constraints:
            return False
        if schema.domain(d).requires_booking:
            return d in bookings and db.get(bookings[d]).requestable[s] == v
        return any(e.requestable[s] == v for e in db.matches(d, goal.constraints[d]))

    booking_domains = [d for d in goal.domains if schema.domain(d).requires_booking]
    match = sum(booked_ok(d) for d in booking_domains) / len(booking_domains) if booking_domains else None

    requested = set(goal.request_pairs())
    correct = {(d, s) for (d, s), v in informed.items() if inform_ok(d, s, v)}
    tp = len(requested & correct)
    fp = len(informed) - tp
    fn = len(requested) - tp
    success = fn == 0 and all(booked_ok(d) for d in booking_domains)
    return SessionScore(session.turn_count, match, tp, fp, fn, success)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def evaluate_sessions(world: World, sessions: Sequence[Session]) -> MetricsReport:
    """Aggregate metrics; Inform precision/recall are micro-averaged over the
    corpus and match rate averages per-session booking fractions."""
    if not sessions:
        raise PreconditionError("evaluate_sessions needs at least one session")
    scores = [score_session(world, s) for s in sessions]
    n = len(scores)
    matches = [s.match for s in scores if s.match is not None]
    tp = sum(s.tp for s in scores)
    fp = sum(s.fp for s in scores)
    fn = sum(s.fn for s in scores)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return MetricsReport(
        avg_turns=sum(s.turns for s in scores) / n,
        match_rate=sum(matches) / len(matches) if matches else 1.0,
        inform_precision=precision,
        inform_recall=recall,
        inform_f1=f1,
        success_rate=sum(s.success for s in scores) / n,
        session_count=n,
    )
