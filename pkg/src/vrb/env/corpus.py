"""Expert corpus generation and the line-delimited corpus file format.

The first line is a JSON header carrying the world's schema hash; every
following line is one session with its goal, the symbolic user/system acts of
each turn, the final user act and the user's terminal outcome. State vectors
are not stored: loading replays the acts through the deterministic simulator
and checks that the recorded user acts are reproduced.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import CompatibilityError, ConsistencyError, PreconditionError
from .schema import Act, World
from .simulator import SUCCESS, DialogEnv, GoalConfig, Session, UserGoal, run_expert, sample_goal

FORMAT = "vrb-corpus"
VERSION = 1


def generate_corpus(world: World, n_sessions: int, rng: np.random.Generator,
                    goal_cfg: GoalConfig = GoalConfig(), turn_cap: int = 20) -> list[Session]:
    if n_sessions < 1:
        raise PreconditionError("n_sessions must be >= 1")
    sessions = []
    for i in range(n_sessions):
        goal = sample_goal(world, rng, goal_cfg)
        session = run_expert(world, goal, turn_cap)
        if session.t_u != SUCCESS:
            raise ConsistencyError(f"expert failed on session {i} with goal {goal.to_json()}")
        sessions.append(session)
    return sessions


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def session_to_json(session: Session) -> dict:
    return {
        "goal": session.goal.to_json(),
        "turns": [
            {"user_acts": [a.to_json() for a in t.user_action], "sys_acts": [a.to_json() for a in t.sys_action]}
            for t in session.turns
        ],
        "final_user_acts": [a.to_json() for a in session.final_user_action],
        "t_u": session.t_u,
    }


def replay_session(world: World, record: dict, turn_cap: int = 20) -> Session:
    goal = UserGoal.from_json(record["goal"])
    env = DialogEnv(world, goal, turn_cap)
    for i, turn in enumerate(record["turns"]):
        expected_user = tuple(Act.from_json(a) for a in turn["user_acts"])
        if env.user_action != expected_user:
            raise ConsistencyError(f"replay diverged at turn {i}: user acts {env.user_action} != {expected_user}")
        env.step(tuple(Act.from_json(a) for a in turn["sys_acts"]))
    session = env.session()
    if session.t_u != record["t_u"]:
        raise ConsistencyError(f"replay outcome {session.t_u} != recorded {record['t_u']}")
    return session


def write_corpus(path, world: World, sessions: Sequence[Session]) -> None:
    lines = [_dumps({"format": FORMAT, "version": VERSION, "schema_hash": world.schema_hash, "sessions": len(sessions)})]
    lines += [_dumps(session_to_json(s)) for s in sessions]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path, world: World, turn_cap: int = 20) -> list[Session]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"corpus file not found: {p}")
    with p.open(encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT:
            raise CompatibilityError(f"{p} is not a corpus file")
        if header.get("schema_hash") != world.schema_hash:
            raise CompatibilityError(
                f"corpus schema hash {header.get('schema_hash')} does not match world {world.schema_hash}"
            )
        return [replay_session(world, json.loads(line), turn_cap) for line in fh if line.strip()]
