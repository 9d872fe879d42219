"""Synthetic multi-domain slot-filling dialog environment."""

from .corpus import generate_corpus, read_corpus, write_corpus
from .metrics import MetricsReport, evaluate_sessions, score_session
from .schema import BYE, Act, Database, Domain, DomainSchema, Entity, Slot, World, toy_world
from .simulator import (
    FAILURE,
    ONGOING,
    SUCCESS,
    AgendaState,
    BeliefState,
    DialogEnv,
    GoalConfig,
    QueryFeature,
    Session,
    StateLayout,
    Turn,
    UserGoal,
    dst_encode,
    env_apply,
    expert_policy,
    init_agenda,
    run_expert,
    sample_goal,
    state_dim,
    user_step,
)
