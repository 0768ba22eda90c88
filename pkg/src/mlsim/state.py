"""Dynamic-state algebra: influences, level states, agents, bodies.

All operations here are functional: they return new states and never mutate
their inputs.  A SystemState is a snapshot; the engine owns the only mutation
path (building the next snapshot from the current one).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping

from .errors import DuplicateBody, IllegalPerception, UnknownAgent, UnknownLevel
from .levels import LevelId

ORDINARY = "ordinary"
EMERGENCE = "emergence"
CONSTRAINT = "constraint"

AgentId = str

# Marker used as the producer of influences persisted by a level's reaction.
REACTION_PRODUCER_PREFIX = "reaction:"

BODY_KEY_PREFIX = "body:"


def body_key(agent_id: AgentId) -> str:
    return BODY_KEY_PREFIX + agent_id


def _freeze_payload(payload: Mapping[str, Any]) -> tuple:
    return tuple(sorted(payload.items()))


@dataclass(frozen=True)
class Influence:
    """A typed, level-targeted desire for change.

    Identity is id-based: two influences with equal ids are the same influence
    for deduplication purposes, and ids are producer-scoped so they never
    collide across producers or ticks.
    """

    id: str
    kind: str
    target_level: LevelId
    producer: str
    payload: tuple = ()
    klass: str = ORDINARY

    @property
    def payload_dict(self) -> dict:
        return dict(self.payload)

    def payload_get(self, key: str, default=None):
        for k, v in self.payload:
            if k == key:
                return v
        return default


def influence(kind, target_level, producer, uid, klass=ORDINARY, **payload) -> Influence:
    return Influence(
        id=uid,
        kind=kind,
        target_level=target_level,
        producer=producer,
        payload=_freeze_payload(payload),
        klass=klass,
    )


@dataclass(frozen=True)
class Body:
    """An agent's physical manifestation in one level's state."""

    level: LevelId
    attributes: dict = field(default_factory=dict)

    def get(self, name, default=None):
        return self.attributes.get(name, default)

    def with_attrs(self, **updates) -> "Body":
        attrs = dict(self.attributes)
        attrs.update(updates)
        return Body(self.level, attrs)


@dataclass(frozen=True)
class LevelState:
    """Per-level dynamic state: property map plus influence set."""

    level: LevelId
    properties: dict = field(default_factory=dict)
    influences: frozenset = frozenset()

    def bodies(self) -> dict[AgentId, Body]:
        return {
            key[len(BODY_KEY_PREFIX):]: value
            for key, value in self.properties.items()
            if key.startswith(BODY_KEY_PREFIX)
        }


@dataclass(frozen=True)
class AgentRecord:
    id: AgentId
    kind: str = ""
    internal_state: Any = None
    bodies: dict = field(default_factory=dict)  # LevelId -> Body


@dataclass(frozen=True)
class EnvironmentRecord:
    id: str
    member_levels: frozenset
    natural: Any = None  # callable(percept, ctx) -> iterable[Influence]

    def __post_init__(self):
        if not self.member_levels:
            raise ValueError(f"environment {self.id!r} must belong to at least one level")


@dataclass(frozen=True)
class SystemState:
    time: int = 0
    per_level: dict = field(default_factory=dict)  # LevelId -> LevelState
    agents: dict = field(default_factory=dict)  # AgentId -> AgentRecord


class Percept:
    """Read-only view over the level states a producer is allowed to perceive.

    Requesting a level outside the allowed set raises IllegalPerception; this
    is how perception-routing violations surface instead of silently leaking
    state.
    """

    def __init__(self, observed: Mapping[LevelId, LevelState], requester: str = "?"):
        self._observed = dict(observed)
        self._requester = requester

    def __getitem__(self, level: LevelId) -> LevelState:
        try:
            return self._observed[level]
        except KeyError:
            raise IllegalPerception(
                f"{self._requester} requested level {level!r} outside its "
                f"perception neighborhood {sorted(self._observed)}"
            ) from None

    def __contains__(self, level: LevelId) -> bool:
        return level in self._observed

    def levels(self) -> frozenset:
        return frozenset(self._observed)


# --- operations ---

def member_levels(state: SystemState, agent_id: AgentId) -> frozenset:
    """Levels where the agent has a body that is registered in the level state."""
    try:
        record = state.agents[agent_id]
    except KeyError:
        raise UnknownAgent(agent_id) from None
    members = set()
    for level, body in record.bodies.items():
        level_state = state.per_level.get(level)
        if level_state is not None and level_state.properties.get(body_key(agent_id)) == body:
            members.add(level)
    return frozenset(members)


def merge_influences(sets: Iterable[Iterable[Influence]]) -> frozenset:
    """Set union with id-based deduplication."""
    merged: dict[str, Influence] = {}
    for group in sets:
        for inf in group:
            merged.setdefault(inf.id, inf)
    return frozenset(merged.values())


def partition_by_level(influences: Iterable[Influence]) -> dict[LevelId, frozenset]:
    buckets: dict[LevelId, set] = {}
    for inf in influences:
        buckets.setdefault(inf.target_level, set()).add(inf)
    return {level: frozenset(group) for level, group in buckets.items()}


def _replace_level(state: SystemState, level: LevelId, level_state: LevelState) -> SystemState:
    per_level = dict(state.per_level)
    per_level[level] = level_state
    return replace(state, per_level=per_level)


def add_agent(state: SystemState, record: AgentRecord) -> SystemState:
    agents = dict(state.agents)
    agents[record.id] = record
    return replace(state, agents=agents)


def remove_agent(state: SystemState, agent_id: AgentId) -> SystemState:
    if agent_id not in state.agents:
        raise UnknownAgent(agent_id)
    record = state.agents[agent_id]
    new_state = state
    for level in list(record.bodies):
        new_state = remove_body(new_state, agent_id, level)
    agents = dict(new_state.agents)
    del agents[agent_id]
    return replace(new_state, agents=agents)


def register_body(state: SystemState, agent_id: AgentId, level: LevelId, body: Body) -> SystemState:
    if level not in state.per_level:
        raise UnknownLevel(level)
    if agent_id not in state.agents:
        raise UnknownAgent(agent_id)
    record = state.agents[agent_id]
    if level in record.bodies:
        raise DuplicateBody(f"agent {agent_id!r} already has a body in {level!r}")

    bodies = dict(record.bodies)
    bodies[level] = body
    agents = dict(state.agents)
    agents[agent_id] = replace(record, bodies=bodies)

    level_state = state.per_level[level]
    properties = dict(level_state.properties)
    properties[body_key(agent_id)] = body
    new_level = replace(level_state, properties=properties)
    return replace(_replace_level(state, level, new_level), agents=agents)


def remove_body(state: SystemState, agent_id: AgentId, level: LevelId) -> SystemState:
    if level not in state.per_level:
        raise UnknownLevel(level)
    if agent_id not in state.agents:
        raise UnknownAgent(agent_id)
    record = state.agents[agent_id]
    bodies = dict(record.bodies)
    bodies.pop(level, None)
    agents = dict(state.agents)
    agents[agent_id] = replace(record, bodies=bodies)

    level_state = state.per_level[level]
    properties = dict(level_state.properties)
    properties.pop(body_key(agent_id), None)
    new_level = replace(level_state, properties=properties)
    return replace(_replace_level(state, level, new_level), agents=agents)
