"""Two-phase step driver.

Phase 1 (produce): every agent behavior, environment natural, and registered
detector is evaluated against the same frozen snapshot; outputs are merged
with the carried-over influence sets and partitioned by target level.

Phase 2 (react): each level independently filters its produced set through
apply_constraints and invokes its reaction rule.  Reactions see only their own
level's property map and filtered influences; influences they persist are
routed by target level after all reactions ran, so the result is invariant
under level evaluation order.

Everything is deterministic given (model, state, seed): per-producer RNG
streams are keyed by (seed, producer, tick), so agent iteration order cannot
leak into results.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable

from .errors import (
    IllegalInfluenceTarget,
    KindNotProducible,
    MlsimError,
    ModelValidationError,
    ReactionFault,
)
from .hierarchy import (
    ConstraintKindDecl,
    EmergenceKindDecl,
    HierarchicalCoupling,
    apply_constraints,
)
from .levels import LevelId, ValidatedLevelGraph
from .state import (
    CONSTRAINT,
    EMERGENCE,
    ORDINARY,
    REACTION_PRODUCER_PREFIX,
    AgentRecord,
    Body,
    EnvironmentRecord,
    Influence,
    LevelState,
    Percept,
    SystemState,
    body_key,
    member_levels,
    merge_influences,
)


def derived_rng(seed: int, *key) -> random.Random:
    """Stable RNG stream keyed by (seed, *key); independent of iteration order."""
    digest = hashlib.sha256(repr((seed,) + key).encode()).hexdigest()
    return random.Random(int(digest[:16], 16))


class StepContext:
    """Handed to each producer for one step: id factory and private RNG."""

    def __init__(self, tick: int, producer: str, rng: random.Random):
        self.tick = tick
        self.producer = producer
        self.rng = rng
        self._seq = 0

    def make(self, kind, target_level, klass=ORDINARY, **payload) -> Influence:
        uid = f"{self.producer}@{self.tick}#{self._seq}"
        self._seq += 1
        return Influence(
            id=uid,
            kind=kind,
            target_level=target_level,
            producer=self.producer,
            payload=tuple(sorted(payload.items())),
            klass=klass,
        )


class BehaviorRule:
    """Three-stage behavior: perceive, memorize, decide — invoked in order,
    exactly once per agent per step."""

    def perceive(self, percept: Percept, me: AgentRecord):
        return percept

    def memorize(self, perception, internal_state, ctx: StepContext):
        return internal_state

    def decide(self, internal_state, ctx: StepContext) -> Iterable[Influence]:
        return ()


@dataclass(frozen=True)
class DetectorRule:
    """A distinguished micro-level natural rule permitted to emit emergence
    influences toward a macro level."""

    name: str
    level: LevelId
    rule: Callable  # (percept, ctx) -> iterable[Influence]


@dataclass
class ReactionResult:
    sigma: dict
    persisted: tuple = ()
    spawn: tuple = ()  # AgentRecord with bodies only at the reacting level
    remove: tuple = ()  # agent ids whose bodies live only at the reacting level
    events: tuple = ()  # (name, payload-dict) pairs for observers/trace


# Reaction rule signature: (level, sigma: dict, influences: frozenset, ctx) -> ReactionResult
ReactionRule = Callable[[LevelId, dict, frozenset, StepContext], ReactionResult]


def identity_reaction(level, sigma, influences, ctx) -> ReactionResult:
    """Default reaction: keep properties, persist nothing."""
    return ReactionResult(sigma=sigma)


@dataclass
class Model:
    graph: ValidatedLevelGraph
    behaviors: dict = field(default_factory=dict)  # AgentId -> BehaviorRule
    dynamic_behaviors: dict = field(default_factory=dict)  # agent kind -> BehaviorRule
    environments: tuple = ()
    detectors: dict = field(default_factory=dict)  # name -> DetectorRule
    reactions: dict = field(default_factory=dict)  # LevelId -> ReactionRule
    producible_kinds: dict = field(default_factory=dict)  # LevelId -> frozenset[str]
    couplings: tuple = ()
    emergences: tuple = ()  # EmergenceKindDecl
    constraints: tuple = ()  # ConstraintKindDecl

    def behavior_for(self, record: AgentRecord) -> BehaviorRule | None:
        rule = self.behaviors.get(record.id)
        if rule is None:
            rule = self.dynamic_behaviors.get(record.kind)
        return rule

    def constraint_decl(self, kind: str) -> ConstraintKindDecl | None:
        return next((d for d in self.constraints if d.kind == kind), None)

    def emergence_decl(self, kind: str) -> EmergenceKindDecl | None:
        return next((d for d in self.emergences if d.kind == kind), None)


def validate_model(model: Model) -> list[str]:
    """Static legality of a model.  Returns all problems found (empty = valid)."""
    problems = []
    levels = model.graph.levels
    for level in levels:
        if level not in model.reactions:
            problems.append(f"level {level!r} has no reaction rule")
    edges = model.graph.spec.influence_edges
    for coupling in model.couplings:
        for endpoint in (coupling.micro, coupling.macro):
            if endpoint not in levels:
                problems.append(f"coupling references unknown level {endpoint!r}")
        if coupling.micro in levels and coupling.macro in levels:
            required = {(coupling.micro, coupling.macro), (coupling.macro, coupling.micro)}
            for edge in sorted(required - set(edges)):
                problems.append(
                    f"coupling {coupling.micro}/{coupling.macro} requires influence edge {edge}"
                )
    kinds = model.producible_kinds
    constraint_kinds = {d.kind for d in model.constraints}
    for decl in model.emergences:
        coupling = next((c for c in model.couplings if c.macro == decl.macro_level), None)
        if coupling is None:
            problems.append(f"emergence {decl.kind!r}: no coupling with macro {decl.macro_level!r}")
        if decl.kind not in kinds.get(decl.macro_level, ()):
            problems.append(f"emergence {decl.kind!r} not in producible kinds of {decl.macro_level!r}")
        if coupling is not None and decl.kind in kinds.get(coupling.micro, ()):
            problems.append(
                f"emergence {decl.kind!r} must not be producible at micro level {coupling.micro!r}"
            )
        detector = model.detectors.get(decl.detector)
        if detector is None:
            problems.append(
                f"emergence {decl.kind!r}: detector {decl.detector!r} is not a registered detector"
            )
        elif coupling is not None and detector.level != coupling.micro:
            problems.append(
                f"emergence {decl.kind!r}: detector {decl.detector!r} sits at "
                f"{detector.level!r}, expected micro level {coupling.micro!r}"
            )
    for decl in model.constraints:
        coupling = next((c for c in model.couplings if c.micro == decl.micro_level), None)
        if coupling is None:
            problems.append(f"constraint {decl.kind!r}: no coupling with micro {decl.micro_level!r}")
        if decl.kind not in kinds.get(decl.micro_level, ()):
            problems.append(f"constraint {decl.kind!r} not in producible kinds of {decl.micro_level!r}")
        if decl.inhibits not in kinds.get(decl.micro_level, ()):
            problems.append(
                f"constraint {decl.kind!r}: inhibited kind {decl.inhibits!r} "
                f"not producible at {decl.micro_level!r}"
            )
        if decl.inhibits in constraint_kinds:
            problems.append(
                f"constraint over constraint: {decl.kind!r} inhibits constraint kind {decl.inhibits!r}"
            )
        if coupling is not None:
            macro_kinds = kinds.get(coupling.macro, ())
            if decl.kind in macro_kinds and decl.inhibits in macro_kinds:
                problems.append(
                    f"constraint pair {{{decl.inhibits!r}, {decl.kind!r}}} must not be a "
                    f"subset of the macro level {coupling.macro!r} kinds"
                )
    return problems


@dataclass
class ProducedStep:
    per_level: dict  # LevelId -> frozenset[Influence]
    new_internal: dict  # AgentId -> internal state at t+dt
    trace: tuple = ()


def _check_influence(model: Model, inf: Influence, allowed_targets, producer_desc,
                     producer_levels, is_detector=False, detector_name=None):
    if inf.target_level not in allowed_targets:
        raise IllegalInfluenceTarget(
            f"{producer_desc} produced {inf.kind!r} into {inf.target_level!r}, "
            f"allowed targets are {sorted(allowed_targets)}"
        )
    if inf.kind not in model.producible_kinds.get(inf.target_level, ()):
        raise KindNotProducible(
            f"{producer_desc}: kind {inf.kind!r} is not producible at {inf.target_level!r}"
        )
    if inf.klass == EMERGENCE:
        decl = model.emergence_decl(inf.kind)
        if decl is None or not is_detector or detector_name != decl.detector:
            allowed = decl.detector if decl is not None else "<undeclared>"
            raise IllegalInfluenceTarget(
                f"{producer_desc} produced emergence {inf.kind!r}; only detector "
                f"{allowed!r} may produce it"
            )
    if inf.klass == CONSTRAINT:
        decl = model.constraint_decl(inf.kind)
        if decl is None:
            raise IllegalInfluenceTarget(
                f"{producer_desc} produced undeclared constraint kind {inf.kind!r}"
            )
        if decl.micro_level in producer_levels:
            raise IllegalInfluenceTarget(
                f"{producer_desc} belongs to micro level {decl.micro_level!r} and "
                f"cannot produce constraint {inf.kind!r}"
            )
        if inf.payload_get("selector") is None:
            raise IllegalInfluenceTarget(
                f"constraint {inf.id} from {producer_desc} carries no selector"
            )


def produce_influences(model: Model, state: SystemState, seed: int = 0) -> ProducedStep:
    """Phase 1: evaluate all producers against the frozen snapshot."""
    graph = model.graph
    produced_sets: list[Iterable[Influence]] = [
        level_state.influences for level_state in state.per_level.values()
    ]
    new_internal: dict[str, Any] = {}
    trace = []

    def run_producer(desc, rule_levels, emit):
        view_levels = set()
        target_levels = set()
        for level in rule_levels:
            view_levels |= graph.out_perception(level)
            target_levels |= graph.out_influence(level)
        percept = Percept(
            {l: state.per_level[l] for l in view_levels}, requester=desc
        )
        return percept, target_levels

    for agent_id in sorted(state.agents):
        record = state.agents[agent_id]
        levels = member_levels(state, agent_id)
        if not levels:
            continue
        rule = model.behavior_for(record)
        if rule is None:
            continue
        percept, targets = run_producer(agent_id, levels, None)
        ctx = StepContext(state.time, agent_id, derived_rng(seed, agent_id, state.time))
        perception = rule.perceive(percept, record)
        internal = rule.memorize(perception, record.internal_state, ctx)
        new_internal[agent_id] = internal
        out = list(rule.decide(internal, ctx))
        for inf in out:
            _check_influence(model, inf, targets, f"agent {agent_id!r}", levels)
        produced_sets.append(out)

    for env in model.environments:
        if env.natural is None:
            continue
        percept, targets = run_producer(env.id, env.member_levels, None)
        ctx = StepContext(state.time, env.id, derived_rng(seed, env.id, state.time))
        out = list(env.natural(percept, ctx))
        for inf in out:
            _check_influence(model, inf, targets, f"environment {env.id!r}", env.member_levels)
        produced_sets.append(out)

    for name in sorted(model.detectors):
        detector = model.detectors[name]
        percept, targets = run_producer(name, {detector.level}, None)
        ctx = StepContext(state.time, name, derived_rng(seed, name, state.time))
        out = list(detector.rule(percept, ctx))
        for inf in out:
            _check_influence(
                model, inf, targets, f"detector {name!r}", {detector.level},
                is_detector=True, detector_name=name,
            )
        produced_sets.append(out)

    merged = merge_influences(produced_sets)
    per_level: dict[str, set] = {level: set() for level in state.per_level}
    for inf in merged:
        per_level.setdefault(inf.target_level, set()).add(inf)
    per_level_frozen = {level: frozenset(group) for level, group in per_level.items()}

    for level in sorted(per_level_frozen):
        for inf in sorted(per_level_frozen[level], key=lambda i: i.id):
            trace.append(
                {
                    "tick": state.time,
                    "level": level,
                    "event": "influence",
                    "payload": {
                        "id": inf.id,
                        "kind": inf.kind,
                        "class": inf.klass,
                        "producer": inf.producer,
                    },
                }
            )
    return ProducedStep(per_level=per_level_frozen, new_internal=new_internal, trace=tuple(trace))


@dataclass
class StepInfo:
    produced: dict  # LevelId -> frozenset (pre-filter)
    inhibitions: dict  # LevelId -> tuple[InhibitionRecord]
    events: tuple  # (level, name, payload) triples
    trace: tuple  # trace rows


def react(model: Model, state: SystemState, produced: ProducedStep, seed: int = 0):
    """Phase 2: per-level constraint filtering + reaction, then merge."""
    results = {}
    inhibitions = {}
    for level in sorted(state.per_level):
        influences = produced.per_level.get(level, frozenset())
        filtered, log = apply_constraints(influences)
        inhibitions[level] = log
        sigma = dict(state.per_level[level].properties)
        ctx = StepContext(
            state.time,
            REACTION_PRODUCER_PREFIX + level,
            derived_rng(seed, "reaction", level, state.time),
        )
        rule = model.reactions[level]
        try:
            result = rule(level, sigma, filtered, ctx)
        except MlsimError:
            raise
        except Exception as exc:  # noqa: BLE001 - surfaced with level id
            raise ReactionFault(f"reaction of level {level!r} failed: {exc}") from exc
        if not isinstance(result, ReactionResult):
            raise ReactionFault(f"reaction of level {level!r} returned {type(result).__name__}")
        results[level] = result

    # Validate and collect persisted influences.
    persisted: list[Influence] = []
    for level, result in results.items():
        targets = model.graph.out_influence(level)
        for inf in result.persisted:
            _check_influence(
                model, inf, targets, f"reaction of level {level!r}", {level}
            )
            if inf.klass == EMERGENCE:
                raise IllegalInfluenceTarget(
                    f"reaction of level {level!r} persisted emergence {inf.kind!r}"
                )
            persisted.append(inf)
    routed: dict[str, set] = {level: set() for level in state.per_level}
    for inf in merge_influences([persisted]):
        routed[inf.target_level].add(inf)

    # Agent records: internal-state updates from memorization.
    agents = dict(state.agents)
    for agent_id, internal in produced.new_internal.items():
        if agent_id in agents:
            agents[agent_id] = replace(agents[agent_id], internal_state=internal)

    # Spawns and removals, restricted to the reacting level.
    sigmas = {level: results[level].sigma for level in results}
    events = []
    for level in sorted(results):
        result = results[level]
        for record in result.spawn:
            if record.id in agents:
                raise ReactionFault(
                    f"reaction of level {level!r} spawned duplicate agent {record.id!r}"
                )
            foreign = set(record.bodies) - {level}
            if foreign:
                raise ReactionFault(
                    f"reaction of level {level!r} spawned agent {record.id!r} "
                    f"with bodies at {sorted(foreign)}"
                )
            agents[record.id] = record
            if level in record.bodies:
                sigmas[level][body_key(record.id)] = record.bodies[level]
            events.append((level, "spawn", {"agent": record.id, "kind": record.kind}))
        for agent_id in result.remove:
            record = agents.get(agent_id)
            if record is None:
                raise ReactionFault(
                    f"reaction of level {level!r} removed unknown agent {agent_id!r}"
                )
            foreign = set(record.bodies) - {level}
            if foreign:
                raise ReactionFault(
                    f"reaction of level {level!r} removed agent {agent_id!r} "
                    f"with bodies at {sorted(foreign)}"
                )
            del agents[agent_id]
            sigmas[level].pop(body_key(agent_id), None)
            events.append((level, "dissolve", {"agent": agent_id}))
        for name, payload in result.events:
            events.append((level, name, payload))

    # Sync body registry: the level property map is authoritative.
    for level, sigma in sigmas.items():
        registered = {
            key[len("body:"):]: value
            for key, value in sigma.items()
            if key.startswith("body:")
        }
        for agent_id, body in registered.items():
            record = agents.get(agent_id)
            if record is None:
                continue
            if record.bodies.get(level) != body:
                bodies = dict(record.bodies)
                bodies[level] = body
                agents[agent_id] = replace(record, bodies=bodies)
        for agent_id, record in list(agents.items()):
            if level in record.bodies and agent_id not in registered:
                bodies = dict(record.bodies)
                del bodies[level]
                agents[agent_id] = replace(record, bodies=bodies)

    per_level = {
        level: LevelState(level, sigmas[level], frozenset(routed[level]))
        for level in state.per_level
    }
    next_state = SystemState(time=state.time + 1, per_level=per_level, agents=agents)

    trace = list(produced.trace)
    for level in sorted(inhibitions):
        for record in inhibitions[level]:
            trace.append(
                {
                    "tick": state.time,
                    "level": level,
                    "event": "inhibition",
                    "payload": {
                        "constraint": record.constraint_id,
                        "inhibited": list(record.inhibited_ids),
                    },
                }
            )
    for level, name, payload in events:
        trace.append({"tick": state.time, "level": level, "event": name, "payload": payload})

    info = StepInfo(
        produced=produced.per_level,
        inhibitions=inhibitions,
        events=tuple(events),
        trace=tuple(trace),
    )
    return next_state, info


def step(model: Model, state: SystemState, seed: int = 0):
    produced = produce_influences(model, state, seed)
    return react(model, state, produced, seed)


@dataclass
class RunResult:
    final_state: SystemState
    records: list  # one metrics dict per executed tick
    stop_reason: str
    diagnostics: tuple = ()  # (tick, name, payload) triples
    trace: tuple = ()


DIAGNOSTIC_EVENTS = {"no-escape-path"}


def run(
    model: Model,
    state: SystemState,
    ticks: int,
    seed: int = 0,
    observers: tuple = (),
    metrics: Callable | None = None,
    termination: Callable | None = None,
    collect_trace: bool = False,
) -> RunResult:
    """Iterate the two-phase step, recording per-tick metrics.

    Observers receive (tick, snapshot-after-step, StepInfo) and must not
    mutate anything.  A termination predicate over the snapshot stops the run
    early with a recorded reason.
    """
    if ticks < 1:
        raise ValueError("ticks must be >= 1")
    problems = validate_model(model)
    if problems:
        raise ModelValidationError("; ".join(problems))

    records = []
    diagnostics = []
    trace: list = []
    stop_reason = "tick-budget"
    for _ in range(ticks):
        tick = state.time
        state, info = step(model, state, seed)
        for level, name, payload in info.events:
            if name in DIAGNOSTIC_EVENTS:
                diagnostics.append((tick, name, payload))
        if collect_trace:
            trace.extend(info.trace)
        for observer in observers:
            observer(tick, state, info)
        if metrics is not None:
            row = metrics(tick, state, info)
            if row is not None:
                records.append(row)
        if termination is not None and termination(state):
            stop_reason = f"termination:{getattr(termination, '__name__', 'predicate')}"
            break
    return RunResult(
        final_state=state,
        records=records,
        stop_reason=stop_reason,
        diagnostics=tuple(diagnostics),
        trace=tuple(trace),
    )
