"""Gradient-field AGV fleet reference model.

Three decision levels:

* ``floor``   - grid world with AGV and shop bodies; moves resolved under
  cell capacity 1.
* ``tasks``   - transport-task bookkeeping; its reaction is a greedy
  nearest-vehicle assignment algorithm.
* ``control`` - deadlock governance; macro "solver" agents spawn from
  deadlock emergences and constrain trapped AGVs until the blockage is
  unwound.

AGVs route by ascending a net potential: linear-decay attraction from the
shop they currently serve (all emitting shops when idle) minus linear-decay
repulsion from other active AGVs.  Narrow corridors therefore exhibit the
classic standoff/local-minimum pathology, which the detector reifies as a
deadlock emergence.

Tie-breaking is lexicographic/min-id everywhere, so a run is fully
deterministic; an optional seeded jitter on equal-potential moves can be
enabled per scenario.
"""

from __future__ import annotations

from dataclasses import dataclass

import networkx as nx

from ..engine import (
    BehaviorRule,
    DetectorRule,
    Model,
    ReactionResult,
)
from ..hierarchy import (
    ConstraintKindDecl,
    EmergenceKindDecl,
    HierarchicalCoupling,
    InfluenceSelector,
    merge_trapped_groups,
)
from ..levels import LevelGraphSpec, validate
from ..state import (
    CONSTRAINT,
    EMERGENCE,
    AgentRecord,
    Body,
    EnvironmentRecord,
    LevelState,
    SystemState,
    body_key,
)
from .grid import GridMap, bfs_distances, bfs_path

FLOOR = "floor"
TASKS = "tasks"
CONTROL = "control"

K_MOVE = "move"
K_FORCED = "forced-move"
K_REPULSE = "emit-repulsion"
K_ASSIGN = "assign-task"
K_SERVE = "can-serve"
K_NEED = "need-transport"
K_PICKED = "task-picked"
K_DELIVERED = "task-delivered"
K_INH_MOVE = "inhibit-move"
K_INH_REP = "inhibit-repulsion"
K_DEADLOCK = "deadlock"
K_RESOLVED = "deadlock-resolved"
K_UNRESOLVABLE = "deadlock-unresolvable"

PRODUCIBLE_KINDS = {
    FLOOR: frozenset({K_MOVE, K_FORCED, K_REPULSE, K_ASSIGN, K_INH_MOVE, K_INH_REP}),
    TASKS: frozenset({K_SERVE, K_NEED, K_PICKED, K_DELIVERED}),
    CONTROL: frozenset({K_DEADLOCK, K_RESOLVED, K_UNRESOLVABLE}),
}

TASK_STATES = ("pending", "assigned", "picked", "delivered")


@dataclass(frozen=True)
class FmsParams:
    attract: int = 16  # shop attraction amplitude
    repulse: int = 4  # AGV repulsion amplitude
    window: int = 6  # no-progress detection window (ticks)
    clearance: int = 3  # pairwise distance at which a solved group disperses
    jitter: bool = False  # seeded random choice among equal-potential moves


# --- field sensing -----------------------------------------------------------

def _potential(grid: GridMap, cells, attract_cells, attract_amp, repulse_cells, repulse_amp):
    values = {c: 0.0 for c in cells}
    for source, amplitude, sign in (
        [(c, attract_amp, 1.0) for c in attract_cells]
        + [(c, repulse_amp, -1.0) for c in repulse_cells]
    ):
        dist = bfs_distances(grid, source)
        for c in cells:
            d = dist.get(c)
            if d is not None and amplitude - d > 0:
                values[c] += sign * (amplitude - d)
    return values


def desired_move(grid, params, agent_id, body, agv_bodies, emitting_cells, rng=None):
    """The cell an AGV's gradient rule wants next (may equal its own cell).

    Candidates are the wall-free 4-neighbors; occupancy is *not* considered
    here - capacity conflicts are the floor reaction's business.  Moves only
    happen toward a strictly larger net potential.
    """
    cell = body.get("cell")
    if body.get("assigned") is not None:
        target = body.get("dest") if body.get("carrying") else body.get("source")
        attract = [target] if target is not None else []
    else:
        attract = sorted(emitting_cells)
    repulse = sorted(
        b.get("cell")
        for other, b in agv_bodies.items()
        if other != agent_id and b.get("repulsion_on")
    )
    candidates = grid.neighbors4(cell)
    values = _potential(
        grid, candidates + [cell], attract, params.attract, repulse, params.repulse
    )
    here = values[cell]
    best = max((values[c] for c in candidates), default=here)
    if best <= here:
        return cell
    ties = [c for c in candidates if values[c] == best]
    if params.jitter and rng is not None and len(ties) > 1:
        return rng.choice(sorted(ties))
    return min(ties)


def _floor_agvs(level_state: LevelState):
    return {
        aid: b for aid, b in level_state.bodies().items() if b.get("type") == "agv"
    }


def _emitting_cells(tasks_state: LevelState):
    return [
        b.get("cell")
        for b in tasks_state.bodies().values()
        if b.get("type") == "shop" and b.get("emitting")
    ]


# --- behaviors ---------------------------------------------------------------

class AgvBehavior(BehaviorRule):
    """Sense the net field, head for the strictly best neighbor, advertise
    capability when idle, claim right-of-way (repulsion) when on a task."""

    def __init__(self, grid: GridMap, params: FmsParams):
        self.grid = grid
        self.params = params

    def perceive(self, percept, me):
        floor = percept[FLOOR]
        tasks = percept[TASKS]
        return {
            "me": me.id,
            "body": floor.bodies().get(me.id),
            "agvs": _floor_agvs(floor),
            "emitting": _emitting_cells(tasks),
        }

    def memorize(self, perception, internal_state, ctx):
        return {"view": perception}

    def decide(self, internal_state, ctx):
        view = internal_state["view"]
        body = view["body"]
        if body is None:
            return []
        me = view["me"]
        out = []
        if body.get("assigned") is None:
            out.append(ctx.make(K_SERVE, TASKS, agent=me, cell=body.get("cell")))
        else:
            out.append(ctx.make(K_REPULSE, FLOOR, agent=me))
        to = desired_move(
            self.grid, self.params, me, body, view["agvs"], view["emitting"], ctx.rng
        )
        out.append(ctx.make(K_MOVE, FLOOR, agent=me, frm=body.get("cell"), to=to))
        return out


class ShopBehavior(BehaviorRule):
    """Request transport for every still-unassigned task waiting at this shop."""

    def perceive(self, percept, me):
        tasks_level = percept[TASKS]
        return {
            "me": me.id,
            "queue": tasks_level.bodies().get(me.id, Body(TASKS)).get("pending", ()),
            "tasks": tasks_level.properties.get("tasks", {}),
        }

    def memorize(self, perception, internal_state, ctx):
        return {"view": perception}

    def decide(self, internal_state, ctx):
        view = internal_state["view"]
        out = []
        for tid in view["queue"]:
            task = view["tasks"].get(tid)
            if task is None or task["state"] != "pending":
                continue
            out.append(
                ctx.make(
                    K_NEED,
                    TASKS,
                    task=tid,
                    source_cell=tuple(task["source_cell"]),
                    dest_cell=tuple(task["dest_cell"]),
                    order=task["order"],
                )
            )
        return out


class SolverBehavior(BehaviorRule):
    """Macro deadlock-solving agent.

    Phases: plan (pick a member and a parking cell off the other members'
    ideal paths), parking (force-move the parker one step per tick, everyone
    else frozen), clearing (only the parker held; others flow past under
    normal gradient routing), resolved (signal the control reaction to
    dissolve this agent).  Planning failure means the trapped set is fully
    enclosed: reported upward as unresolvable, the agent persists and keeps
    retrying in case a blocker moves away.
    """

    def __init__(self, grid: GridMap, params: FmsParams):
        self.grid = grid
        self.params = params

    def perceive(self, percept, me):
        return {
            "me": me.id,
            "trapped": tuple(me.bodies[CONTROL].get("trapped", ())),
            "agvs": _floor_agvs(percept[FLOOR]),
        }

    def _goal(self, body):
        if body.get("assigned") is None:
            return None
        return body.get("dest") if body.get("carrying") else body.get("source")

    def _plan(self, members, agvs):
        ideal: dict[str, set] = {}
        for m in members:
            body = agvs.get(m)
            if body is None:
                ideal[m] = set()
                continue
            goal = self._goal(body)
            path = bfs_path(self.grid, body.get("cell"), goal) if goal else None
            ideal[m] = set(path) if path else {body.get("cell")}
        occupied = {b.get("cell") for b in agvs.values()}
        best = None
        for m in members:
            body = agvs.get(m)
            if body is None:
                continue
            others_paths = set().union(*(ideal[o] for o in members if o != m)) if len(members) > 1 else set()
            obstacles = frozenset(occupied - {body.get("cell")})
            for target in self.grid.free_cells():
                if target in occupied or target in others_paths:
                    continue
                path = bfs_path(self.grid, body.get("cell"), target, obstacles)
                if path is None or len(path) < 2:
                    continue
                key = (len(path), m, target)
                if best is None or key < best[0]:
                    best = (key, m, target)
        if best is None:
            return None
        _, parker, target = best
        return parker, target

    def memorize(self, perception, internal_state, ctx):
        state = dict(internal_state or {})
        state["view"] = perception
        members = sorted(perception["trapped"])
        agvs = perception["agvs"]
        phase = state.get("phase", "plan")

        if phase in ("plan", "stuck"):
            plan = self._plan(members, agvs)
            if plan is None:
                state["phase"] = "stuck"
            else:
                state["phase"] = "parking"
                state["parker"], state["target"] = plan
        if state.get("phase") == "parking":
            parker_body = agvs.get(state["parker"])
            if parker_body is not None and parker_body.get("cell") == state["target"]:
                state["phase"] = "clearing"
        if state.get("phase") == "clearing":
            cells = [agvs[m].get("cell") for m in members if m in agvs]
            dispersed = True
            for i, a in enumerate(cells):
                dist = bfs_distances(self.grid, a)
                for b in cells[i + 1:]:
                    if dist.get(b, self.params.clearance) < self.params.clearance:
                        dispersed = False
            if dispersed:
                state["phase"] = "resolved"
        return state

    def decide(self, internal_state, ctx):
        state = internal_state
        view = state["view"]
        me = view["me"]
        members = sorted(view["trapped"])
        agvs = view["agvs"]
        phase = state.get("phase", "plan")
        out = []

        if phase == "clearing":
            frozen = [state["parker"]] if state.get("parker") in members else []
        else:
            frozen = members
        for m in frozen:
            out.append(
                ctx.make(
                    K_INH_MOVE,
                    FLOOR,
                    klass=CONSTRAINT,
                    selector=InfluenceSelector(match_kind=K_MOVE, match_producer=m),
                    agent=m,
                )
            )
        for m in members:
            out.append(
                ctx.make(
                    K_INH_REP,
                    FLOOR,
                    klass=CONSTRAINT,
                    selector=InfluenceSelector(match_kind=K_REPULSE, match_producer=m),
                    agent=m,
                )
            )

        if phase == "parking":
            parker = state["parker"]
            body = agvs.get(parker)
            if body is not None and body.get("cell") != state["target"]:
                obstacles = frozenset(
                    b.get("cell") for a, b in agvs.items() if a != parker
                )
                path = bfs_path(self.grid, body.get("cell"), state["target"], obstacles)
                if path is not None and len(path) >= 2:
                    out.append(
                        ctx.make(
                            K_FORCED, FLOOR, agent=parker,
                            frm=body.get("cell"), to=path[1],
                        )
                    )
        elif phase == "resolved":
            out.append(ctx.make(K_RESOLVED, CONTROL, solver=me, trapped=tuple(members)))
        elif phase == "stuck":
            out.append(
                ctx.make(K_UNRESOLVABLE, CONTROL, solver=me, trapped=tuple(members))
            )
        return out


# --- detector ----------------------------------------------------------------

def make_deadlock_detector(grid: GridMap, params: FmsParams) -> DetectorRule:
    """Wait-for-cycle and no-progress detector over the floor snapshot.

    Only assigned AGVs count, and AGVs already governed by a solver are
    skipped so a standing deadlock is not re-reported while being solved.
    """

    def rule(percept, ctx):
        floor = percept[FLOOR]
        control = percept[CONTROL]
        agvs = _floor_agvs(floor)
        emitting = _emitting_cells(percept[TASKS])
        governed: set[str] = set()
        for b in control.bodies().values():
            if b.get("type") == "solver":
                governed.update(b.get("trapped", ()))

        occupant = {b.get("cell"): aid for aid, b in agvs.items()}
        candidates = {}
        for aid in sorted(agvs):
            body = agvs[aid]
            if body.get("assigned") is None or aid in governed:
                continue
            candidates[aid] = desired_move(grid, params, aid, body, agvs, emitting)

        wait = nx.DiGraph()
        wait.add_nodes_from(candidates)
        for aid, to in candidates.items():
            if to == agvs[aid].get("cell"):
                continue
            blocker = occupant.get(to)
            if blocker is not None and blocker != aid:
                wait.add_edge(aid, blocker)

        in_cycle = set()
        for component in nx.strongly_connected_components(wait):
            if len(component) > 1:
                in_cycle |= component
        in_cycle &= set(candidates)

        stalled = set()
        for aid in candidates:
            window = agvs[aid].get("window", ())
            if len(window) >= params.window and len(set(window[-params.window:])) == 1:
                stalled.add(aid)

        flagged = sorted(in_cycle | stalled)
        if not flagged:
            return []

        # Group flagged AGVs: wait-for adjacency or field-range proximity.
        radius = max(2, params.repulse)
        link = nx.Graph()
        link.add_nodes_from(flagged)
        for i, a in enumerate(flagged):
            dist = bfs_distances(grid, agvs[a].get("cell"))
            for b in flagged[i + 1:]:
                near = dist.get(agvs[b].get("cell"), radius + 1) <= radius
                waiting = wait.has_edge(a, b) or wait.has_edge(b, a)
                if near or waiting:
                    link.add_edge(a, b)

        out = []
        for group in sorted(nx.connected_components(link), key=lambda g: sorted(g)):
            out.append(
                ctx.make(
                    K_DEADLOCK,
                    CONTROL,
                    klass=EMERGENCE,
                    trapped=tuple(sorted(group)),
                )
            )
        return out

    return DetectorRule(name="deadlock-detector", level=FLOOR, rule=rule)


# --- reactions ---------------------------------------------------------------

def resolve_moves(current: dict, desired: dict) -> dict:
    """Simultaneous moves under cell capacity 1.

    Fixed point of three rules: a move into a staying agent's cell is
    cancelled; swap pairs both stay; several movers onto one cell keep only
    the lowest agent id.  Rotations of three or more are allowed.
    """
    movers = {a for a in current if desired[a] != current[a]}
    changed = True
    while changed:
        changed = False
        stay_cells = {current[a] for a in current if a not in movers}
        for a in sorted(movers):
            if desired[a] in stay_cells:
                movers.discard(a)
                changed = True
        for a in sorted(movers):
            for b in sorted(movers):
                if a < b and desired[a] == current[b] and desired[b] == current[a]:
                    movers.discard(a)
                    movers.discard(b)
                    changed = True
        by_target: dict = {}
        for a in sorted(movers):
            by_target.setdefault(desired[a], []).append(a)
        for group in by_target.values():
            for a in group[1:]:
                movers.discard(a)
                changed = True
    return {a: (desired[a] if a in movers else current[a]) for a in current}


def make_floor_reaction(grid: GridMap, params: FmsParams):
    def floor_reaction(level, sigma, influences, ctx):
        agvs = {
            aid: b
            for aid, b in (
                (key[len("body:"):], value)
                for key, value in sigma.items()
                if key.startswith("body:")
            )
            if b.get("type") == "agv"
        }
        persisted = []
        events = []

        for inf in sorted(influences, key=lambda i: i.id):
            if inf.kind != K_ASSIGN:
                continue
            aid = inf.payload_get("agent")
            body = agvs.get(aid)
            if body is not None and body.get("assigned") is None:
                agvs[aid] = body.with_attrs(
                    assigned=inf.payload_get("task"),
                    source=tuple(inf.payload_get("source_cell")),
                    dest=tuple(inf.payload_get("dest_cell")),
                )

        current = {aid: b.get("cell") for aid, b in agvs.items()}
        desired = dict(current)
        for inf in sorted(influences, key=lambda i: i.id):
            if inf.kind == K_MOVE and inf.payload_get("agent") in agvs:
                to = tuple(inf.payload_get("to"))
                if grid.is_free(to):
                    desired[inf.payload_get("agent")] = to
        for inf in sorted(influences, key=lambda i: i.id):
            if inf.kind == K_FORCED and inf.payload_get("agent") in agvs:
                to = tuple(inf.payload_get("to"))
                if grid.is_free(to):
                    desired[inf.payload_get("agent")] = to

        final = resolve_moves(current, desired)

        repulsing = {
            inf.payload_get("agent") for inf in influences if inf.kind == K_REPULSE
        }
        for aid in sorted(agvs):
            body = agvs[aid]
            cell = final[aid]
            window = (body.get("window", ()) + (cell,))[-params.window:]
            body = body.with_attrs(
                cell=cell, window=window, repulsion_on=aid in repulsing
            )
            if (
                body.get("assigned") is not None
                and body.get("carrying") is None
                and cell == body.get("source")
            ):
                body = body.with_attrs(carrying=body.get("assigned"))
                persisted.append(
                    ctx.make(K_PICKED, TASKS, task=body.get("assigned"), agent=aid)
                )
                events.append(("task-picked", {"task": body.get("assigned"), "agent": aid}))
            elif body.get("carrying") is not None and cell == body.get("dest"):
                tid = body.get("carrying")
                body = body.with_attrs(carrying=None, assigned=None, source=None, dest=None)
                persisted.append(ctx.make(K_DELIVERED, TASKS, task=tid, agent=aid))
                events.append(("task-delivered", {"task": tid, "agent": aid}))
            sigma[body_key(aid)] = body
        return ReactionResult(sigma, tuple(persisted), events=tuple(events))

    return floor_reaction


def make_tasks_reaction(grid: GridMap):
    def tasks_reaction(level, sigma, influences, ctx):
        tasks = {tid: dict(t) for tid, t in sigma.get("tasks", {}).items()}
        persisted = []
        events = []

        for inf in sorted(influences, key=lambda i: i.id):
            tid = inf.payload_get("task")
            task = tasks.get(tid)
            if task is None:
                continue
            if inf.kind == K_PICKED and task["state"] == "assigned":
                task["state"] = "picked"
            elif inf.kind == K_DELIVERED and task["state"] == "picked":
                task["state"] = "delivered"
                events.append(("delivered", {"task": tid}))

        offers = {}
        for inf in sorted(influences, key=lambda i: i.id):
            if inf.kind == K_SERVE:
                offers[inf.payload_get("agent")] = tuple(inf.payload_get("cell"))
        busy = {
            t["assigned_to"]
            for t in tasks.values()
            if t["state"] in ("assigned", "picked") and t.get("assigned_to")
        }
        available = {a: c for a, c in offers.items() if a not in busy}

        demands = []
        seen = set()
        for inf in sorted(
            (i for i in influences if i.kind == K_NEED),
            key=lambda i: (i.payload_get("order"), i.payload_get("task")),
        ):
            tid = inf.payload_get("task")
            if tid in seen:
                continue
            seen.add(tid)
            task = tasks.get(tid)
            if task is not None and task["state"] == "pending":
                demands.append(tid)

        assigned_any = False
        for tid in demands:
            if not available:
                break
            task = tasks[tid]
            dist = bfs_distances(grid, tuple(task["source_cell"]))
            reachable = {a: dist.get(c) for a, c in available.items() if dist.get(c) is not None}
            if not reachable:
                continue
            winner = min(reachable, key=lambda a: (reachable[a], a))
            task["state"] = "assigned"
            task["assigned_to"] = winner
            del available[winner]
            assigned_any = True
            persisted.append(
                ctx.make(
                    K_ASSIGN,
                    FLOOR,
                    agent=winner,
                    task=tid,
                    source_cell=tuple(task["source_cell"]),
                    dest_cell=tuple(task["dest_cell"]),
                )
            )
            events.append(("assigned", {"task": tid, "agent": winner}))

        if assigned_any:
            # Passed-over candidates hold position this step instead of
            # chasing a task that was just given to someone else.
            for agent in sorted(available):
                persisted.append(
                    ctx.make(
                        K_INH_MOVE,
                        FLOOR,
                        klass=CONSTRAINT,
                        selector=InfluenceSelector(match_kind=K_MOVE, match_producer=agent),
                        agent=agent,
                    )
                )

        shop_bodies = {
            key[len("body:"):]: value
            for key, value in sigma.items()
            if key.startswith("body:") and value.get("type") == "shop"
        }
        order_of = lambda tid: tasks[tid]["order"]  # noqa: E731
        for sid, body in shop_bodies.items():
            pending = tuple(
                sorted(
                    (
                        tid
                        for tid, t in tasks.items()
                        if (t["source"] == sid and t["state"] in ("pending", "assigned"))
                        or (t["dest"] == sid and t["state"] == "picked")
                    ),
                    key=order_of,
                )
            )
            sigma[body_key(sid)] = body.with_attrs(
                pending=pending, emitting=bool(pending)
            )

        sigma["tasks"] = tasks
        return ReactionResult(sigma, tuple(persisted), events=tuple(events))

    return tasks_reaction


def make_control_reaction(grid: GridMap, params: FmsParams, control_enabled: bool):
    def control_reaction(level, sigma, influences, ctx):
        events = []
        spawn = []
        remove = []
        solver_bodies = {
            key[len("body:"):]: value
            for key, value in sigma.items()
            if key.startswith("body:") and value.get("type") == "solver"
        }

        removed = set()
        for inf in sorted(
            (i for i in influences if i.kind == K_RESOLVED), key=lambda i: i.id
        ):
            sid = inf.payload_get("solver")
            if sid in solver_bodies and sid not in removed:
                removed.add(sid)
                remove.append(sid)
                sigma["deadlocks_resolved"] = sigma.get("deadlocks_resolved", 0) + 1
                events.append(
                    (
                        "deadlock-resolved",
                        {"solver": sid, "trapped": list(solver_bodies[sid].get("trapped", ()))},
                    )
                )

        for inf in sorted(
            (i for i in influences if i.kind == K_UNRESOLVABLE), key=lambda i: i.id
        ):
            sig = tuple(inf.payload_get("trapped", ()))
            known = tuple(sigma.get("unresolvable", ()))
            if sig not in known:
                sigma["unresolvable"] = known + (sig,)
                events.append(
                    (
                        "no-escape-path",
                        {"solver": inf.payload_get("solver"), "trapped": list(sig)},
                    )
                )

        governed = set()
        for sid, body in solver_bodies.items():
            if sid not in removed:
                governed.update(body.get("trapped", ()))

        groups = [
            frozenset(inf.payload_get("trapped", ()))
            for inf in sorted(
                (i for i in influences if i.kind == K_DEADLOCK), key=lambda i: i.id
            )
        ]
        groups = [g for g in groups if g and not (g & governed)]
        for group in merge_trapped_groups(groups):
            if control_enabled:
                seq = sigma.get("solver_seq", 0)
                sigma["solver_seq"] = seq + 1
                sid = f"solver{seq}"
                sigma["deadlocks_detected"] = sigma.get("deadlocks_detected", 0) + 1
                record = AgentRecord(
                    id=sid,
                    kind="solver",
                    internal_state=None,
                    bodies={
                        CONTROL: Body(
                            CONTROL,
                            {
                                "type": "solver",
                                "trapped": tuple(sorted(group)),
                                "since": ctx.tick,
                            },
                        )
                    },
                )
                spawn.append(record)
                events.append(
                    ("deadlock-detected", {"solver": sid, "trapped": sorted(group)})
                )
            else:
                sig = tuple(sorted(group))
                observed = tuple(sigma.get("observed", ()))
                if sig not in observed:
                    sigma["observed"] = observed + (sig,)
                    sigma["deadlocks_detected"] = sigma.get("deadlocks_detected", 0) + 1
                    events.append(("deadlock-detected", {"trapped": list(sig)}))

        return ReactionResult(
            sigma, (), spawn=tuple(spawn), remove=tuple(remove), events=tuple(events)
        )

    return control_reaction


# --- model / initial state builders -----------------------------------------

LEVEL_EDGES = (
    (FLOOR, TASKS),
    (TASKS, FLOOR),
    (FLOOR, CONTROL),
    (CONTROL, FLOOR),
)


def default_level_graph():
    return validate(
        LevelGraphSpec.make([FLOOR, TASKS, CONTROL], LEVEL_EDGES, LEVEL_EDGES)
    )


def build_fms_model(grid: GridMap, agv_ids, shop_ids, params: FmsParams,
                    control: bool = True, graph=None) -> Model:
    graph = graph or default_level_graph()
    agv_rule = AgvBehavior(grid, params)
    shop_rule = ShopBehavior()
    behaviors = {aid: agv_rule for aid in agv_ids}
    behaviors.update({sid: shop_rule for sid in shop_ids})
    detector = make_deadlock_detector(grid, params)
    return Model(
        graph=graph,
        behaviors=behaviors,
        dynamic_behaviors={"solver": SolverBehavior(grid, params)},
        environments=(
            EnvironmentRecord(id="shop-floor", member_levels=frozenset({FLOOR})),
        ),
        detectors={detector.name: detector},
        reactions={
            FLOOR: make_floor_reaction(grid, params),
            TASKS: make_tasks_reaction(grid),
            CONTROL: make_control_reaction(grid, params, control),
        },
        producible_kinds=dict(PRODUCIBLE_KINDS),
        couplings=(
            HierarchicalCoupling(micro=FLOOR, macro=TASKS),
            HierarchicalCoupling(micro=FLOOR, macro=CONTROL),
        ),
        emergences=(
            EmergenceKindDecl(
                kind=K_DEADLOCK, macro_level=CONTROL, detector="deadlock-detector"
            ),
        ),
        constraints=(
            ConstraintKindDecl(kind=K_INH_MOVE, micro_level=FLOOR, inhibits=K_MOVE),
            ConstraintKindDecl(kind=K_INH_REP, micro_level=FLOOR, inhibits=K_REPULSE),
        ),
    )


def build_initial_state(grid: GridMap, agvs: dict, shops: dict, tasks) -> SystemState:
    """agvs: id -> cell; shops: id -> cell; tasks: iterable of dicts with
    id/source/dest shop ids (declaration order fixes assignment priority)."""
    task_table = {}
    for order, task in enumerate(tasks):
        task_table[task["id"]] = {
            "source": task["source"],
            "dest": task["dest"],
            "source_cell": tuple(shops[task["source"]]),
            "dest_cell": tuple(shops[task["dest"]]),
            "state": "pending",
            "assigned_to": None,
            "order": order,
        }

    floor_props = {}
    tasks_props = {"tasks": task_table}
    control_props = {
        "deadlocks_detected": 0,
        "deadlocks_resolved": 0,
        "solver_seq": 0,
    }
    agents = {}

    for aid in sorted(agvs):
        body = Body(
            FLOOR,
            {
                "type": "agv",
                "cell": tuple(agvs[aid]),
                "carrying": None,
                "assigned": None,
                "source": None,
                "dest": None,
                "repulsion_on": False,
                "window": (),
            },
        )
        floor_props[body_key(aid)] = body
        agents[aid] = AgentRecord(id=aid, kind="agv", bodies={FLOOR: body})

    for sid in sorted(shops):
        cell = tuple(shops[sid])
        floor_body = Body(FLOOR, {"type": "shop", "cell": cell})
        pending = tuple(
            sorted(
                (tid for tid, t in task_table.items() if t["source"] == sid),
                key=lambda tid: task_table[tid]["order"],
            )
        )
        task_body = Body(
            TASKS,
            {"type": "shop", "cell": cell, "pending": pending, "emitting": bool(pending)},
        )
        floor_props[body_key(sid)] = floor_body
        tasks_props[body_key(sid)] = task_body
        agents[sid] = AgentRecord(
            id=sid, kind="shop", bodies={FLOOR: floor_body, TASKS: task_body}
        )

    return SystemState(
        time=0,
        per_level={
            FLOOR: LevelState(FLOOR, floor_props),
            TASKS: LevelState(TASKS, tasks_props),
            CONTROL: LevelState(CONTROL, control_props),
        },
        agents=agents,
    )


# --- run helpers -------------------------------------------------------------

def all_tasks_delivered(state: SystemState) -> bool:
    tasks = state.per_level[TASKS].properties.get("tasks", {})
    return bool(tasks) and all(t["state"] == "delivered" for t in tasks.values())


all_tasks_delivered.__name__ = "all-delivered"


def fms_metrics(tick, state: SystemState, info) -> dict:
    tasks = state.per_level[TASKS].properties.get("tasks", {})
    control = state.per_level[CONTROL].properties
    agvs = _floor_agvs(state.per_level[FLOOR])
    idle = sum(1 for b in agvs.values() if b.get("assigned") is None)
    active_constraints = sum(
        1
        for group in info.produced.values()
        for inf in group
        if inf.klass == CONSTRAINT
    )
    return {
        "tick": tick,
        "tasks_delivered": sum(1 for t in tasks.values() if t["state"] == "delivered"),
        "deadlocks_detected": control.get("deadlocks_detected", 0),
        "deadlocks_resolved": control.get("deadlocks_resolved", 0),
        "active_constraints": active_constraints,
        "agv_idle_ratio": round(idle / len(agvs), 6) if agvs else 0.0,
    }


class SafetyChecker:
    """Observer enforcing occupancy and task-monotonicity invariants each tick."""

    STATE_INDEX = {name: i for i, name in enumerate(TASK_STATES)}

    def __init__(self, grid: GridMap):
        self.grid = grid
        self._last_task_states: dict = {}

    def __call__(self, tick, state: SystemState, info):
        from ..errors import SafetyViolation

        agvs = _floor_agvs(state.per_level[FLOOR])
        cells = [b.get("cell") for b in agvs.values()]
        if len(cells) != len(set(cells)):
            raise SafetyViolation(f"tick {tick}: two AGVs share a cell ({cells})")
        for aid, b in agvs.items():
            if not self.grid.is_free(b.get("cell")):
                raise SafetyViolation(f"tick {tick}: {aid} on blocked cell {b.get('cell')}")
        tasks = state.per_level[TASKS].properties.get("tasks", {})
        for tid, task in tasks.items():
            new = self.STATE_INDEX[task["state"]]
            old = self._last_task_states.get(tid, 0)
            if new < old:
                raise SafetyViolation(
                    f"tick {tick}: task {tid} regressed {TASK_STATES[old]} -> {task['state']}"
                )
            self._last_task_states[tid] = new
