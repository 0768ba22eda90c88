"""Static multi-level structure: levels, influence and perception relations.

Levels are opaque strings.  The influence relation and the perception relation
are directed graphs over the level set; intra-level relations are implicit, so
self-loop edges are dropped during normalization (with a warning) rather than
stored.  All four neighborhood functions are reflexive by definition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import EmptyLevelSet, UnknownLevel, UnknownLevelEndpoint

LevelId = str
Edge = tuple[LevelId, LevelId]


@dataclass(frozen=True)
class LevelGraphSpec:
    """Raw, possibly unnormalized declaration of a level graph."""

    levels: frozenset[LevelId]
    influence_edges: frozenset[Edge]
    perception_edges: frozenset[Edge]

    @classmethod
    def make(cls, levels, influence_edges=(), perception_edges=()) -> "LevelGraphSpec":
        return cls(
            levels=frozenset(levels),
            influence_edges=frozenset((a, b) for a, b in influence_edges),
            perception_edges=frozenset((a, b) for a, b in perception_edges),
        )


def _neighborhoods(levels, edges):
    """Reflexive in/out neighborhood tables for one edge relation."""
    out = {l: {l} for l in levels}
    inc = {l: {l} for l in levels}
    for a, b in edges:
        out[a].add(b)
        inc[b].add(a)
    return (
        {l: frozenset(s) for l, s in inc.items()},
        {l: frozenset(s) for l, s in out.items()},
    )


@dataclass(frozen=True)
class ValidatedLevelGraph:
    """Normalized level graph with precomputed neighborhood tables.

    Immutable after construction; safe for concurrent reads.
    """

    spec: LevelGraphSpec
    warnings: tuple[str, ...]
    _in_influence: dict = field(repr=False, compare=False, default=None)
    _out_influence: dict = field(repr=False, compare=False, default=None)
    _in_perception: dict = field(repr=False, compare=False, default=None)
    _out_perception: dict = field(repr=False, compare=False, default=None)

    @property
    def levels(self) -> frozenset[LevelId]:
        return self.spec.levels

    def _check(self, level: LevelId) -> None:
        if level not in self.spec.levels:
            raise UnknownLevel(level)

    def in_influence(self, level: LevelId) -> frozenset[LevelId]:
        self._check(level)
        return self._in_influence[level]

    def out_influence(self, level: LevelId) -> frozenset[LevelId]:
        self._check(level)
        return self._out_influence[level]

    def in_perception(self, level: LevelId) -> frozenset[LevelId]:
        self._check(level)
        return self._in_perception[level]

    def out_perception(self, level: LevelId) -> frozenset[LevelId]:
        self._check(level)
        return self._out_perception[level]


def validate(spec: LevelGraphSpec) -> ValidatedLevelGraph:
    """Normalize and validate a raw spec.

    Self-loops are dropped (warning recorded), duplicates disappear through
    set semantics.  Dangling edge endpoints and an empty level set are hard
    errors.
    """
    if not spec.levels:
        raise EmptyLevelSet("a level graph needs at least one level")

    def normalize(edges, relation):
        kept = set()
        warnings = []
        for a, b in edges:
            for endpoint in (a, b):
                if endpoint not in spec.levels:
                    raise UnknownLevelEndpoint(
                        f"{relation} edge ({a}, {b}) references unknown level {endpoint!r}"
                    )
            if a == b:
                warnings.append(
                    f"dropped self-loop ({a}, {b}) in {relation}: intra-level "
                    "relations are implicit"
                )
            else:
                kept.add((a, b))
        return frozenset(kept), warnings

    influence, warn_i = normalize(spec.influence_edges, "influence")
    perception, warn_p = normalize(spec.perception_edges, "perception")
    normalized = LevelGraphSpec(spec.levels, influence, perception)

    in_i, out_i = _neighborhoods(spec.levels, influence)
    in_p, out_p = _neighborhoods(spec.levels, perception)
    return ValidatedLevelGraph(
        spec=normalized,
        warnings=tuple(sorted(warn_i + warn_p)),
        _in_influence=in_i,
        _out_influence=out_i,
        _in_perception=in_p,
        _out_perception=out_p,
    )


# Free-function aliases matching the operation names used elsewhere.

def out_influence_neighborhood(g: ValidatedLevelGraph, level: LevelId):
    return g.out_influence(level)


def in_influence_neighborhood(g: ValidatedLevelGraph, level: LevelId):
    return g.in_influence(level)


def out_perception_neighborhood(g: ValidatedLevelGraph, level: LevelId):
    return g.out_perception(level)


def in_perception_neighborhood(g: ValidatedLevelGraph, level: LevelId):
    return g.in_perception(level)
