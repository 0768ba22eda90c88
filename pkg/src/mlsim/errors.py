"""Exception hierarchy shared by all mlsim modules."""


class MlsimError(Exception):
    """Base class for all mlsim errors."""


# --- level graph ---

class EmptyLevelSet(MlsimError):
    pass


class UnknownLevelEndpoint(MlsimError):
    pass


class UnknownLevel(MlsimError):
    pass


# --- state ---

class UnknownAgent(MlsimError):
    pass


class DuplicateBody(MlsimError):
    pass


# --- engine contracts ---

class IllegalInfluenceTarget(MlsimError):
    """A producer emitted an influence into a level outside its out-influence
    neighborhood, or with a kind/class the producer is not allowed to emit."""


class IllegalPerception(MlsimError):
    """A rule requested a level view outside its out-perception neighborhood."""


class KindNotProducible(MlsimError):
    """Influence kind is not in the producible-kind set of its target level."""


class ReactionFault(MlsimError):
    """A reaction rule raised, or violated its level-locality contract."""


class SafetyViolation(MlsimError):
    """A runtime safety invariant (occupancy, task monotonicity) was broken."""


# --- hierarchy / model validation ---

class ModelValidationError(MlsimError):
    pass


class UnknownCoupling(MlsimError):
    pass


# --- domain ---

class EmitterOnBlockedCell(MlsimError):
    pass


# --- scenario ---

class ScenarioError(MlsimError):
    """Scenario parse or validation failure.  Carries the full error list so a
    user sees every problem at once, not just the first."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(str(e) for e in self.errors))
