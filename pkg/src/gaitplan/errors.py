"""Exception hierarchy shared by all modules."""


class GaitPlanError(Exception):
    pass


class InvalidSpec(GaitPlanError, ValueError):
    pass


class EnvelopeExceeded(GaitPlanError):
    """Reduced state left the configured envelope (divergence)."""

    def __init__(self, message, stride=None, state=None):
        super().__init__(message)
        self.stride = stride
        self.state = state


class NoConvergence(GaitPlanError):
    pass


class RankDeficient(GaitPlanError):
    pass


class NotSchurStable(GaitPlanError):
    pass


class NoContractiveLevel(GaitPlanError):
    pass


class NoFeasibleKappa(GaitPlanError):
    pass


class NoPath(GaitPlanError):
    pass


class PlacementFailure(GaitPlanError):
    pass


class Infeasible(GaitPlanError):
    """The primitive tree search found no admissible branch."""

    def __init__(self, message, expansions=0, backtracks=0):
        super().__init__(message)
        self.expansions = expansions
        self.backtracks = backtracks
