"""Exception hierarchy shared by all modules.

Every error carries an ``exit_code`` so the command line front end can map
failures onto its exit-code contract (2 config, 3 numeric, 4 infeasible).
"""


class StealthError(Exception):
    exit_code = 3


class InvalidModel(StealthError, ValueError):
    exit_code = 2


class DimensionMismatch(StealthError, ValueError):
    exit_code = 2


class InvalidPolicy(StealthError, ValueError):
    exit_code = 2


class NonConvergence(StealthError, RuntimeError):
    pass


class NumericalBreakdown(StealthError, RuntimeError):
    pass


class DegeneratePolicy(StealthError, ValueError):
    """The holding-time chain has no return path to the reset state."""


class Unbounded(StealthError, ArithmeticError):
    """An averaged expected error covariance diverges."""


class DivergentTail(Unbounded):
    pass


class NotUnstable(StealthError, ValueError):
    pass


class NoFiniteThreshold(StealthError, ValueError):
    pass


class InfeasibleStealth(StealthError):
    exit_code = 4


class FollowerInfeasible(InfeasibleStealth):
    pass


class HorizonTooLarge(StealthError, ValueError):
    exit_code = 2


class WindowTooLong(StealthError, ValueError):
    exit_code = 2


class TailMassTooLarge(StealthError, ValueError):
    pass


class UnstableWindow(StealthError, RuntimeError):
    pass
