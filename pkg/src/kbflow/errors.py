"""Exception types shared across the package.

All failures that a caller can meaningfully react to are raised as one of
these; plain ``ValueError`` is reserved for malformed arguments (wrong
shapes, negative step sizes, and the like).
"""


class KBFlowError(Exception):
    """Base class for all package-specific failures."""


class NotPSD(KBFlowError):
    """A matrix required to be symmetric positive semi-definite is not.

    Raised when the violation exceeds the clamping tolerance; violations
    within tolerance are silently projected instead.
    """


class SingularGramian(KBFlowError):
    """An observability/controllability Gramian is numerically singular.

    Raised when the 2-norm condition number exceeds 1e12, in which case the
    derived quantities that need its inverse are meaningless.
    """


class NoStabilizingSolution(KBFlowError):
    """The algebraic Riccati equation has no stabilizing solution.

    Signals either a rank-deficient model (not detectable/stabilizable) or a
    failure of the residual to converge below tolerance.
    """


class StepSizeUnderflow(KBFlowError):
    """An adaptive integrator reduced its step below the hard floor (1e-12)."""


class NonFinite(KBFlowError):
    """A simulated state stopped being finite.

    Parameters
    ----------
    step : int
        Index of the first step at which a non-finite value appeared.
    t : float, optional
        Corresponding time, when known.
    """

    def __init__(self, step, t=None, what="state"):
        self.step = int(step)
        self.t = t
        self.what = what
        at = f" (t={t:.6g})" if t is not None else ""
        super().__init__(f"{what} became non-finite at step {self.step}{at}")


class BoundNotApplicable(KBFlowError):
    """A finite-N bound is requested outside its regime of validity.

    The message records the violated requirement (for the fluctuation decay
    rates: the moment/ensemble-size constraint on N).
    """


class ConfigError(KBFlowError):
    """A JSON config/spec file is malformed: unknown keys, missing fields,
    or values outside their documented domain."""
