"""Exception hierarchy shared by all modules."""


class CritCascadeError(Exception):
    """Base class for every error raised by the package."""


class NoBoundarySolution(CritCascadeError):
    """The affine boundary normalization has no root or did not converge."""


class NonSupercritical(CritCascadeError):
    """The expected number of children is not larger than one."""


class MethodUnsupported(CritCascadeError):
    """The requested computation method is not available for this law."""


class MethodMismatch(CritCascadeError):
    """The requested renewal method does not fit the walk."""


class NotBoundaryNormalized(CritCascadeError):
    """The law violates the boundary-case moment conditions."""


class CapExceeded(CritCascadeError):
    """A generation would exceed the configured population cap.

    Attributes
    ----------
    partial : object
        The tree grown up to the last complete generation.
    generation : int
        The generation whose population exceeded the cap.
    """

    def __init__(self, message, partial=None, generation=None):
        super().__init__(message)
        self.partial = partial
        self.generation = generation


class DepthOutOfRange(CritCascadeError):
    """A generation index beyond the grown depth was requested."""


class InvalidNode(CritCascadeError):
    """A node identifier does not refer to a grown node."""


class InsufficientDepth(CritCascadeError):
    """The tree is not deep enough below a node for the requested side depth."""


class BudgetExceeded(CritCascadeError):
    """A simulation would exceed its work budget."""


class HorizonExceeded(CritCascadeError):
    """Too many paths hit the step cap before the target event."""


class RenewalDomainExceeded(CritCascadeError):
    """The renewal table was evaluated outside its domain."""


class StateBelowBarrier(CritCascadeError):
    """A conditioned-walk state lies below the barrier -alpha."""


class DomainError(CritCascadeError):
    """Arguments lie outside the domain of a formula."""


class RejectionBudgetExceeded(CritCascadeError):
    """A rejection sampler used up its proposal budget."""


class BarrierViolated(CritCascadeError):
    """A spine position fell below the barrier -alpha."""


class WindowOutOfRange(CritCascadeError):
    """A spine summation window extends past the simulated depth."""


class DepthTooShallow(CritCascadeError):
    """Paths are too short for the requested statistic."""


class NonpositiveMass(CritCascadeError):
    """A mass series contains a value that is not strictly positive."""


class ConfigInvalid(CritCascadeError):
    """The experiment configuration is malformed or out of range."""


class WorkerFailure(CritCascadeError):
    """A worker raised while processing a block of replicas."""
