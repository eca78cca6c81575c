"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class DomainError(ContractViolation):
    """A math op received inputs outside its domain (log/sqrt of negatives)."""


class NotInvertibleError(ContractViolation):
    """A decoded value sits on or beyond an open bound and has no raw preimage."""


class UndefinedOKSError(ContractViolation):
    """OKS requested for a ground truth with no labeled keypoints."""


class InfeasibleSceneError(RuntimeError):
    """Synthetic scene placement failed after the retry budget."""


class NonFiniteLossError(FloatingPointError):
    """Training produced a non-finite loss term."""

    def __init__(self, term, step=None):
        self.term = term
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term {term!r}{where}")
