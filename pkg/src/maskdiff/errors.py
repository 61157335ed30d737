"""Exception hierarchy shared across the engine.

The CLI maps these onto exit codes: validation problems exit 1,
numeric faults exit 2.
"""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(EngineError, ValueError):
    """Bad arguments, out-of-domain inputs, or invalid configuration."""


class UnreachableStateError(EngineError):
    """A corrupted state has probability zero under the data distribution."""


class EnumerationBudgetError(EngineError):
    """An exact enumeration would exceed the configured outcome budget."""


class LossDomainError(EngineError):
    """A score entered a region where the loss is undefined (e.g. s <= 0 with c > 0)."""


class NumericFaultError(EngineError):
    """Non-finite values appeared during computation.

    ``block_index`` identifies the first offending transformer block when the
    fault was detected inside the score network; ``sample_index`` identifies
    the offending batch item when detected during training.
    """

    def __init__(self, message, block_index=None, sample_index=None):
        super().__init__(message)
        self.block_index = block_index
        self.sample_index = sample_index
