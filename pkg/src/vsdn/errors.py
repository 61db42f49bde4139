"""Exception types shared across the package.

The CLI maps these onto process exit codes: validation-style errors exit 1,
runtime faults exit 2, failed verification tolerances exit 3.
"""


class VSDNError(Exception):
    pass


class ContractViolation(VSDNError, ValueError):
    """A caller broke a documented precondition (shapes, ranges, emptiness)."""


class ConfigError(VSDNError, ValueError):
    pass


class IngestionError(VSDNError, ValueError):
    """Malformed input data: unsorted or duplicated times, bad CSV rows."""


class TrainingFault(VSDNError, RuntimeError):
    """Non-finite loss, gradient or latent state encountered at run time."""


class PathFault(TrainingFault):
    def __init__(self, message, node_index=None):
        super().__init__(message)
        self.node_index = node_index


class OracleFailure(VSDNError, RuntimeError):
    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class VerificationFailed(VSDNError, AssertionError):
    pass
