"""
Error hierarchy for the multi-exit laboratory
Every failure raised by the library derives from LabError so the CLI can map it to an exit code
"""


class LabError(Exception):
    """Base class for all laboratory errors"""


class ConfigError(LabError, ValueError):
    """Run configuration is invalid"""


class ShapeMismatchError(LabError, ValueError):
    """Operand shapes are incompatible for a graph operation"""


class NonFiniteError(LabError, ArithmeticError):
    """A tensor value or gradient contains NaN or Inf"""


class NonScalarRootError(LabError, ValueError):
    """Backward pass requested from a non-scalar root"""


class InvalidPlacementError(LabError, ValueError):
    """Internal classifier placements are not strictly increasing within the backbone"""


class UnsupportedSchemeError(LabError, ValueError):
    """Placement or scaling scheme cannot be resolved"""


class LengthMismatchError(LabError, ValueError):
    """Per-exit vectors do not match the number of exits"""


class DivergenceError(LabError, ArithmeticError):
    """Training loss became non-finite or exceeded the divergence threshold"""


class UnsupportedCriterionError(LabError, ValueError):
    """Exit criterion is not defined for the model's task"""


class InfeasibleBudgetError(LabError, ValueError):
    """No operating point satisfies the requested budget"""


class ArchitectureMismatchError(LabError, ValueError):
    """Two parameter sets do not share the same architecture"""


class DatasetError(LabError, ValueError):
    """Dataset generation or ingestion failed"""


class CheckpointError(LabError):
    """Checkpoint cannot be read"""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint bytes are truncated or fail the checksum"""


class VersionMismatchError(CheckpointError):
    """Checkpoint was written by an unsupported format version"""
