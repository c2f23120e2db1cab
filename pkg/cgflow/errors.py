"""
Exception hierarchy for cgflow

Every error raised on purpose by the library derives from CGFError so the CLI
can map it to an exit code.
"""

from typing import Optional, Sequence, Tuple


class CGFError(Exception):
    """Base class for all cgflow errors"""


class ConfigError(CGFError):
    """Invalid configuration or command-line usage (exit code 2)"""


class ShapeError(CGFError):
    """A tensor shape does not conform to a recorded op"""

    def __init__(self, op_index: int, kind: str, shapes: Sequence[Tuple[int, ...]],
                 detail: str = ''):
        self.op_index = op_index
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)
        shape_text = ', '.join(str(s) for s in self.shapes)
        message = f"op #{op_index} ({kind}): incompatible shapes {shape_text}"
        if detail:
            message += f" - {detail}"
        super().__init__(message)


class TapeStateError(CGFError):
    """A tape was used out of order (e.g. vjp before forward)"""


class UnsupportedOpError(CGFError):
    """An op outside the closed differentiable op set was recorded"""


class ParameterError(CGFError):
    """A parameter tensor is missing, mis-shaped or non-finite"""


class GraphError(CGFError):
    """Invalid graph or neighbourhood structure"""


class GraphFormatError(GraphError):
    """Malformed graph JSONL input"""

    def __init__(self, line_number: int, detail: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {detail}")


class SamplerExhaustedError(GraphError):
    """A rejection sampler ran out of attempts"""


class DequantError(CGFError):
    """Dequantizer received non-binary states or an invalid configuration"""


class SolverError(CGFError):
    """The ODE solver failed (budget exhausted, step underflow, non-finite state)"""


class FlowError(CGFError):
    """A flow block produced non-finite values"""

    def __init__(self, block: int, detail: str):
        self.block = block
        super().__init__(f"block {block}: {detail}")


class TrainingDivergedError(CGFError):
    """The training loss became non-finite"""

    def __init__(self, detail: str, last_good_epoch: Optional[int] = None):
        self.last_good_epoch = last_good_epoch
        super().__init__(detail)


class CheckpointError(CGFError):
    """Checkpoint file is truncated, corrupt or of an unknown version"""


class OrbitBudgetError(CGFError):
    """Graph too large for exhaustive 4-node orbit enumeration"""
