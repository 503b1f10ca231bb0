"""
Exception hierarchy for the slimdet toolkit.

Every error carries the fields named in its message as attributes so callers
(the CLI in particular) can map them to exit codes and structured output.
"""
from typing import Optional


class SlimdetError(Exception):
    """Base class for all toolkit errors."""


# Network description parsing


class NetCfgError(SlimdetError, ValueError):
    """Problems in a network description file."""


class MalformedSection(NetCfgError):
    def __init__(self, line: int, text: str = "") -> None:
        self.line = line
        self.text = text
        super().__init__(f"Malformed section at line {line}: {text!r}")


class UnknownLayerKind(NetCfgError):
    def __init__(self, name: str, line: Optional[int] = None) -> None:
        self.name = name
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"Unknown layer kind [{name}]{where}")


class BadReference(NetCfgError):
    def __init__(self, layer: int, index: int) -> None:
        self.layer = layer
        self.index = index
        super().__init__(f"Layer {layer} references invalid layer {index}")


class MissingRequiredKey(NetCfgError):
    def __init__(self, section: str, key: str) -> None:
        self.section = section
        self.key = key
        super().__init__(f"Section [{section}] is missing required key '{key}'")


class EmptyNetwork(NetCfgError):
    def __init__(self) -> None:
        super().__init__("Network definition has no layers")


# Weights files


class WeightsError(SlimdetError, ValueError):
    """Problems reading or writing binary weights."""


class SizeMismatch(WeightsError):
    def __init__(self, expected: int, actual: int, unit: str = "floats") -> None:
        self.expected = expected
        self.actual = actual
        self.unit = unit
        super().__init__(f"Weights size mismatch: expected {expected} {unit}, got {actual}")


class BadHeader(WeightsError):
    def __init__(self, reason: str) -> None:
        self.reason = reason
        super().__init__(f"Bad weights header: {reason}")


class MisalignedStore(WeightsError):
    def __init__(self, layer: int, reason: str) -> None:
        self.layer = layer
        self.reason = reason
        super().__init__(f"Weight store misaligned at layer {layer}: {reason}")


# Graph analysis


class GraphError(SlimdetError, ValueError):
    """Structural problems found while analysing a network."""


class ShapeConflict(GraphError):
    def __init__(self, layer: int, detail: str = "") -> None:
        self.layer = layer
        self.detail = detail
        super().__init__(f"Shape conflict at layer {layer}: {detail}".rstrip(": "))


class YoloFilterMismatch(GraphError):
    def __init__(self, layer: int, expected: int, actual: int) -> None:
        self.layer = layer
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"Conv feeding yolo layer {layer} has {actual} filters, expected {expected}"
        )


class NonLinearHead(GraphError):
    def __init__(self, layer: int, conv: int, activation: str) -> None:
        self.layer = layer
        self.conv = conv
        self.activation = activation
        super().__init__(
            f"Conv {conv} feeding yolo layer {layer} has no batch norm and activation "
            f"'{activation}'; expected linear"
        )


# Tensor kernels


class KernelError(SlimdetError, ValueError):
    """Invalid inputs to a tensor kernel."""


class ChannelMismatch(KernelError):
    def __init__(self, expected: int, actual: int) -> None:
        self.expected = expected
        self.actual = actual
        super().__init__(f"Channel mismatch: expected {expected}, got {actual}")


class NegativeVariance(KernelError):
    def __init__(self, channel: int, value: float) -> None:
        self.channel = channel
        self.value = value
        super().__init__(f"Negative batch-norm variance {value} at channel {channel}")


class MissingCache(KernelError):
    def __init__(self, what: str) -> None:
        self.what = what
        super().__init__(f"Backward pass requires cached forward activations: {what}")


# Losses, pruning


class DegenerateGt(SlimdetError, ValueError):
    def __init__(self, w: float, h: float) -> None:
        self.w = w
        self.h = h
        super().__init__(f"Ground-truth box has non-positive area ({w} x {h})")


class PruneError(SlimdetError, ValueError):
    """Invalid pruning request."""


class RatioOutOfRange(PruneError):
    def __init__(self, ratio: float) -> None:
        self.ratio = ratio
        super().__init__(f"Prune ratio must satisfy 0 <= r < 1, got {ratio}")


class InconsistentMask(PruneError):
    def __init__(self, layer: int, reason: str) -> None:
        self.layer = layer
        self.reason = reason
        super().__init__(f"Prune mask inconsistent at layer {layer}: {reason}")


# Datasets


class DatasetError(SlimdetError):
    """Problems loading images or labels."""


class MissingLabel(DatasetError, FileNotFoundError):
    def __init__(self, image: str) -> None:
        self.image = image
        super().__init__(f"No label file for image {image}")


class MalformedLine(DatasetError, ValueError):
    def __init__(self, file: str, n: int, text: str = "") -> None:
        self.file = file
        self.n = n
        self.text = text
        super().__init__(f"Malformed label line {n} in {file}: {text!r}")


class BoxOutOfRange(DatasetError, ValueError):
    def __init__(self, file: str, n: int, values: tuple) -> None:
        self.file = file
        self.n = n
        self.values = values
        super().__init__(f"Box outside [0,1] at line {n} in {file}: {values}")


# Training


class TrainingError(SlimdetError):
    """Training loop failures."""


class RangeOutOfBounds(TrainingError, ValueError):
    def __init__(self, start: int, end: int, layer_count: int) -> None:
        self.start = start
        self.end = end
        self.layer_count = layer_count
        super().__init__(
            f"Freeze range [{start}, {end}] outside network with {layer_count} layers"
        )


class DivergenceDetected(TrainingError, ArithmeticError):
    def __init__(self, epoch: int, step: int, value: float) -> None:
        self.epoch = epoch
        self.step = step
        self.value = value
        super().__init__(f"Loss became non-finite ({value}) at epoch {epoch}, step {step}")
