"""Declarative sequential architecture descriptors.

A descriptor is an input shape plus an ordered list of blocks. It can be
written to and read from a small line-oriented text format::

    input 3x32x32
    classes 10
    conv 64 k=3 s=1 p=1 bias=0
    maxpool 2 s=2
    avgpool          # global when no kernel is given
    flatten
    linear 10

Blank lines and ``#`` comments are ignored.
"""

from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import DescriptorError, ParseError


@dataclass(frozen=True)
class Conv:
    """Conv -> BatchNorm -> ReLU unit; its output channels are gateable."""

    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    bias: bool = False


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2
    stride: Optional[int] = None


@dataclass(frozen=True)
class AvgPool:
    kernel: Optional[int] = None
    stride: Optional[int] = None


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    out_features: int


Block = Union[Conv, MaxPool, AvgPool, Flatten, Linear]


@dataclass
class LayerShape:
    block: Block
    in_shape: tuple
    out_shape: tuple


@dataclass
class ArchDescriptor:
    input_shape: tuple
    blocks: list = field(default_factory=list)
    num_classes: int = 10
    name: str = "custom"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.blocks = list(self.blocks)

    @property
    def conv_blocks(self):
        return [b for b in self.blocks if isinstance(b, Conv)]

    @property
    def conv_widths(self):
        return [b.out_channels for b in self.conv_blocks]

    def trace(self, input_shape=None):
        """Propagate shapes block by block, validating as we go."""
        shape = tuple(input_shape or self.input_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise DescriptorError(f"input shape must be C x H x W, got {shape}")
        out = []
        flat = False
        for i, b in enumerate(self.blocks):
            where = f"block {i} ({type(b).__name__})"
            if isinstance(b, Linear):
                if not flat:
                    raise DescriptorError(f"{where}: Linear must follow Flatten")
                if i != len(self.blocks) - 1:
                    raise DescriptorError(f"{where}: only the final block may be Linear")
                if b.out_features != self.num_classes:
                    raise DescriptorError(
                        f"{where}: Linear outputs {b.out_features}, descriptor has {self.num_classes} classes")
                new = (b.out_features,)
            elif flat:
                raise DescriptorError(f"{where}: only Linear may follow Flatten")
            elif isinstance(b, Flatten):
                new = (shape[0] * shape[1] * shape[2],)
                flat = True
            elif isinstance(b, Conv):
                if b.out_channels < 1 or b.kernel < 1 or b.stride < 1 or b.padding < 0:
                    raise DescriptorError(f"{where}: invalid conv parameters {b}")
                h = (shape[1] + 2 * b.padding - b.kernel) // b.stride + 1
                w = (shape[2] + 2 * b.padding - b.kernel) // b.stride + 1
                if h < 1 or w < 1:
                    raise DescriptorError(f"{where}: spatial size collapses from {shape}")
                new = (b.out_channels, h, w)
            elif isinstance(b, (MaxPool, AvgPool)):
                k = b.kernel if b.kernel is not None else shape[1]
                s = b.stride if b.stride is not None else k
                if isinstance(b, AvgPool) and b.kernel is None and shape[1] != shape[2]:
                    raise DescriptorError(f"{where}: global pooling needs square input")
                if k > shape[1] or k > shape[2]:
                    raise DescriptorError(f"{where}: pool kernel {k} larger than input {shape}")
                new = (shape[0], (shape[1] - k) // s + 1, (shape[2] - k) // s + 1)
            else:
                raise DescriptorError(f"{where}: unknown block type")
            out.append(LayerShape(b, shape, new))
            shape = new
        if not self.blocks or not isinstance(self.blocks[-1], Linear):
            raise DescriptorError("the final block must be the Linear classifier")
        return out

    def validate(self):
        self.trace()
        return self

    def to_text(self):
        c, h, w = self.input_shape
        lines = [f"# {self.name}", f"input {c}x{h}x{w}", f"classes {self.num_classes}"]
        for b in self.blocks:
            if isinstance(b, Conv):
                lines.append(f"conv {b.out_channels} k={b.kernel} s={b.stride} p={b.padding} bias={int(b.bias)}")
            elif isinstance(b, MaxPool):
                lines.append(f"maxpool {b.kernel}" + (f" s={b.stride}" if b.stride is not None else ""))
            elif isinstance(b, AvgPool):
                parts = ["avgpool"]
                if b.kernel is not None:
                    parts.append(str(b.kernel))
                if b.stride is not None:
                    parts.append(f"s={b.stride}")
                lines.append(" ".join(parts))
            elif isinstance(b, Flatten):
                lines.append("flatten")
            elif isinstance(b, Linear):
                lines.append(f"linear {b.out_features}")
        return "\n".join(lines) + "\n"


def _kv(tokens, lineno, allowed):
    pos, kw = [], {}
    for tok in tokens:
        if "=" in tok:
            k, v = tok.split("=", 1)
            if k not in allowed:
                raise ParseError(f"unknown option {k!r}", f"line {lineno}")
            kw[k] = v
        else:
            pos.append(tok)
    return pos, kw


def _int(text, lineno):
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"expected an integer, got {text!r}", f"line {lineno}") from None


def parse_descriptor(text, name="custom"):
    """Parse the text format described in the module docstring."""
    input_shape = None
    classes = None
    blocks = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if raw.strip().startswith("# ") and lineno == 1:
                name = raw.strip()[2:].strip() or name
            continue
        head, *rest = line.split()
        head = head.lower()
        if head == "input":
            if len(rest) != 1:
                raise ParseError("input takes one CxHxW argument", f"line {lineno}")
            dims = rest[0].lower().split("x")
            if len(dims) != 3:
                raise ParseError(f"bad input shape {rest[0]!r}", f"line {lineno}")
            input_shape = tuple(_int(d, lineno) for d in dims)
        elif head == "classes":
            if len(rest) != 1:
                raise ParseError("classes takes one integer", f"line {lineno}")
            classes = _int(rest[0], lineno)
        elif head == "conv":
            pos, kw = _kv(rest, lineno, {"k", "s", "p", "bias"})
            if len(pos) != 1:
                raise ParseError("conv takes exactly one width", f"line {lineno}")
            blocks.append(Conv(_int(pos[0], lineno), kernel=_int(kw.get("k", "3"), lineno),
                               stride=_int(kw.get("s", "1"), lineno), padding=_int(kw.get("p", "1"), lineno),
                               bias=bool(_int(kw.get("bias", "0"), lineno))))
        elif head in ("maxpool", "avgpool"):
            pos, kw = _kv(rest, lineno, {"s"})
            if len(pos) > 1:
                raise ParseError(f"{head} takes at most one kernel size", f"line {lineno}")
            k = _int(pos[0], lineno) if pos else None
            s = _int(kw["s"], lineno) if "s" in kw else None
            if head == "maxpool":
                blocks.append(MaxPool(2 if k is None else k, s))
            else:
                blocks.append(AvgPool(k, s))
        elif head == "flatten":
            if rest:
                raise ParseError("flatten takes no arguments", f"line {lineno}")
            blocks.append(Flatten())
        elif head == "linear":
            if len(rest) != 1:
                raise ParseError("linear takes one output size", f"line {lineno}")
            blocks.append(Linear(_int(rest[0], lineno)))
        else:
            raise ParseError(f"unknown block {head!r}", f"line {lineno}")
    if input_shape is None:
        raise ParseError("missing 'input CxHxW' line")
    if classes is None:
        classes = blocks[-1].out_features if blocks and isinstance(blocks[-1], Linear) else 10
    desc = ArchDescriptor(input_shape, blocks, classes, name)
    try:
        desc.validate()
    except DescriptorError as exc:
        raise ParseError(str(exc)) from None
    return desc


# VGG-E feature widths; "M" is a 2x2 max-pool.
VGG19_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
             512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]


def vgg19_descriptor(num_classes=10, input_shape=(3, 32, 32)):
    """VGG-E features (16 conv + BN + ReLU) with a single Linear classifier."""
    blocks = []
    for v in VGG19_CFG:
        blocks.append(MaxPool(2, 2) if v == "M" else Conv(v, 3, 1, 1, bias=False))
    c, h, w = input_shape
    spatial = h // 32
    if spatial > 1:
        blocks.append(AvgPool(spatial))
    blocks += [Flatten(), Linear(num_classes)]
    return ArchDescriptor(input_shape, blocks, num_classes, "vgg19").validate()


def desk_descriptor(num_classes=10, input_shape=(1, 28, 28)):
    """Small 4-conv CNN (16, 32, 32, 64) used for desk-scale runs."""
    blocks = [Conv(16), MaxPool(2), Conv(32), MaxPool(2), Conv(32), Conv(64), MaxPool(2),
              Flatten(), Linear(num_classes)]
    return ArchDescriptor(input_shape, blocks, num_classes, "desk").validate()


def tiny_descriptor(num_classes=10, input_shape=(1, 28, 28)):
    """Two conv layers (8, 16) and a linear head; 24 gateable channels."""
    blocks = [Conv(8), MaxPool(2), Conv(16), MaxPool(2), AvgPool(), Flatten(), Linear(num_classes)]
    return ArchDescriptor(input_shape, blocks, num_classes, "tiny").validate()


ARCHS = {
    "vgg19": vgg19_descriptor,
    "desk": desk_descriptor,
    "tiny": tiny_descriptor,
}


def get_descriptor(arch, num_classes=10, input_shape=None):
    try:
        factory = ARCHS[arch]
    except KeyError:
        raise DescriptorError(f"unknown architecture {arch!r}; known: {sorted(ARCHS)}") from None
    if input_shape is None:
        return factory(num_classes)
    return factory(num_classes, tuple(input_shape))
