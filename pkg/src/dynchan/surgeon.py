"""Compact-model extraction and parameter / MAC accounting."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchDescriptor, AvgPool, Conv, Flatten, Linear, MaxPool
from .errors import ConstraintError, UnsupportedArchitecture
from .model import Model


@dataclass
class CompactPlan:
    kept_out: list              # per conv layer, sorted kept output channel indices
    kept_in: list               # per conv layer, kept input channels of its weight
    fc_columns: np.ndarray      # kept columns of the classifier weight

    @classmethod
    def from_mask(cls, model, mask):
        if mask.registry != model.registry:
            raise ConstraintError("mask does not belong to this model")
        kept_out = [np.flatnonzero(b) for b in mask.layer_bits()]
        for l, k in enumerate(kept_out):
            if k.size == 0:
                raise ConstraintError(f"conv layer {l} keeps no channels")
        kept_in = [np.arange(model.desc.input_shape[0])] + kept_out[:-1]
        spatial = model.flatten_spatial()
        cols = (kept_out[-1][:, None] * spatial + np.arange(spatial)[None, :]).reshape(-1)
        return cls(kept_out, kept_in, cols)


def _check_sequential(desc):
    allowed = (Conv, MaxPool, AvgPool, Flatten, Linear)
    for b in desc.blocks:
        if not isinstance(b, allowed):
            raise UnsupportedArchitecture(f"cannot extract across block {b!r}")


def compact_descriptor(desc, plan):
    blocks, l = [], 0
    for b in desc.blocks:
        if isinstance(b, Conv):
            blocks.append(Conv(int(plan.kept_out[l].size), b.kernel, b.stride, b.padding, b.bias))
            l += 1
        else:
            blocks.append(b)
    return ArchDescriptor(desc.input_shape, blocks, desc.num_classes, f"{desc.name}-compact")


def extract_compact(model, mask):
    """A smaller model holding only the mask's active channels.

    Conv kernels are sliced on both output and input channels, BN affine
    terms and running statistics on output channels, and the classifier on
    the flattened features of surviving channels.
    """
    _check_sequential(model.desc)
    plan = CompactPlan.from_mask(model, mask)
    small = Model(compact_descriptor(model.desc, plan), model.dtype)
    src = model.state_arrays()
    for l in range(model.num_conv):
        out, inp = plan.kept_out[l], plan.kept_in[l]
        small.params[f"conv{l}.weight"].data = src[f"conv{l}.weight"][np.ix_(out, inp)].copy()
        if f"conv{l}.bias" in small.params:
            small.params[f"conv{l}.bias"].data = src[f"conv{l}.bias"][out].copy()
        for name in ("weight", "bias"):
            small.params[f"bn{l}.{name}"].data = src[f"bn{l}.{name}"][out].copy()
        for name in ("running_mean", "running_var"):
            small.buffers[f"bn{l}.{name}"] = src[f"bn{l}.{name}"][out].copy()
    small.params["fc.weight"].data = src["fc.weight"][:, plan.fc_columns].copy()
    small.params["fc.bias"].data = src["fc.bias"].copy()
    return small


# ---------------------------------------------------------------- accounting


@dataclass
class LayerCost:
    layer: str
    kind: str
    params: int
    macs: int


@dataclass
class CostReport:
    layers: list = field(default_factory=list)

    @property
    def params(self):
        return sum(e.params for e in self.layers)

    @property
    def macs(self):
        return sum(e.macs for e in self.layers)

    def table(self):
        rows = [f"{'layer':<10} {'type':<9} {'params':>12} {'macs':>14}"]
        for e in self.layers:
            rows.append(f"{e.layer:<10} {e.kind:<9} {e.params:>12,} {e.macs:>14,}")
        rows.append(f"{'total':<10} {'':<9} {self.params:>12,} {self.macs:>14,}")
        return "\n".join(rows)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "type", "params", "macs"])
            for e in self.layers:
                w.writerow([e.layer, e.kind, e.params, e.macs])
            w.writerow(["total", "", self.params, self.macs])


def _walk(desc, input_shape=None):
    shape = tuple(input_shape or desc.input_shape)
    for b in desc.blocks:
        c, h, w = shape if len(shape) == 3 else (shape[0], 1, 1)
        if isinstance(b, Conv):
            ho = (h + 2 * b.padding - b.kernel) // b.stride + 1
            wo = (w + 2 * b.padding - b.kernel) // b.stride + 1
            new = (b.out_channels, ho, wo)
        elif isinstance(b, (MaxPool, AvgPool)):
            k = b.kernel if b.kernel is not None else h
            s = b.stride if b.stride is not None else k
            new = (c, (h - k) // s + 1, (w - k) // s + 1)
        elif isinstance(b, Flatten):
            new = (int(np.prod(shape)),)
        elif isinstance(b, Linear):
            new = (b.out_features,)
        else:
            raise UnsupportedArchitecture(f"unknown block {b!r}")
        yield b, shape, new
        shape = new


def cost_report(desc, input_shape=None, count_bn_macs=False):
    """Parameters and MACs per layer.

    conv: C_out C_in k^2 params (+C_out bias), k^2 C_in C_out H_out W_out MACs.
    BN: 2 C_out params (running statistics are buffers, not counted).
    linear: n_in n_out + n_out params, n_in n_out MACs. BN, ReLU and
    pooling contribute no MACs unless ``count_bn_macs`` is set, in which
    case BN adds 2 per output element.
    """
    if isinstance(desc, Model):
        desc = desc.desc
    rep = CostReport()
    l = 0
    for b, shape, new in _walk(desc, input_shape):
        if isinstance(b, Conv):
            c_in = shape[0]
            kk = b.kernel * b.kernel
            p = b.out_channels * c_in * kk + (b.out_channels if b.bias else 0)
            spatial = new[1] * new[2]
            rep.layers.append(LayerCost(f"conv{l}", "conv", p, kk * c_in * b.out_channels * spatial))
            bn_macs = 2 * b.out_channels * spatial if count_bn_macs else 0
            rep.layers.append(LayerCost(f"bn{l}", "bn", 2 * b.out_channels, bn_macs))
            l += 1
        elif isinstance(b, Linear):
            n_in = shape[0]
            rep.layers.append(LayerCost("fc", "linear", n_in * b.out_features + b.out_features,
                                        n_in * b.out_features))
        elif isinstance(b, (MaxPool, AvgPool)):
            rep.layers.append(LayerCost(f"pool{len(rep.layers)}", type(b).__name__.lower(), 0, 0))
    return rep


def count_params(desc_or_model):
    return cost_report(desc_or_model)


def count_flops(desc, input_shape=None, count_bn_macs=False):
    return cost_report(desc, input_shape, count_bn_macs)
