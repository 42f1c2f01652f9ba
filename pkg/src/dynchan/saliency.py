"""First-order Taylor channel saliency, per-layer normalisation, and the
exact loss-delta oracle used to check it."""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .channels import ChannelId, ChannelMask
from .errors import ConstraintError, ShapeError


@dataclass
class SaliencyReport:
    """Normalised saliencies of the channels that were active at step ``t``.

    ``raw`` keeps the un-normalised values for logging.
    """

    t: int
    values: dict
    raw: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.values)

    def channels(self):
        return list(self.values)

    def by_layer(self):
        out = {}
        for cid, v in self.values.items():
            out.setdefault(cid.layer, {})[cid] = v
        return out


def taylor_saliency(h, grad_h):
    """|mean(grad_h * h)| over every element of one channel's feature map.

    Both arrays cover the whole batch (B x H x W), so the mean runs over
    the batch axis as well.
    """
    h = np.asarray(h)
    grad_h = np.asarray(grad_h)
    if h.shape != grad_h.shape:
        raise ShapeError("taylor_saliency", f"feature map {h.shape} vs gradient {grad_h.shape}")
    if h.size == 0:
        return 0.0
    return float(abs(np.mean(grad_h.astype(np.float64) * h)))


def layer_taylor_saliencies(h, grad_h):
    """Vectorised :func:`taylor_saliency` for every channel of an N x C x H x W tap."""
    if h.shape != grad_h.shape or h.ndim != 4:
        raise ShapeError("taylor_saliency", f"feature map {h.shape} vs gradient {grad_h.shape}")
    return np.abs((grad_h.astype(np.float64) * h).mean(axis=(0, 2, 3)))


def normalize_saliencies(raw, t=0):
    """Divide each value by the l2 norm of its layer's values.

    Layers whose values are all zero pass through unchanged.
    """
    groups = {}
    for cid, v in raw.items():
        groups.setdefault(cid.layer, []).append(cid)
    values = {}
    for layer, cids in groups.items():
        vec = np.array([raw[c] for c in cids], dtype=np.float64)
        norm = np.sqrt(np.sum(vec * vec))
        if norm > 0:
            vec = vec / norm
        for c, v in zip(cids, vec):
            values[c] = float(v)
    return SaliencyReport(t, values, dict(raw))


def raw_saliencies_from_taps(taps, mask):
    """Raw Taylor saliency of every active channel, read from retained taps."""
    raw = {}
    bits = mask.layer_bits()
    for layer, tap in sorted(taps.items()):
        if tap.grad is None:
            g = np.zeros_like(tap.data)
        else:
            g = tap.grad
        vals = layer_taylor_saliencies(tap.data, g)
        for k in np.flatnonzero(bits[layer]):
            raw[ChannelId(layer, int(k))] = float(vals[k])
    return raw


def saliency_report(taps, mask, t=0):
    return normalize_saliencies(raw_saliencies_from_taps(taps, mask), t)


def _batch_loss(model, x, y, gates, mode):
    from .model import forward

    with T.no_grad():
        logits = forward(model, x, gates=gates, mode=mode, update_stats=False)
        return float(T.softmax_cross_entropy(logits, y).data)


def oracle_saliency(model, x, y, mask, channel, mode="train"):
    """|L(batch, h = 0) - L(batch, h)| by two forward passes.

    Both passes use the same BN mode and never touch running statistics.
    """
    if channel not in mask:
        raise ConstraintError(f"channel {channel} is not active in the mask")
    base = [b.astype(np.float64) for b in mask.layer_bits()]
    off = [g.copy() for g in base]
    off[channel.layer][channel.index] = 0.0
    return abs(_batch_loss(model, x, y, off, mode) - _batch_loss(model, x, y, base, mode))


def oracle_saliencies(model, x, y, mask, mode="train"):
    """Oracle saliency for every active channel, keyed by ChannelId."""
    base = [b.astype(np.float64) for b in mask.layer_bits()]
    ref = _batch_loss(model, x, y, base, mode)
    out = {}
    for cid in mask.active_ids():
        gates = [g.copy() for g in base]
        gates[cid.layer][cid.index] = 0.0
        out[cid] = abs(_batch_loss(model, x, y, gates, mode) - ref)
    return out


def taylor_saliencies(model, x, y, mask=None, mode="train", loss_scale=1.0):
    """Raw Taylor saliencies from one forward/backward pass (no weight update)."""
    from .model import forward

    if mask is None:
        mask = ChannelMask.full(model.registry)
    taps = {}
    logits = forward(model, x, mask, mode=mode, update_stats=False, taps=taps)
    loss = T.softmax_cross_entropy(logits, y)
    if loss_scale != 1.0:
        loss = T.mul_scalar(loss, loss_scale)
    T.backward(loss)
    raw = raw_saliencies_from_taps(taps, mask)
    model.zero_grad()
    return raw


def write_saliency_rows(path, reports, append=False):
    """CSV rows (t, l, k, raw, normalized) for each report."""
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["t", "l", "k", "raw", "normalized"])
        for rep in reports:
            for cid, v in rep.values.items():
                w.writerow([rep.t, cid.layer, cid.index, repr(rep.raw.get(cid, float("nan"))), repr(v)])
