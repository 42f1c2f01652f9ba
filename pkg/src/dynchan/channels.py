"""Channel identity, masks, and per-layer floor repair.

Channels are addressed by ``ChannelId(layer, index)`` with both fields
zero-based: ``layer`` is the ordinal of the conv layer among conv layers
only, ``index`` the output channel within it. A registry fixes a flat,
deterministic order (layer-major) used by every bitvector in the package.
"""

import logging
from typing import NamedTuple

import numpy as np

from .errors import ConstraintError, ParseError

log = logging.getLogger(__name__)


class ChannelId(NamedTuple):
    layer: int
    index: int


def target_cardinality(total, p):
    """round-half-up of p * total."""
    if not 0 < p <= 1:
        raise ConstraintError(f"active fraction must be in (0, 1], got {p}")
    return min(total, int(np.floor(p * total + 0.5)))


class ChannelRegistry:
    def __init__(self, layer_sizes):
        self.layer_sizes = tuple(int(k) for k in layer_sizes)
        if any(k < 1 for k in self.layer_sizes):
            raise ValueError(f"every layer needs at least one channel: {self.layer_sizes}")
        self.offsets = np.concatenate([[0], np.cumsum(self.layer_sizes)]).astype(np.int64)
        self.ids = [ChannelId(l, k) for l, n in enumerate(self.layer_sizes) for k in range(n)]
        self.layer_of = np.repeat(np.arange(len(self.layer_sizes)), self.layer_sizes)

    @property
    def num_layers(self):
        return len(self.layer_sizes)

    def __len__(self):
        return int(self.offsets[-1])

    def __iter__(self):
        return iter(self.ids)

    def __eq__(self, other):
        return isinstance(other, ChannelRegistry) and self.layer_sizes == other.layer_sizes

    def __repr__(self):
        return f"ChannelRegistry({list(self.layer_sizes)})"

    def index_of(self, cid):
        l, k = cid
        if not (0 <= l < self.num_layers and 0 <= k < self.layer_sizes[l]):
            raise KeyError(f"{cid} not in {self!r}")
        return int(self.offsets[l] + k)

    def layer_slice(self, layer):
        return slice(int(self.offsets[layer]), int(self.offsets[layer + 1]))

    def split(self, values):
        """Cut a flat per-channel array into per-layer views."""
        values = np.asarray(values)
        return [values[self.layer_slice(l)] for l in range(self.num_layers)]


class ChannelMask:
    """Immutable activation bitvector over a registry (one step's super-arm)."""

    __slots__ = ("registry", "bits")

    def __init__(self, registry, bits):
        bits = np.array(bits, dtype=bool)
        if bits.shape != (len(registry),):
            raise ConstraintError(f"mask has {bits.size} bits, registry has {len(registry)} channels")
        bits.setflags(write=False)
        self.registry = registry
        self.bits = bits

    @classmethod
    def full(cls, registry):
        return cls(registry, np.ones(len(registry), dtype=bool))

    @property
    def popcount(self):
        return int(self.bits.sum())

    @property
    def active_fraction(self):
        return self.popcount / len(self.registry)

    @property
    def all_active(self):
        return bool(self.bits.all())

    def layer_bits(self):
        return self.registry.split(self.bits)

    def layer_counts(self):
        return [int(b.sum()) for b in self.layer_bits()]

    def active_ids(self):
        return [self.registry.ids[i] for i in np.flatnonzero(self.bits)]

    def __contains__(self, cid):
        return bool(self.bits[self.registry.index_of(cid)])

    def __eq__(self, other):
        return (isinstance(other, ChannelMask) and self.registry == other.registry
                and np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.registry.layer_sizes, self.bits.tobytes()))

    def __repr__(self):
        return f"ChannelMask({self.popcount}/{len(self.registry)} active, per layer {self.layer_counts()})"

    def to_rle(self):
        return encode_rle(self.bits)

    @classmethod
    def from_rle(cls, registry, text):
        return cls(registry, decode_rle(text, len(registry)))


def encode_rle(bits):
    """Run-length text: first bit value, then alternating run lengths.

    ``[1,1,0,1]`` encodes to ``"1:2,1,1"``.
    """
    bits = np.asarray(bits, dtype=bool)
    if bits.size == 0:
        return "0:"
    change = np.flatnonzero(np.diff(bits.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [bits.size]])
    runs = np.diff(bounds)
    return f"{int(bits[0])}:" + ",".join(str(int(r)) for r in runs)


def decode_rle(text, length=None):
    try:
        first, body = text.strip().split(":", 1)
        value = bool(int(first))
        runs = [int(r) for r in body.split(",")] if body else []
    except ValueError:
        raise ParseError(f"malformed run-length mask {text!r}") from None
    if any(r <= 0 for r in runs):
        raise ParseError(f"run lengths must be positive in {text!r}")
    out = []
    for r in runs:
        out.extend([value] * r)
        value = not value
    bits = np.array(out, dtype=bool)
    if length is not None and bits.size != length:
        raise ParseError(f"mask decodes to {bits.size} bits, expected {length}")
    return bits


def repair_selection(registry, bits, order, target=None, min_per_layer=1):
    """Fill up to ``target`` and enforce the per-layer floor, in place.

    ``order`` ranks every registry index from best to worst. Missing
    cardinality is filled with the best-ranked unselected channels. An
    under-populated layer gets its best-ranked unselected channel, paid for
    by evicting the globally lowest-ranked selected channel whose layer can
    spare one; when nothing can be evicted the mask grows instead.
    Returns the number of repair events.
    """
    order = np.asarray(order, dtype=np.int64)
    rank = np.empty(len(registry), dtype=np.int64)
    rank[order] = np.arange(order.size)
    layer_of = registry.layer_of
    repairs = 0

    if target is not None:
        for idx in order:
            if bits.sum() >= target:
                break
            if not bits[idx]:
                bits[idx] = True
                repairs += 1
                log.debug("cardinality repair: added channel %s", registry.ids[idx])

    counts = np.bincount(layer_of[bits], minlength=registry.num_layers)
    floors = np.minimum(min_per_layer, np.array(registry.layer_sizes))
    for layer in range(registry.num_layers):
        while counts[layer] < floors[layer]:
            sl = registry.layer_slice(layer)
            cand = np.flatnonzero(~bits[sl]) + sl.start
            insert = cand[np.argmin(rank[cand])]
            selected = np.flatnonzero(bits)
            spare = selected[counts[layer_of[selected]] > floors[layer_of[selected]]]
            bits[insert] = True
            counts[layer] += 1
            if spare.size:
                evict = spare[np.argmax(rank[spare])]
                bits[evict] = False
                counts[layer_of[evict]] -= 1
                log.info("floor repair: layer %d empty, swapped in %s for %s",
                         layer, registry.ids[insert], registry.ids[evict])
            else:
                log.info("floor repair: layer %d empty, added %s (nothing evictable)",
                         layer, registry.ids[insert])
            repairs += 1
    return repairs


def mask_from_selection(registry, selected, repair=False, ranking=None, target=None, min_per_layer=1):
    """Build a mask from a set of ChannelIds.

    With ``repair`` disabled, a layer left below ``min_per_layer`` is an
    error. With it enabled, ``ranking`` (best-first registry indices,
    defaulting to registry order) drives :func:`repair_selection`.
    Returns ``(mask, repairs)``.
    """
    bits = np.zeros(len(registry), dtype=bool)
    for cid in selected:
        try:
            bits[registry.index_of(cid)] = True
        except KeyError:
            raise ConstraintError(f"{cid} is not a registered channel") from None
    if not repair:
        counts = np.bincount(registry.layer_of[bits], minlength=registry.num_layers)
        for layer, n in enumerate(counts):
            if n < min(min_per_layer, registry.layer_sizes[layer]):
                raise ConstraintError(f"selection leaves conv layer {layer} with {n} active channels")
        if target is not None and bits.sum() != target:
            raise ConstraintError(f"selection has {int(bits.sum())} channels, target is {target}")
        return ChannelMask(registry, bits), 0
    if ranking is None:
        ranking = np.arange(len(registry))
    repairs = repair_selection(registry, bits, ranking, target, min_per_layer)
    return ChannelMask(registry, bits), repairs


def check_floor_feasible(registry, target, min_per_layer=1):
    need = sum(min(min_per_layer, k) for k in registry.layer_sizes)
    if target < need:
        raise ConstraintError(
            f"{target} active channels cannot give each of {registry.num_layers} layers {min_per_layer}")


def random_mask(registry, p, rng, min_per_layer=1, max_tries=100):
    """Uniform random mask of cardinality round(p * N) meeting the floor.

    Draws are rejected until one satisfies the floor; after ``max_tries``
    the last draw is repaired with a random ranking.
    Returns ``(mask, repairs)``.
    """
    n = len(registry)
    target = target_cardinality(n, p)
    check_floor_feasible(registry, target, min_per_layer)
    if target == n:
        return ChannelMask.full(registry), 0
    floors = np.minimum(min_per_layer, np.array(registry.layer_sizes))
    for _ in range(max_tries):
        bits = np.zeros(n, dtype=bool)
        bits[rng.choice(n, size=target, replace=False)] = True
        counts = np.bincount(registry.layer_of[bits], minlength=registry.num_layers)
        if np.all(counts >= floors):
            return ChannelMask(registry, bits), 0
    repairs = repair_selection(registry, bits, rng.permutation(n), target, min_per_layer)
    return ChannelMask(registry, bits), repairs
