"""CUCB over convolutional channels.

Each channel is an arm and a step's active set is the super-arm. The state
keeps, per channel, the activation count and the running mean of observed
normalised saliencies, plus the global step counter.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .channels import (ChannelMask, ChannelRegistry, check_floor_feasible, repair_selection,
                       target_cardinality)
from .errors import ConstraintError

log = logging.getLogger(__name__)


@dataclass
class BanditState:
    counts: np.ndarray
    means: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, n):
        return cls(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.float64), 0)

    def copy(self):
        return BanditState(self.counts.copy(), self.means.copy(), self.t)

    def advance(self):
        """Start a new training step."""
        self.t += 1
        return self.t

    @property
    def initialized(self):
        return bool(self.counts.size) and int(self.counts.min()) >= 1


def adjusted_saliency(mu_hat, T, t):
    """mu_hat + sqrt(3 ln t / (2 T)). Works elementwise on arrays."""
    T_arr = np.asarray(T)
    if np.any(T_arr < 1):
        raise ConstraintError("adjusted saliency needs every channel activated at least once")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1):
        raise ConstraintError(f"step counter must be >= 1, got {t}")
    bonus = np.sqrt(3.0 * np.log(t_arr) / (2.0 * T_arr))
    out = np.asarray(mu_hat, dtype=np.float64) + bonus
    return float(out) if out.ndim == 0 else out


def rank_channels(scores, counts):
    """Registry indices best-first: higher score, then lower count, then lower index."""
    idx = np.arange(len(scores))
    return np.lexsort((idx, counts, -np.asarray(scores, dtype=np.float64)))


def _top(registry, order, p, min_per_layer):
    target = target_cardinality(len(registry), p)
    check_floor_feasible(registry, target, min_per_layer)
    bits = np.zeros(len(registry), dtype=bool)
    bits[order[:target]] = True
    repairs = repair_selection(registry, bits, order, target, min_per_layer)
    return ChannelMask(registry, bits), repairs


def select_superarm(state, registry, p, min_per_layer=1):
    """Top round(p N) channels by adjusted saliency, then floor repair.

    Returns ``(mask, repairs)``.
    """
    scores = adjusted_saliency(state.means, state.counts, state.t)
    return _top(registry, rank_channels(scores, state.counts), p, min_per_layer)


def final_selection(state, registry, p, min_per_layer=1):
    """Top round(p N) channels by mean saliency alone, then floor repair."""
    return _top(registry, rank_channels(state.means, state.counts), p, min_per_layer)


def update(state, report, mask):
    """Fold one step's normalised saliencies into counts and running means.

    Channels missing from the report are left untouched.
    """
    registry = mask.registry
    for cid, value in report.values.items():
        if cid not in mask:
            raise ConstraintError(f"report contains {cid}, which was not active this step")
        i = registry.index_of(cid)
        state.counts[i] += 1
        state.means[i] += (value - state.means[i]) / state.counts[i]


def update_indices(state, indices, values):
    """Array form of :func:`update` for flat registry indices."""
    for i, v in zip(indices, values):
        state.counts[i] += 1
        state.means[i] += (v - state.means[i]) / state.counts[i]


def exploration_masks(registry, p, strategy, rng, min_per_layer=1):
    """Masks for the coverage phase; every channel appears in at least one.

    ``per-channel`` yields one mask per channel, containing it plus a random
    fill. ``cover`` shuffles the channels and packs not-yet-covered ones
    first, needing roughly ceil(1 / p) masks.
    """
    n = len(registry)
    target = target_cardinality(n, p)
    check_floor_feasible(registry, target, min_per_layer)
    if strategy == "per-channel":
        for i in range(n):
            others = rng.permutation(np.delete(np.arange(n), i))
            order = np.concatenate([[i], others])
            bits = np.zeros(n, dtype=bool)
            bits[order[:target]] = True
            repairs = repair_selection(registry, bits, order, target, min_per_layer)
            yield ChannelMask(registry, bits), repairs
    elif strategy == "cover":
        covered = np.zeros(n, dtype=bool)
        while not covered.all():
            fresh = rng.permutation(np.flatnonzero(~covered))
            old = rng.permutation(np.flatnonzero(covered))
            order = np.concatenate([fresh, old])
            bits = np.zeros(n, dtype=bool)
            bits[order[:target]] = True
            repairs = repair_selection(registry, bits, order, target, min_per_layer)
            covered |= bits
            yield ChannelMask(registry, bits), repairs
    else:
        raise ValueError(f"unknown init strategy {strategy!r}")


def init_exploration(registry, p, run_step, strategy="per-channel", rng=None, min_per_layer=1):
    """Activate every channel at least once and seed counts and means.

    ``run_step(mask, repairs)`` must execute one real thin-network training step and
    return its :class:`SaliencyReport`. Afterwards ``t`` equals the number of
    channels, whatever the number of steps actually taken.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    state = BanditState.fresh(len(registry))
    steps = 0
    for mask, repairs in exploration_masks(registry, p, strategy, rng, min_per_layer):
        report = run_step(mask, repairs)
        update(state, report, mask)
        steps += 1
    state.t = len(registry)
    log.info("init exploration (%s): %d steps, t=%d", strategy, steps, state.t)
    return state


def write_selection_report(path, state, registry, final_mask):
    """CSV rows (l, k, T, mu_hat, mu_bar_at_final_t, selected_final)."""
    mu_bar = adjusted_saliency(state.means, np.maximum(state.counts, 1), max(state.t, 1))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["l", "k", "T", "mu_hat", "mu_bar_at_final_t", "selected_final"])
        for i, cid in enumerate(registry.ids):
            w.writerow([cid.layer, cid.index, int(state.counts[i]), repr(float(state.means[i])),
                        repr(float(mu_bar[i])), int(final_mask.bits[i])])


# ---------------------------------------------------------------- simulation


@dataclass
class ArmEnvironment:
    """Independent arms with Gaussian noise clipped to [0, 1]."""

    means: np.ndarray
    sigma: float = 0.1
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def pull(self, arms):
        arms = np.asarray(arms)
        mu = np.asarray(self.means)[arms]
        if self.sigma == 0:
            return mu.astype(np.float64)
        return np.clip(mu + self.sigma * self.rng.standard_normal(mu.shape), 0.0, 1.0)


@dataclass
class SimulationTrace:
    chosen: np.ndarray          # steps x cardinality, arm indices, sorted
    state: BanditState
    init_sets: list

    def final_top(self, k):
        order = rank_channels(self.state.means, self.state.counts)
        return set(int(i) for i in order[:k])

    def frequencies(self, n_arms):
        return np.bincount(self.chosen.reshape(-1), minlength=n_arms) / max(len(self.chosen), 1)


def simulate_cucb(env, n_arms, cardinality, steps, seed=0):
    """Run the same init / select / update path against synthetic rewards."""
    if not 0 < cardinality < n_arms:
        raise ValueError(f"cardinality must be in (0, {n_arms}), got {cardinality}")
    rng = np.random.default_rng(seed)
    registry = ChannelRegistry([n_arms])
    p = cardinality / n_arms

    state = BanditState.fresh(n_arms)
    init_sets = []
    for mask, _ in exploration_masks(registry, p, "per-channel", rng):
        arms = np.flatnonzero(mask.bits)
        update_indices(state, arms, env.pull(arms))
        init_sets.append(arms)
    state.t = n_arms

    chosen = np.zeros((steps, cardinality), dtype=np.int64)
    for s in range(steps):
        state.advance()
        mask, _ = select_superarm(state, registry, p)
        arms = np.flatnonzero(mask.bits)
        update_indices(state, arms, env.pull(arms))
        chosen[s] = arms
    return SimulationTrace(chosen, state, init_sets)
