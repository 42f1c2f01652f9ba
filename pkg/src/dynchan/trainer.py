"""Training pipelines: CUCB two-stage, single-stage freeze, random ablation."""

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .arch import get_descriptor
from .bandit import BanditState, final_selection, init_exploration, select_superarm, update
from .channels import ChannelMask, random_mask, target_cardinality
from .data import BatchIterator, load_dataset, normalize
from .errors import ConfigError, NumericError
from .model import DTYPES, build_model, forward, predict
from .saliency import saliency_report
from .surgeon import cost_report, extract_compact

log = logging.getLogger(__name__)

STEP_COLUMNS = ["stage", "epoch", "t", "loss", "lr", "active", "repairs"]
EPOCH_COLUMNS = ["stage", "epoch", "train_acc", "test_acc"]


@dataclass
class TrainConfig:
    dataset: str = "mnist5k"
    arch: str = "desk"
    p: float = 0.4
    batch_size: int = 64
    epochs: int = 20
    finetune_epochs: int = -1       # -1: same as epochs
    lr0: float = 0.1
    lr_drop_at: tuple = (0.5, 0.75)
    lr_drop_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    selection: str = "cucb"         # cucb | random
    pipeline: str = "two-stage"     # two-stage | single-stage
    freeze_epoch: int = 40
    init_strategy: str = "per-channel"  # per-channel | cover
    precision: str = "float32"
    min_per_layer: int = 1
    augment: str = "auto"           # auto | on | off; auto augments 32x32 inputs only
    train_per_class: int = 0        # 0 keeps the whole training split
    data_dir: str = ""
    saliency_dump: bool = False

    def validate(self):
        if not 0 < self.p <= 1:
            raise ConfigError(f"p must be in (0, 1], got {self.p}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.selection not in ("cucb", "random"):
            raise ConfigError(f"selection must be cucb or random, got {self.selection!r}")
        if self.pipeline not in ("two-stage", "single-stage"):
            raise ConfigError(f"pipeline must be two-stage or single-stage, got {self.pipeline!r}")
        if self.pipeline == "single-stage" and not 0 <= self.freeze_epoch < self.epochs:
            raise ConfigError(f"freeze_epoch {self.freeze_epoch} must be in [0, epochs={self.epochs})")
        if self.init_strategy not in ("per-channel", "cover"):
            raise ConfigError(f"init_strategy must be per-channel or cover, got {self.init_strategy!r}")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}")
        if self.augment not in ("auto", "on", "off"):
            raise ConfigError(f"augment must be auto, on or off, got {self.augment!r}")
        if len(self.lr_drop_at) != 2:
            raise ConfigError("lr_drop_at needs exactly two fractions")
        return self

    @property
    def dtype(self):
        return DTYPES[self.precision]

    @property
    def finetune_budget(self):
        return self.epochs if self.finetune_epochs < 0 else self.finetune_epochs

    def as_dict(self):
        return asdict(self)

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}


def lr_at(epoch, cfg, total=None):
    """lr0 divided by the drop factor once at each drop fraction of ``total`` epochs."""
    total = cfg.epochs if total is None else total
    drops = sum(epoch >= frac * total for frac in cfg.lr_drop_at)
    return cfg.lr0 / cfg.lr_drop_factor ** drops


class SGD:
    """SGD with Nesterov momentum, no dampening, coupled weight decay.

    Per parameter: ``d = g + wd * w; v = mu * v + d; w -= lr * (d + mu * v)``.
    ``step`` takes optional boolean masks; masked-out entries keep their
    weight and momentum exactly.
    """

    def __init__(self, params, lr=0.1, momentum=0.9, weight_decay=1e-4):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, masks=None):
        mu, wd, lr = self.momentum, self.weight_decay, self.lr
        for name, p in self.params.items():
            if p.grad is None:
                continue
            w = p.data
            d = p.grad + wd * w if wd else p.grad
            v = mu * self.buffers[name] + d
            new_w = w - lr * (d + mu * v)
            m = None if masks is None else masks.get(name)
            if m is None:
                self.buffers[name] = v.astype(w.dtype, copy=False)
                p.data = new_w.astype(w.dtype, copy=False)
            else:
                self.buffers[name] = np.where(m, v, self.buffers[name]).astype(w.dtype, copy=False)
                p.data = np.where(m, new_w, w).astype(w.dtype, copy=False)


def train_step(model, opt, x, y, mask=None, t=0, want_report=True):
    """One forward/backward/update on the thin network selected by ``mask``.

    Saliencies are read from the taps before the weights move. Returns
    ``(loss, report_or_None, correct)``.
    """
    taps = {} if want_report else None
    logits = forward(model, x, mask, mode="train", taps=taps)
    loss = T.softmax_cross_entropy(logits, y)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step t={t}")
    T.backward(loss)
    report = None
    if want_report:
        if mask is None:
            mask = ChannelMask.full(model.registry)
        report = saliency_report(taps, mask, t)
    opt.step(model.update_masks(mask))
    model.zero_grad()
    correct = int((logits.data.argmax(axis=1) == y).sum())
    return value, report, correct


def accuracy(model, ds, mask=None):
    if len(ds) == 0:
        return float("nan")
    logits = predict(model, ds.images, mask)
    return float((logits.argmax(axis=1) == ds.labels).mean())


@dataclass
class RunRecord:
    config: dict
    step_rows: list = field(default_factory=list)
    epoch_rows: list = field(default_factory=list)
    saliency_rows: list = field(default_factory=list)
    final_accuracy: float = float("nan")
    wall_clock: float = 0.0
    state: BanditState = None
    final_mask: ChannelMask = None
    phase_a_model: object = None
    final_model: object = None
    baseline_cost: object = None
    final_cost: object = None

    def log_step(self, stage, epoch, t, loss, lr, active, repairs):
        if self.step_rows and t <= self.step_rows[-1][2]:
            raise RuntimeError(f"step counter went backwards: {t} after {self.step_rows[-1][2]}")
        self.step_rows.append((stage, epoch, t, loss, lr, active, repairs))

    def log_epoch(self, stage, epoch, train_acc, test_acc):
        self.epoch_rows.append((stage, epoch, train_acc, test_acc))
        log.info("%s epoch %d: train %.4f test %.4f", stage, epoch, train_acc, test_acc)

    def write_step_csv(self, path):
        _write_csv(path, STEP_COLUMNS, self.step_rows)

    def write_epoch_csv(self, path):
        _write_csv(path, EPOCH_COLUMNS, self.epoch_rows)

    def summary(self):
        base, fin = self.baseline_cost, self.final_cost
        return {
            "final_accuracy": self.final_accuracy,
            "params": fin.params if fin else None,
            "macs": fin.macs if fin else None,
            "params_pct_baseline": 100.0 * fin.params / base.params if fin and base else None,
            "macs_pct_baseline": 100.0 * fin.macs / base.macs if fin and base else None,
            "active_channels": self.final_mask.popcount if self.final_mask else None,
            "total_channels": len(self.final_mask.registry) if self.final_mask else None,
            "wall_clock_s": self.wall_clock,
        }


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def prepare_data(cfg):
    """Load and normalise train/test splits; test uses training statistics."""
    train = load_dataset(cfg.dataset, "train", cfg.data_dir or None)
    test = load_dataset(cfg.dataset, "test", cfg.data_dir or None)
    if cfg.train_per_class:
        from .data import class_balanced_subset
        train = class_balanced_subset(train, cfg.train_per_class)
    train = normalize(train, dtype=cfg.dtype)
    test = normalize(test, train.mean, train.std, dtype=cfg.dtype)
    return train, test


class _Run:
    """Shared mutable state of one pipeline invocation."""

    def __init__(self, cfg, train_ds, test_ds):
        self.cfg = cfg.validate()
        self.train_ds, self.test_ds = train_ds, test_ds
        desc = get_descriptor(cfg.arch, train_ds.num_classes, train_ds.shape)
        self.model = build_model(desc, cfg.seed, cfg.dtype)
        self.registry = self.model.registry
        aug = cfg.augment == "on" or (cfg.augment == "auto" and train_ds.shape[1:] == (32, 32))
        self.batches = BatchIterator(train_ds, cfg.batch_size, seed=cfg.seed + 1, augment=aug)
        self.stream = self.batches.forever()
        self.mask_rng = np.random.default_rng(cfg.seed + 2)
        self.record = RunRecord(cfg.as_dict())
        self.record.baseline_cost = cost_report(desc)
        self.step = 0

    def next_step(self):
        self.step += 1
        return self.step

    def step_on(self, model, opt, stage, epoch, x, y, mask, repairs, t, want_report):
        loss, report, correct = train_step(model, opt, x, y, mask, t, want_report)
        active = 1.0 if mask is None else mask.active_fraction
        self.record.log_step(stage, epoch, t, loss, opt.lr, active, repairs)
        if report is not None and self.cfg.saliency_dump:
            for cid, v in report.values.items():
                self.record.saliency_rows.append((t, cid.layer, cid.index, report.raw[cid], v))
        return report, correct

    def explore(self, opt):
        """Coverage phase; returns the initial bandit state."""
        def run_step(mask, repairs):
            x, y, _ = next(self.stream)
            report, _ = self.step_on(self.model, opt, "init", 0, x, y, mask, repairs,
                                     self.next_step(), True)
            return report

        state = init_exploration(self.registry, self.cfg.p, run_step, self.cfg.init_strategy,
                                 self.mask_rng, self.cfg.min_per_layer)
        self.step = max(self.step, state.t)
        return state

    def dynamic_epochs(self, opt, state, epochs, total_epochs):
        """Epochs of per-step selection (CUCB or random) followed by bandit updates."""
        cfg = self.cfg
        eval_mask = None
        for epoch in range(epochs):
            opt.lr = lr_at(epoch, cfg, total_epochs)
            correct = seen = 0
            for x, y, _ in self.batches.epoch():
                if cfg.p >= 1:
                    mask, repairs, t = None, 0, self.next_step()
                elif cfg.selection == "cucb":
                    t = state.advance()
                    self.step = t
                    mask, repairs = select_superarm(state, self.registry, cfg.p, cfg.min_per_layer)
                else:
                    t = state.advance()
                    self.step = t
                    mask, repairs = random_mask(self.registry, cfg.p, self.mask_rng, cfg.min_per_layer)
                report, c = self.step_on(self.model, opt, "dynamic", epoch, x, y, mask, repairs, t,
                                         mask is not None)
                if report is not None:
                    update(state, report, mask)
                correct += c
                seen += len(y)
                eval_mask = mask
            if cfg.p < 1 and cfg.selection == "cucb":
                eval_mask, _ = final_selection(state, self.registry, cfg.p, cfg.min_per_layer)
            self.record.log_epoch("dynamic", epoch, correct / max(seen, 1),
                                  accuracy(self.model, self.test_ds, eval_mask))

    def plain_epochs(self, model, opt, stage, epochs, mask=None, start_epoch=0, total_epochs=None):
        """Ordinary training on a fixed topology (compact model or frozen mask)."""
        acc = float("nan")
        for epoch in range(start_epoch, start_epoch + epochs):
            opt.lr = lr_at(epoch, self.cfg, total_epochs)
            correct = seen = 0
            for x, y, _ in self.batches.epoch():
                _, c = self.step_on(model, opt, stage, epoch, x, y, mask, 0, self.next_step(), False)
                correct += c
                seen += len(y)
            acc = accuracy(model, self.test_ds, mask)
            self.record.log_epoch(stage, epoch, correct / max(seen, 1), acc)
        return acc

    def choose_final(self, state):
        cfg = self.cfg
        if cfg.p >= 1:
            return ChannelMask.full(self.registry), 0
        if cfg.selection == "cucb":
            return final_selection(state, self.registry, cfg.p, cfg.min_per_layer)
        return random_mask(self.registry, cfg.p, self.mask_rng, cfg.min_per_layer)

    def new_opt(self, model):
        cfg = self.cfg
        return SGD(model.params, cfg.lr0, cfg.momentum, cfg.weight_decay)


def _start(cfg, train_ds, test_ds):
    if train_ds is None or test_ds is None:
        train_ds, test_ds = prepare_data(cfg)
    return _Run(cfg, train_ds, test_ds)


def _phase_a(run):
    opt = run.new_opt(run.model)
    state = BanditState.fresh(len(run.registry))
    if run.cfg.p < 1:
        opt.lr = lr_at(0, run.cfg)
        state = run.explore(opt)
    return opt, state


def run_two_stage(cfg, train_ds=None, test_ds=None):
    """Dynamic-selection training, final selection, compact extraction, fine-tune."""
    t0 = time.perf_counter()
    run = _start(cfg, train_ds, test_ds)
    opt, state = _phase_a(run)
    run.dynamic_epochs(opt, state, cfg.epochs, cfg.epochs)
    rec = run.record
    rec.state = state
    rec.phase_a_model = run.model.copy()

    final_mask, repairs = run.choose_final(state)
    rec.final_mask = final_mask
    compact = extract_compact(run.model, final_mask)
    rec.final_cost = cost_report(compact.desc)
    log.info("final selection: %r (%d repairs)", final_mask, repairs)

    budget = cfg.finetune_budget
    rec.final_accuracy = run.plain_epochs(compact, run.new_opt(compact), "finetune", budget,
                                          total_epochs=budget)
    if budget == 0:
        rec.final_accuracy = accuracy(compact, run.test_ds)
    rec.final_model = compact
    rec.wall_clock = time.perf_counter() - t0
    return rec


def run_random_baseline(cfg, train_ds=None, test_ds=None):
    """Two-stage pipeline with uniformly random masks during training and at the end."""
    from dataclasses import replace
    return run_two_stage(replace(cfg, selection="random"), train_ds, test_ds)


def run_single_stage(cfg, train_ds=None, test_ds=None):
    """Dynamic selection for ``freeze_epoch`` epochs, then freeze the topology in place.

    Training continues on the same model, optimizer and LR schedule.
    """
    t0 = time.perf_counter()
    if cfg.pipeline != "single-stage":
        from dataclasses import replace
        cfg = replace(cfg, pipeline="single-stage")
    run = _start(cfg, train_ds, test_ds)
    opt, state = _phase_a(run)
    run.dynamic_epochs(opt, state, cfg.freeze_epoch, cfg.epochs)
    rec = run.record
    rec.state = state
    rec.phase_a_model = run.model.copy()

    final_mask, repairs = run.choose_final(state)
    rec.final_mask = final_mask
    frozen = None if final_mask.all_active else final_mask
    rec.final_accuracy = run.plain_epochs(run.model, opt, "frozen", cfg.epochs - cfg.freeze_epoch, frozen,
                                          start_epoch=cfg.freeze_epoch, total_epochs=cfg.epochs)
    compact = extract_compact(run.model, final_mask)
    rec.final_model = compact
    rec.final_cost = cost_report(compact.desc)
    rec.wall_clock = time.perf_counter() - t0
    return rec


def run_pipeline(cfg, train_ds=None, test_ds=None):
    if cfg.pipeline == "single-stage":
        return run_single_stage(cfg, train_ds, test_ds)
    return run_two_stage(cfg, train_ds, test_ds)
