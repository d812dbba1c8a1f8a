"""Training loop: Adam, validation-driven annealing, three-strikes stopping, checkpoints."""
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import numerics
from .audio import AugmentConfig
from .checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from .corpus import BatchSampler, iter_frames
from .errors import ConfigError, CorpusError, NonFiniteLossError
from .flow import nll_per_dim

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_nll", "val_nll", "lr", "seconds")


@dataclass
class TrainConfig:
    """Optimisation settings. Full-size runs used batch_size=114."""

    lr: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 999
    patience: int = 10
    anneal_factor: float = 5.0
    max_anneals: int = 3
    seed: int = 0
    grad_clip: float = None
    eval_batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size, patience must be >= 1 and max_epochs >= 0")
        if self.anneal_factor <= 1:
            raise ConfigError("anneal_factor must exceed 1")


@dataclass
class TrainState:
    initial_lr: float = 1e-4
    epoch: int = 0
    best_val_nll: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    anneal_count: int = 0
    current_lr: float = 1e-4
    stopped: bool = False
    rng_state: dict = field(default=None, repr=False)

    @classmethod
    def fresh(cls, lr):
        return cls(initial_lr=lr, current_lr=lr)

    def to_dict(self):
        return asdict(self)


class AnnealSchedule:
    """Anneal by ``factor`` after ``patience`` epochs without strict improvement;
    stop at the ``max_anneals``-th anneal. The stagnation counter resets on anneal."""

    def __init__(self, patience=10, factor=5.0, max_anneals=3):
        self.patience = patience
        self.factor = factor
        self.max_anneals = max_anneals

    def update(self, state, val_nll):
        """Record one epoch's validation NLL; returns 'improved', 'stagnant', 'anneal' or 'stop'."""
        if val_nll < state.best_val_nll:
            state.best_val_nll = val_nll
            state.best_epoch = state.epoch
            state.epochs_since_improvement = 0
            return "improved"
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement < self.patience:
            return "stagnant"
        state.anneal_count += 1
        state.epochs_since_improvement = 0
        state.current_lr = state.initial_lr / self.factor ** state.anneal_count
        if state.anneal_count >= self.max_anneals:
            state.stopped = True
            return "stop"
        return "anneal"


@torch.no_grad()
def evaluate_nll(model, index, batch_size=64):
    """Mean log-likelihood in nats/dim over every frame of ``index`` (higher is better)."""
    if len(index) == 0:
        raise CorpusError(f"cannot evaluate on empty split {index.split!r}")
    dtype = next(model.parameters()).dtype
    total, count = 0.0, 0
    for x, y in iter_frames(index, batch_size, dtype=dtype):
        _, report = model(x, y)
        total += report.per_dim.double().sum().item()
        count += len(y)
    return total / count


def _write_history(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in HISTORY_FIELDS})


def _read_history(path):
    if not Path(path).is_file():
        return []
    with open(path) as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def init_actnorm(model, index, cfg, augment_cfg):
    """Initialise every ActNorm from one augmented batch drawn with its own RNG stream."""
    rng = np.random.default_rng([cfg.seed, 1])
    dtype = next(model.parameters()).dtype
    batch = BatchSampler(index, cfg.batch_size, augment_cfg, rng, dtype).next_batch()
    model.initialize_actnorm(batch.x, batch.speakers)


def train(model, train_index, valid_index, cfg=None, augment_cfg=None, outdir=None,
          speakers=None, resume=False, timing=True):
    """Train ``model`` in place and return the list of per-epoch history rows.

    With ``outdir`` set, writes ``last.ckpt``, ``best.ckpt`` and ``history.csv`` there.
    ``timing=False`` records zero seconds so repeated runs write identical files.
    """
    cfg = cfg or TrainConfig()
    augment_cfg = augment_cfg if augment_cfg is not None else AugmentConfig(rng_seed=cfg.seed)
    speakers = speakers or [str(i) for i in range(model.cfg.n_speakers)]
    train_index.corpus.check_disjoint()
    outdir = Path(outdir) if outdir else None
    if outdir:
        outdir.mkdir(parents=True, exist_ok=True)

    state = TrainState.fresh(cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    optimizer = numerics.make_adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = []
    if resume and outdir and (outdir / "last.ckpt").is_file():
        ckpt = load_checkpoint(outdir / "last.ckpt", expected_config=model.cfg)
        model.load_state_dict(ckpt.model.state_dict())
        restore_optimizer(model, optimizer, ckpt.optimizer_state)
        state = TrainState(**ckpt.train_state)
        rng.bit_generator.state = state.rng_state
        history = _read_history(outdir / "history.csv")[:state.epoch]
        log.info("resumed at epoch %d, lr %.3g", state.epoch, state.current_lr)
    elif not model.initialized:
        init_actnorm(model, train_index, cfg, augment_cfg)

    schedule = AnnealSchedule(cfg.patience, cfg.anneal_factor, cfg.max_anneals)
    dtype = next(model.parameters()).dtype
    sampler = BatchSampler(train_index, cfg.batch_size, augment_cfg, rng, dtype)

    while not state.stopped and state.epoch < cfg.max_epochs:
        t0 = time.perf_counter()
        model.train()
        total, count = 0.0, 0
        for batch in sampler.epoch():
            loss = nll_per_dim(model, batch.x, batch.speakers)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            numerics.adam_step(optimizer, state.current_lr)
            total += loss.item() * len(batch.speakers)
            count += len(batch.speakers)
        model.eval()
        val_nll = -evaluate_nll(model, valid_index, cfg.eval_batch_size)
        if not math.isfinite(val_nll):
            if outdir:
                save_checkpoint(outdir / "diverged.ckpt", model, speakers, state.to_dict(), seed=cfg.seed)
            raise NonFiniteLossError(f"validation NLL is {val_nll} at epoch {state.epoch + 1}")
        state.epoch += 1
        lr_used = state.current_lr
        event = schedule.update(state, val_nll)
        state.rng_state = rng.bit_generator.state
        row = dict(epoch=state.epoch, train_nll=total / count, val_nll=val_nll, lr=lr_used,
                   seconds=round(time.perf_counter() - t0, 3) if timing else 0.0)
        history.append(row)
        log.info("epoch %d train %.4f val %.4f lr %.2e %s", state.epoch, row["train_nll"], val_nll,
                 lr_used, event)
        if outdir:
            if event == "improved":
                save_checkpoint(outdir / "best.ckpt", model, speakers, state.to_dict(), seed=cfg.seed)
            save_checkpoint(outdir / "last.ckpt", model, speakers, state.to_dict(), optimizer, seed=cfg.seed)
            _write_history(outdir / "history.csv", history)
    model.train_state = state
    return history


def write_config_echo(path, config):
    Path(path).write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")
