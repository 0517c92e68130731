"""Adam training loop for canonical models over four task variants.

Tasks and the candidate sets they induce:

``supervised``
    x = input vector, S = every class label.
``next_token``
    x = the previous ``context`` tokens, S = the whole vocabulary.
``contrastive``
    x = a top patch, S = every bottom patch in the minibatch.
``npair``
    as ``contrastive`` but with a shared encoder (g = f).
"""

import csv
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import LabeledDataset, PatchPairSet, TokenCorpus
from .model import CandidateBatch, nll, nll_and_grads

TASKS = ("supervised", "contrastive", "next_token", "npair")
TEACHER_LR = 1e-4
STUDENT_LR = 3e-4


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss. `trace` holds everything up to then."""

    def __init__(self, message, trace, iteration):
        super().__init__(message)
        self.trace = trace
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = STUDENT_LR
    max_iters: int = 20_000
    batch_size: int = 256
    early_stop_patience: int | None = 10
    eval_interval: int = 500
    seed: int = 0
    task: str = "supervised"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    val_fraction: float = 0.1
    keep_checkpoints: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_iters < 1 or self.eval_interval < 1:
            raise ValueError("batch_size, max_iters and eval_interval must be positive")
        if self.task in ("contrastive", "npair") and self.batch_size < 2:
            raise ValueError("contrastive tasks need batch_size >= 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainTrace:
    iterations: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)  # iteration -> CanonicalModel
    losses: list = field(default_factory=list)  # every minibatch loss
    best_iteration: int | None = None
    stopped_early: bool = False

    def record(self, iteration, train_loss, val_loss):
        if self.iterations and iteration <= self.iterations[-1]:
            raise ValueError("trace iterations must be strictly increasing")
        self.iterations.append(iteration)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "train_loss", "val_loss"])
            for row in zip(self.iterations, self.train_loss, self.val_loss):
                writer.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])


def adam_step(params, grads, state, step, config):
    """One bias-corrected Adam update.

    `state` is ``{"m": {...}, "v": {...}}`` or ``None`` (fresh); `step` counts
    from 1. Nothing is modified in place.
    """
    if state is None:
        state = {"m": {k: np.zeros_like(v) for k, v in params.items()},
                 "v": {k: np.zeros_like(v) for k, v in params.items()}}
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.epsilon
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * state["m"][k] + (1.0 - b1) * g
        v = b2 * state["v"][k] + (1.0 - b2) * g * g
        new_params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k] = m
        new_v[k] = v
    return new_params, {"m": new_m, "v": new_v}


# ---------------------------------------------------------------------------
# Candidate construction
# ---------------------------------------------------------------------------


def build_candidates(task, batch, alphabet=None):
    """Turn a raw minibatch into a :class:`CandidateBatch`.

    `batch` is ``(inputs, labels)`` for supervised / next-token tasks and
    ``(anchors, positives)`` for contrastive / npair tasks. `alphabet` is the
    label count (or label array) and is required for the former.
    """
    inputs, targets = batch
    n = len(inputs)
    if n == 0:
        raise ValueError("batch must be non-empty")
    if task in ("supervised", "next_token"):
        if alphabet is None:
            raise ValueError(f"task {task!r} needs a label alphabet")
        pool = np.arange(alphabet) if np.isscalar(alphabet) else np.asarray(alphabet)
        lookup = {int(v): i for i, v in enumerate(pool)}
        positives = np.array([lookup[int(t)] for t in targets])
        mask = np.ones((n, len(pool)), dtype=bool)
        return CandidateBatch(np.asarray(inputs), pool, mask, positives)
    if task in ("contrastive", "npair"):
        mask = np.ones((n, n), dtype=bool)
        return CandidateBatch(np.asarray(inputs), np.asarray(targets), mask, np.arange(n))
    raise ValueError(f"unknown task {task!r}")


def _adapter(task, dataset):
    """Return ``(n_examples, fetch(idx) -> raw batch, alphabet)``."""
    if task == "supervised":
        if not isinstance(dataset, LabeledDataset):
            raise TypeError("supervised task needs a LabeledDataset")
        return len(dataset), lambda idx: (dataset.inputs[idx], dataset.labels[idx]), dataset.n_classes
    if task == "next_token":
        if not isinstance(dataset, TokenCorpus):
            raise TypeError("next_token task needs a TokenCorpus")
        return len(dataset), dataset.examples, dataset.vocab
    if task in ("contrastive", "npair"):
        if not isinstance(dataset, PatchPairSet):
            raise TypeError(f"{task} task needs a PatchPairSet")
        return len(dataset), lambda idx: (dataset.top[idx], dataset.bottom[idx]), None
    raise ValueError(f"unknown task {task!r}")


def task_batches(task, dataset, idx, batch_size):
    """Deterministic evaluation batches over `idx` (consecutive chunks)."""
    _, fetch, alphabet = _adapter(task, dataset)
    idx = np.asarray(idx)
    if task in ("supervised", "next_token"):
        size = max(batch_size, 1024)
        return [build_candidates(task, fetch(idx[i:i + size]), alphabet)
                for i in range(0, len(idx), size)]
    chunks = [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return [build_candidates(task, fetch(c), alphabet) for c in chunks if len(c) >= 2]


def mean_loss(model, batches):
    weights = np.array([len(b) for b in batches], dtype=np.float64)
    losses = np.array([nll(model, b) for b in batches])
    return float(np.sum(weights * losses) / np.sum(weights))


def split_indices(n, val_fraction, seed):
    """Seeded shuffle; the first ``round(val_fraction * n)`` indices validate."""
    perm = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,))).permutation(n)
    n_val = min(max(2, int(round(val_fraction * n))), n - 2)
    return perm[n_val:], perm[:n_val]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train(model_init, dataset, config, checkpoint_iters=None):
    """Optimise `model_init` on `dataset`; returns ``(best_model, trace)``.

    Minibatches are drawn from a generator seeded by ``config.seed``
    (independently per iteration; contrastive batches have no repeated
    items). Validation loss is evaluated every ``eval_interval`` iterations
    on a held-out ``val_fraction`` split and the model with the lowest
    validation loss is returned. Training stops once validation fails to
    improve for ``early_stop_patience`` consecutive evaluations.

    `checkpoint_iters` restricts stored snapshots to the given iterations
    (default: every evaluation when ``keep_checkpoints`` is set).
    """
    task = config.task
    n, fetch, alphabet = _adapter(task, dataset)
    train_idx, val_idx = split_indices(n, config.val_fraction, config.seed)
    val_batches = task_batches(task, dataset, val_idx, config.batch_size)
    rng = np.random.default_rng(config.seed)
    contrastive = task in ("contrastive", "npair")
    batch_size = min(config.batch_size, len(train_idx)) if contrastive else config.batch_size
    wanted = None if checkpoint_iters is None else set(checkpoint_iters)

    trace = TrainTrace()
    model = model_init
    state = None
    best_val, best_model, stale = np.inf, model_init, 0
    window = []
    for it in range(1, config.max_iters + 1):
        pick = rng.choice(len(train_idx), size=batch_size, replace=not contrastive)
        batch = build_candidates(task, fetch(train_idx[pick]), alphabet)
        loss, grads = nll_and_grads(model, batch)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceError(f"non-finite loss at iteration {it}", trace, it)
        trace.losses.append(loss)
        window.append(loss)
        params, state = adam_step(model.params, grads, state, it, config)
        model = model.with_params(params)

        if it % config.eval_interval == 0 or it == config.max_iters:
            val = mean_loss(model, val_batches)
            if not np.isfinite(val):
                raise DivergenceError(f"non-finite validation loss at iteration {it}", trace, it)
            trace.record(it, float(np.mean(window)), val)
            window = []
            if config.keep_checkpoints and (wanted is None or it in wanted):
                trace.checkpoints[it] = model
            if val < best_val:
                best_val, best_model, stale = val, model, 0
                trace.best_iteration = it
            else:
                stale += 1
                if config.early_stop_patience is not None and stale >= config.early_stop_patience:
                    trace.stopped_early = True
                    break
    return best_model, trace


def grad_check(model, batch, eps=1e-5, max_params=200, seed=0, floor=1e-6):
    """Worst relative discrepancy between analytic and central-difference gradients.

    Up to `max_params` scalar coordinates are probed, spread evenly over the
    parameter blocks. The relative error of a coordinate is
    ``|a - d| / max(|a|, |d|, floor)``; `floor` keeps coordinates whose
    true gradient is ~0 from reporting pure round-off as a relative error.
    """
    if not 1e-8 < eps <= 1e-3:
        raise ValueError("eps must lie in (1e-8, 1e-3]")
    _, grads = nll_and_grads(model, batch)
    rng = np.random.default_rng(seed)
    keys = [k for k, v in model.params.items() if v.size]
    per_block = max(1, max_params // max(len(keys), 1))
    worst = 0.0
    for key in keys:
        base = model.params[key]
        flat_idx = rng.choice(base.size, size=min(per_block, base.size), replace=False)
        for j in flat_idx:
            coord = np.unravel_index(j, base.shape)
            values = []
            for sign in (1.0, -1.0):
                p = base.copy()
                p[coord] += sign * eps
                params = dict(model.params)
                params[key] = p
                values.append(nll(model.with_params(params), batch))
            numeric = (values[0] - values[1]) / (2 * eps)
            analytic = grads[key][coord]
            denom = max(abs(analytic), abs(numeric), floor)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def config_with(config, **overrides):
    return replace(config, **overrides)
