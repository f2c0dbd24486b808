"""Multitask training: dynamically weighted combined loss, minibatch Adam
with early stopping, a joint phase followed by per-head fine-tuning with the
shared encoder frozen, and random hyperparameter search.

Task weights follow the dynamic-weight-averaging scheme: per presence task,
the ratio of the last two epoch-average losses is softmaxed at temperature
theta and rescaled to sum to the task count, so equal descent rates give
every task weight 1.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import PreparedDataset, compute_stats, prepare_cohort
from .model import (HEAD_INTENSITY, HEAD_MISSINGNESS, HEAD_SURVIVAL,
                    BatchTensors, JointModel, ModelConfig, batch_forward,
                    build_tensors, point_integrated_cindex, refit_breslow)
from .seeding import rng_for

_HEAD_PREFIX = {HEAD_SURVIVAL: "surv", HEAD_INTENSITY: "intensity",
                HEAD_MISSINGNESS: "missingness"}


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the epoch, batch, and loss components."""

    def __init__(self, phase, epoch, batch_index, components):
        self.phase, self.epoch, self.batch_index = phase, epoch, batch_index
        self.components = components
        super().__init__(f"non-finite loss in {phase} epoch {epoch} "
                         f"batch {batch_index}: {components}")


@dataclass
class TrainConfig:
    """Optimization settings. ``joint_epochs`` bounds the multitask phase;
    the remaining budget (``max_epochs - joint_epochs``) is available to each
    task-specific fine-tuning pass. Early stopping watches the validation
    combined loss (task weights pinned to 1) with the given patience."""

    lr: float = 1e-3
    batch_size: int = 512
    alpha: float = 0.3
    theta: float = 2.0
    max_epochs: int = 1000
    joint_epochs: int = 500
    patience: int = 10
    seed: int = 0
    val_fraction: float = 0.10
    include_censored_interval: bool = False
    max_grad_norm: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if self.joint_epochs > self.max_epochs:
            raise ValueError("joint_epochs cannot exceed max_epochs")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        return cls(**payload)


# ---------------------------------------------------------------------------
# dynamic weight averaging
# ---------------------------------------------------------------------------

@dataclass
class DWAState:
    history: dict = field(default_factory=dict)  # task -> epoch-average losses

    def record(self, losses: dict):
        for task, value in losses.items():
            self.history.setdefault(task, []).append(float(value))

    @property
    def iteration(self) -> int:
        return min((len(v) for v in self.history.values()), default=0)


def dwa_weights(state: DWAState, tasks, theta: float) -> dict:
    """Weights for the upcoming epoch from the last two recorded epoch
    averages. First two epochs, a single task, or unusable (non-positive)
    losses give equal weights."""
    tasks = list(tasks)
    if not tasks:
        return {}
    if len(tasks) == 1:
        return {tasks[0]: 1.0}
    s = state.iteration
    if s < 2:
        return {t: 1.0 for t in tasks}
    ratios = []
    for t in tasks:
        prev, prev2 = state.history[t][s - 1], state.history[t][s - 2]
        if prev <= 0 or prev2 <= 0:
            warnings.warn("non-positive recorded task loss; using equal weights")
            return {t: 1.0 for t in tasks}
        ratios.append(prev / prev2)
    scaled = np.asarray(ratios) / theta
    expd = np.exp(scaled - scaled.max())
    weights = len(tasks) * expd / expd.sum()
    return dict(zip(tasks, weights))


def combined_loss(surv_loss: float, presence_losses: dict, weights: dict,
                  alpha: float) -> float:
    """(1 - alpha) * survival + alpha * sum of weighted presence losses.
    Tasks absent from ``presence_losses`` contribute nothing."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    total = (1.0 - alpha) * surv_loss
    for task, value in presence_losses.items():
        total += alpha * weights.get(task, 1.0) * value
    return total


def _combine_nodes(graph, fwd, weights: dict, alpha: float):
    total = ad.mul(graph.constant(np.asarray(1.0 - alpha)), fwd.loss_surv)
    for task, node in fwd.presence_losses.items():
        coeff = np.asarray(alpha * weights.get(task, 1.0))
        total = ad.add(total, ad.mul(graph.constant(coeff), node))
    return total


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _split_losses(model, tensors: BatchTensors, cfg: TrainConfig) -> dict:
    """Forward-only task losses on a whole split (single graph)."""
    _, fwd = batch_forward(model, tensors, cfg.include_censored_interval)
    return fwd.loss_values()


def _batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _epoch(model, tensors, cfg, lr, rng, loss_picker, update_ids, opt, phase, epoch):
    """One pass over the training split; returns per-task epoch means."""
    sums, count = {}, 0
    for b_idx, idx in enumerate(_batches(tensors.n, cfg.batch_size, rng)):
        graph, fwd = batch_forward(model, tensors.subset(idx),
                                   cfg.include_censored_interval)
        loss_node = loss_picker(graph, fwd)
        values = fwd.loss_values()
        values["combined"] = loss_node.value.item()
        if not all(np.isfinite(v) for v in values.values()):
            raise TrainingDiverged(phase, epoch, b_idx, values)
        grads = ad.backward(loss_node)
        if update_ids is not None:
            grads = {pid: g for pid, g in grads.items() if pid in update_ids}
        ad.adam_step(model.params, grads, opt, lr=lr,
                     max_grad_norm=cfg.max_grad_norm)
        for key, value in values.items():
            sums[key] = sums.get(key, 0.0) + value
        count += 1
    return {k: v / count for k, v in sums.items()}


def train_joint(model: JointModel, train_ds: PreparedDataset,
                val_ds: PreparedDataset, cfg: TrainConfig):
    """Fit the model: joint multitask phase, per-head fine-tuning with the
    encoder frozen, best-validation restoration, and a final Breslow refit
    on the training split. Returns (history, info)."""
    if not train_ds.patients or not val_ds.patients:
        raise ValueError("train and validation splits must be non-empty")
    if not any(p.label.event == 1 for p in train_ds.patients):
        raise ValueError("no events in the training split")
    if not any(p.label.event == 1 for p in val_ds.patients):
        raise ValueError("no events in the validation split")

    tensors_train = build_tensors(model, train_ds)
    tensors_val = build_tensors(model, val_ds)
    presence_tasks = [h for h in model.cfg.heads if h != HEAD_SURVIVAL]
    # survival-only strategies optimize the plain partial likelihood
    alpha = cfg.alpha if presence_tasks else 0.0

    history = []
    dwa = DWAState()
    opt = ad.AdamState()
    best_val, best_snapshot, best_epoch = np.inf, model.clone_tensors(), -1
    since_best = 0

    for epoch in range(cfg.joint_epochs):
        weights = dwa_weights(dwa, presence_tasks, cfg.theta)
        picker = lambda graph, fwd: _combine_nodes(graph, fwd, weights, alpha)
        train_means = _epoch(model, tensors_train, cfg, cfg.lr,
                             rng_for(cfg.seed, "batch-order", epoch),
                             picker, None, opt, "joint", epoch)
        dwa.record({t: train_means[t] for t in presence_tasks})

        val_losses = _split_losses(model, tensors_val, cfg)
        val_combined = combined_loss(val_losses[HEAD_SURVIVAL],
                                     {t: val_losses[t] for t in presence_tasks},
                                     {t: 1.0 for t in presence_tasks}, alpha)
        history.append({"phase": "joint", "epoch": epoch, "train": train_means,
                        "weights": weights, "val": val_losses,
                        "val_combined": val_combined})
        if val_combined < best_val:
            best_val, best_epoch = val_combined, epoch
            best_snapshot = model.clone_tensors()
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                break

    model.restore_tensors(best_snapshot)
    info = {"joint_best_epoch": best_epoch, "joint_best_val": best_val,
            "finetune": {}}

    budget = cfg.max_epochs - cfg.joint_epochs
    if budget > 0:
        for head in model.cfg.heads:
            prefix = _HEAD_PREFIX[head]
            head_ids = set(model.param_ids(prefix))
            encoder_before = model.clone_tensors(model.param_ids("enc"))
            opt_head = ad.AdamState()
            head_best = _split_losses(model, tensors_val, cfg)[head]
            head_snapshot = model.clone_tensors(sorted(head_ids))
            head_best_epoch, since_best = -1, 0
            for epoch in range(budget):
                picker = lambda graph, fwd, h=head: _task_node(fwd, h)
                _epoch(model, tensors_train, cfg, cfg.lr,
                       rng_for(cfg.seed, "batch-order-finetune", head, epoch),
                       picker, head_ids, opt_head, f"finetune:{head}", epoch)
                val_losses = _split_losses(model, tensors_val, cfg)
                history.append({"phase": f"finetune:{head}", "epoch": epoch,
                                "val": val_losses})
                if val_losses[head] < head_best:
                    head_best, head_best_epoch = val_losses[head], epoch
                    head_snapshot = model.clone_tensors(sorted(head_ids))
                    since_best = 0
                else:
                    since_best += 1
                    if since_best > cfg.patience:
                        break
            model.restore_tensors(head_snapshot)
            info["finetune"][head] = {"best_epoch": head_best_epoch,
                                      "best_val": head_best}
            encoder_after = model.clone_tensors(model.param_ids("enc"))
            for pid in encoder_before:  # frozen-encoder contract
                assert np.array_equal(encoder_before[pid], encoder_after[pid]), \
                    f"encoder parameter {pid} changed during fine-tuning"

    refit_breslow(model, train_ds)
    return history, info


def _task_node(fwd, head):
    if head == HEAD_SURVIVAL:
        return fwd.loss_surv
    return fwd.presence_losses[head]


def history_to_jsonl(history, path):
    with open(path, "w", encoding="utf-8") as fh:
        for entry in history:
            fh.write(json.dumps(entry, default=float) + "\n")


# ---------------------------------------------------------------------------
# convenience: split, prepare, fit
# ---------------------------------------------------------------------------

def carve_validation(pool, val_fraction: float, seed: int):
    """Patient-level validation carve-out from a training pool."""
    ordered = sorted(pool, key=lambda s: s.patient_id)
    perm = rng_for(seed, "val-split").permutation(len(ordered))
    n_val = max(1, int(round(val_fraction * len(ordered))))
    if n_val >= len(ordered):
        raise ValueError("training pool too small for a validation carve-out")
    val_idx = set(perm[:n_val].tolist())
    train = [ordered[i] for i in range(len(ordered)) if i not in val_idx]
    val = [ordered[i] for i in sorted(val_idx)]
    return train, val


def fit_strategy(pool, strategy: str, train_cfg: TrainConfig,
                 model_overrides: dict | None = None):
    """Full fit of one handling strategy on a training pool: validation
    carve-out, train-only statistics, preparation, and training.

    Returns (model, history, info, train_ds, val_ds)."""
    train_seqs, val_seqs = carve_validation(pool, train_cfg.val_fraction,
                                            train_cfg.seed)
    stats = compute_stats(train_seqs, source_split="train")
    overrides = dict(model_overrides or {})
    cfg = ModelConfig(strategy=strategy, n_labs=train_seqs[0].n_labs, **overrides)
    train_ds = prepare_cohort(train_seqs, cfg.prepare_strategy, stats)
    val_ds = prepare_cohort(val_seqs, cfg.prepare_strategy, stats)
    model = JointModel(cfg, stats, seed=train_cfg.seed)
    history, info = train_joint(model, train_ds, val_ds, train_cfg)
    return model, history, info, train_ds, val_ds


# ---------------------------------------------------------------------------
# random hyperparameter search
# ---------------------------------------------------------------------------

DEFAULT_GRID = {
    "lr": (1e-3, 1e-4),
    "batch_size": (512, 1024),
    "alpha": (0.1, 0.3),
    "rnn_layers": (1, 2),
    "hidden_dim": (10, 25),
    "surv_layers": (0, 1, 2, 3),
    "intensity_layers": (0, 1, 2, 3),
    "missingness_layers": (0, 1, 2, 3),
}

_TRAIN_KEYS = ("lr", "batch_size", "alpha")


def random_search(grid: dict, strategy: str, pool, base_cfg: TrainConfig,
                  draws: int = 50, seed: int = 0, max_horizon: float = 30.0):
    """Draw configurations from the grid (without replacement while the grid
    lasts), fit each, and rank by validation integrated C-index.

    Returns (best_draw, leaderboard); each leaderboard row carries the drawn
    configuration and its validation score."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("empty search space")
    keys = sorted(grid)
    combos = list(itertools.product(*(grid[k] for k in keys)))
    rng = rng_for(seed, "search")
    take = min(draws, len(combos))
    chosen = rng.choice(len(combos), size=take, replace=False)

    leaderboard = []
    for draw_idx in chosen.tolist():
        combo = dict(zip(keys, combos[draw_idx]))
        train_kwargs = {k: combo[k] for k in _TRAIN_KEYS if k in combo}
        model_kwargs = {k: v for k, v in combo.items() if k not in _TRAIN_KEYS}
        cfg = TrainConfig(**{**base_cfg.to_dict(), **train_kwargs})
        model, _, info, _, val_ds = fit_strategy(pool, strategy, cfg,
                                                 model_overrides=model_kwargs)
        score = point_integrated_cindex(model, val_ds, max_horizon)
        leaderboard.append({"draw": int(draw_idx), "config": combo,
                            "val_integrated_cindex": float(score),
                            "joint_best_epoch": info["joint_best_epoch"]})
    leaderboard.sort(key=lambda row: -row["val_integrated_cindex"])
    return leaderboard[0], leaderboard
