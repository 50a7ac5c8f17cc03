"""Losses, the two-step training schedule, prediction fusion and metrics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from crm import tensor as tt
from crm.activity_map import build_activity_map, decode_group_by_pooling
from crm.data import Dataset
from crm.model import CrmConfig, CrmOutput, backbone_forward, crm_forward, init_params, phi_forward, psi_forward
from crm.optim import AdamState, adam_step, collect_grads
from crm.tensor import Tensor

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


class TrainingDiverged(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# losses


def loss_activity_stage(pred: Tensor, truth) -> Tensor:
    """Sum of squared differences over every map cell (no averaging)."""
    return tt.sum_squared_error(pred, truth)


def loss_activity_total(stage_maps: Sequence[Tensor], truth) -> Tensor:
    if not stage_maps:
        raise ValueError("need at least one stage map")
    total = loss_activity_stage(stage_maps[0], truth)
    for m in stage_maps[1:]:
        total = total + loss_activity_stage(m, truth)
    return total


def loss_group(probs: Tensor, onehot) -> Tensor:
    """Cross-entropy against the one-hot target, scaled by ``1 / N_G``.

    Summed over a leading batch axis when present.
    """
    n_group = probs.shape[-1]
    return tt.neg_log_pick(probs, onehot, LOG_CLAMP) * (1.0 / n_group)


@dataclass(frozen=True)
class LossWeights:
    w_a: float
    w_g: float

    def __post_init__(self):
        if self.w_a < 0 or self.w_g < 0 or (self.w_a == 0 and self.w_g == 0):
            raise ValueError(f"loss weights must be nonnegative and not both zero: {self}")


def loss_total(stage_maps, truth_map, probs, onehot, weights: LossWeights) -> Tensor:
    """``w_a * L_A + w_g * L_G``; a zero weight drops its term from the graph."""
    terms = []
    if weights.w_a > 0:
        terms.append(loss_activity_total(stage_maps, truth_map) * weights.w_a)
    if weights.w_g > 0:
        terms.append(loss_group(probs, onehot) * weights.w_g)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def onehot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (n,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


# ----------------------------------------------------------------------------
# configuration


@dataclass
class Phase:
    segments: list[tuple[int, float]]  # (epochs, learning rate)
    w_a: float
    w_g: float

    def __post_init__(self):
        self.segments = [(int(e), float(lr)) for e, lr in self.segments]
        LossWeights(self.w_a, self.w_g)

    @property
    def epochs(self) -> int:
        return sum(e for e, _ in self.segments)


@dataclass
class TrainConfig:
    phase1: Phase = field(default_factory=lambda: Phase([(15, 1e-3), (5, 1e-4)], 1.0, 0.0))
    phase2: Phase = field(default_factory=lambda: Phase([(10, 1e-3), (5, 1e-4)], 1e-4, 1.0))
    batch_size: int = 8
    seed: int = 0
    modality: str = "rgb"

    def __post_init__(self):
        if isinstance(self.phase1, dict):
            self.phase1 = Phase(**self.phase1)
        if isinstance(self.phase2, dict):
            self.phase2 = Phase(**self.phase2)
        if self.phase1.w_g != 0:
            raise ValueError("phase 1 must have w_g == 0")
        if not (self.phase2.w_g > 0 and self.phase2.w_a < self.phase2.w_g):
            raise ValueError("phase 2 needs w_g > 0 and w_a < w_g")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def schedule(self) -> list[tuple[int, int, float, LossWeights]]:
        """``(epoch, phase, lr, weights)`` for every epoch, 1-based epochs."""
        out = []
        epoch = 0
        for pi, ph in ((1, self.phase1), (2, self.phase2)):
            for n, lr in ph.segments:
                for _ in range(n):
                    epoch += 1
                    out.append((epoch, pi, lr, LossWeights(ph.w_a, ph.w_g)))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("phase1", "phase2"):
            d[k]["segments"] = [list(s) for s in d[k]["segments"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


# ----------------------------------------------------------------------------
# training


def truth_maps(ds: Dataset, cfg: CrmConfig) -> np.ndarray:
    """Ground-truth maps for every scene, ``S x H' x W' x N``."""
    dc = ds.config
    group_only = cfg.n_individual == 0
    return np.stack(
        [build_activity_map(s, cfg.grid, dc.n_individual, dc.n_group, group_only=group_only) for s in ds.scenes]
    )


def _batches(n: int, batch_size: int, rng=None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class HeldOut:
    stage_losses: list[float]
    group_loss: float
    mca: float


def forward_dataset(params, cfg: CrmConfig, ds: Dataset, batch_size: int = 8, modality: str = "rgb"):
    """Forward pass over a dataset without recording a graph.

    Returns ``(probs, stage_maps)``: ``S x N_G`` probabilities and a list of
    ``S x H' x W' x N`` arrays (empty for the feature-only model).
    """
    probs, stages = [], []
    with tt.no_grad():
        for idx in _batches(len(ds), batch_size):
            out = crm_forward(ds.clip(idx, modality), params, cfg)
            probs.append(out.probs.data)
            stages.append([m.data for m in out.stage_maps])
    P = np.concatenate(probs)
    S = [np.concatenate([b[t] for b in stages]) for t in range(len(stages[0]))] if stages[0] else []
    return P, S


def held_out_metrics(params, cfg, ds, truth, batch_size=8, modality="rgb") -> HeldOut:
    P, S = forward_dataset(params, cfg, ds, batch_size, modality)
    n = len(ds)
    y = ds.groups()
    stage_losses = [float(np.sum((s - truth) ** 2)) / n for s in S]
    picked = np.maximum(P[np.arange(n), y], LOG_CLAMP)
    group_loss = float(-np.sum(np.log(picked)) / cfg.n_group / n)
    mca = float(np.mean(P.argmax(axis=1) == y))
    return HeldOut(stage_losses, group_loss, mca)


def train_two_step(
    train: Dataset,
    model_cfg: CrmConfig,
    cfg: TrainConfig,
    held_out: Dataset | None = None,
    params: dict[str, Tensor] | None = None,
    start_epoch: int = 0,
    adam: AdamState | None = None,
    stop_after: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    checkpoint: Callable[[int, dict, AdamState], None] | None = None,
):
    """Train with the two-phase schedule.

    Phase 1 optimizes the activity-map loss alone, phase 2 the weighted joint
    loss. Adam state is kept across learning-rate drops inside a phase and
    reset at the phase boundary. A feature-only model has no activity maps,
    so its phase-1 objective is empty: those epochs make no updates and only
    log held-out metrics. Phase 2 then optimizes its group loss.

    ``start_epoch`` skips epochs already completed (resume); ``stop_after``
    ends after that many total epochs. Returns ``(params, log_records,
    adam_state)``.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    params = params if params is not None else init_params(model_cfg)
    T = truth_maps(train, model_cfg) if model_cfg.uses_maps else None
    held_truth = truth_maps(held_out, model_cfg) if (held_out is not None and model_cfg.uses_maps) else None
    y_train = train.groups()
    records = []
    schedule = cfg.schedule()
    # a resumed optimizer state only carries over inside the same phase
    current_phase = schedule[start_epoch - 1][1] if 0 < start_epoch <= len(schedule) else None
    for epoch, phase, lr, weights in schedule:
        if epoch <= start_epoch:
            continue
        if stop_after is not None and epoch > stop_after:
            break
        # without activity maps the phase-1 objective is empty
        idle = weights.w_g == 0 and not model_cfg.uses_maps
        if not model_cfg.uses_maps and not idle:
            weights = LossWeights(0.0, 1.0)
        if phase != current_phase or adam is None:
            adam = AdamState(learning_rate=lr)
            current_phase = phase
        adam.learning_rate = lr
        rng = np.random.default_rng([cfg.seed, epoch])
        correct = seen = 0
        total_loss = 0.0
        for idx in [] if idle else _batches(len(train), cfg.batch_size, rng):
            out = _forward_for_loss(train.clip(idx, cfg.modality), params, model_cfg, weights)
            loss = loss_total(
                out.stage_maps,
                T[idx] if T is not None else None,
                out.probs,
                onehot(y_train[idx], model_cfg.n_group),
                weights,
            ) * (1.0 / len(idx))
            val = loss.item()
            if not math.isfinite(val):
                raise TrainingDiverged(f"non-finite loss {val} at epoch {epoch} (phase {phase}, lr {lr})")
            total_loss += val * len(idx)
            tt.backward(loss)
            adam_step(params, collect_grads(params), adam)
            for p in params.values():
                p.zero_grad()
            if out.probs is not None:
                correct += int(np.sum(out.probs.data.argmax(axis=1) == y_train[idx]))
                seen += len(idx)
        rec = {
            "epoch": epoch,
            "phase": phase,
            "lr": lr,
            "w_a": weights.w_a,
            "w_g": weights.w_g,
            "train_loss": total_loss / len(train),
            "train_mca": correct / seen if seen else None,
        }
        if held_out is not None:
            h = held_out_metrics(params, model_cfg, held_out, held_truth, cfg.batch_size, cfg.modality)
            rec.update(heldout_stage_losses=h.stage_losses, heldout_group_loss=h.group_loss, heldout_mca=h.mca)
        records.append(rec)
        log.info("epoch %d phase %d lr %g loss %.6g", epoch, phase, lr, rec["train_loss"])
        if on_epoch is not None:
            on_epoch(rec)
        if checkpoint is not None:
            checkpoint(epoch, params, adam)
    return params, records, adam


def _forward_for_loss(clip, params, cfg: CrmConfig, weights: LossWeights):
    if weights.w_g == 0:
        # no path from the loss to the aggregation head, so skip it
        F = backbone_forward(clip, params, cfg)
        maps = [phi_forward(F, params)]
        for t in range(2, cfg.stages + 1):
            maps.append(psi_forward(F, maps[-1], params, t))
        return CrmOutput(stage_maps=maps, probs=None, features=F)
    return crm_forward(clip, params, cfg)


def format_log_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)


# ----------------------------------------------------------------------------
# fusion and metrics


def fuse_predictions(pa, pb) -> np.ndarray:
    """Average of two probability vectors (or ``S x N`` stacks)."""
    pa, pb = np.asarray(pa, dtype=np.float64), np.asarray(pb, dtype=np.float64)
    if pa.shape != pb.shape:
        raise ValueError(f"fuse_predictions: shapes {pa.shape} and {pb.shape} differ")
    return (pa + pb) / 2


def merge_mapping(n_classes: int, merge: dict[int, int] | None) -> tuple[np.ndarray, list[int]]:
    """Class index -> compacted merged index, and the merged labels.

    ``merge`` maps original classes onto a representative class; unmapped
    classes stay themselves.
    """
    target = np.array([merge.get(c, c) if merge else c for c in range(n_classes)])
    labels = sorted(set(target.tolist()))
    pos = {lab: i for i, lab in enumerate(labels)}
    return np.array([pos[t] for t in target]), labels


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows: truth, cols: prediction
    labels: list[int]
    mca: float
    mpca: float
    per_class: list[float | None]

    def to_dict(self) -> dict:
        return {
            "labels": [lab + 1 for lab in self.labels],
            "confusion": self.confusion.tolist(),
            "mca": self.mca,
            "mpca": self.mpca,
            "per_class_accuracy": self.per_class,
        }

    def format(self) -> str:
        w = max(6, max(len(str(int(v))) for v in self.confusion.flat) + 1) if self.confusion.size else 6
        head = "truth\\pred".rjust(10) + "".join(str(lab + 1).rjust(w) for lab in self.labels)
        rows = [head]
        for lab, row in zip(self.labels, self.confusion):
            rows.append(str(lab + 1).rjust(10) + "".join(str(int(v)).rjust(w) for v in row))
        rows.append(f"MCA  {100 * self.mca:.2f}%")
        rows.append(f"MPCA {100 * self.mpca:.2f}%")
        return "\n".join(rows)


def evaluate_predictions(y_true, y_pred, n_classes: int, merge: dict[int, int] | None = None) -> EvalReport:
    mapping, labels = merge_mapping(n_classes, merge)
    t = mapping[np.asarray(y_true, dtype=np.int64)]
    p = mapping[np.asarray(y_pred, dtype=np.int64)]
    k = len(labels)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (t, p), 1)
    total = conf.sum()
    mca = float(np.trace(conf) / total) if total else 0.0
    rows = conf.sum(axis=1)
    per_class = [float(conf[i, i] / rows[i]) if rows[i] else None for i in range(k)]
    present = [v for v in per_class if v is not None]
    mpca = float(np.mean(present)) if present else 0.0
    return EvalReport(conf, labels, mca, mpca, per_class)


def predict(params, cfg: CrmConfig, ds: Dataset, batch_size: int = 8, modality: str = "rgb",
            pool_decode: bool = False) -> np.ndarray:
    """Per-scene group scores (``S x N_G``).

    With ``pool_decode`` the aggregation head is bypassed and the scores are
    the box sums over the final-stage group fields.
    """
    P, S = forward_dataset(params, cfg, ds, batch_size, modality)
    if not pool_decode:
        return P
    if not S:
        raise ValueError("pool decoding needs activity maps")
    final = S[-1]
    out = np.zeros((len(ds), cfg.n_group))
    for i, s in enumerate(ds.scenes):
        _, out[i] = decode_group_by_pooling(final[i], s.grid_boxes(cfg.grid), cfg.n_group)
    return out


def evaluate(params, cfg: CrmConfig, ds: Dataset, merge=None, batch_size=8, modality="rgb",
             pool_decode=False, probs: np.ndarray | None = None) -> EvalReport:
    """Confusion matrix, MCA and MPCA of a model (or of precomputed ``probs``)."""
    if probs is None:
        probs = predict(params, cfg, ds, batch_size, modality, pool_decode)
    return evaluate_predictions(ds.groups(), np.argmax(probs, axis=1), cfg.n_group, merge)
