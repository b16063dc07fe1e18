"""Adam training loop with stratified splits and validation early stopping."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import ConceptLabels, PatientRecord, ScalerParams, apply_scalers, fit_scalers, label_record
from .model import Batch, LossWeights, ModelConfig, collate, compute_losses

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "epoch",
    "train_total", "train_mort", "train_aux", "train_impute",
    "val_total", "val_mort", "val_aux", "val_impute",
)


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 0.0001
    batch_size: int = 128
    max_epochs: int = 500
    dropout: float = 0.5
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    patience: int = 10
    lambda_mort: float = 1.0
    lambda_aux: float = 10.0
    lambda_impute: float = 0.001
    seed: int = 0

    def __post_init__(self):
        self.split = tuple(float(f) for f in self.split)
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) <= 0:
            raise ValueError(f"split fractions must be three positives summing to 1, got {self.split}")
        if self.lr <= 0 or self.eps <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("lr, eps, batch_size and max_epochs must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.l2 < 0 or self.patience < 0:
            raise ValueError("l2 and patience must be non-negative")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_mort, self.lambda_aux, self.lambda_impute)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


def desk_profile(kind: str = "senn", seed: int = 0) -> tuple[ModelConfig, TrainConfig]:
    """Small configuration that trains on ~2000 synthetic stays on one CPU.

    The default ``ModelConfig``/``TrainConfig`` give the full-size setup.
    """
    model = ModelConfig(kind=kind, lstm_hidden=32, imputer_hidden=32, head_dims=(32, 16, 8))
    return model, TrainConfig(max_epochs=60, seed=seed)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: dict[str, np.ndarray] | None = None):
        super().__init__(msg)
        self.last_good = last_good


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def _apportion(total: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``total * fractions``."""
    raw = np.asarray(fractions) * total
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for k in order[: total - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def split_cohort(records: Sequence[PatientRecord], fractions=(0.70, 0.15, 0.15), seed: int = 0):
    """Patient-level train/val/test partition stratified by outcome."""
    if len(records) < 3:
        raise ValueError("need at least 3 patients to split")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three values summing to 1, got {fractions}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    sizes = _apportion(len(records), fractions)
    pos = [i for i, r in enumerate(records) if r.died]
    neg = [i for i, r in enumerate(records) if not r.died]
    pos_counts = _apportion(len(pos), fractions)
    # keep overall sizes exact; move positives only where the sizes allow it
    for k in range(3):
        pos_counts[k] = min(pos_counts[k], sizes[k])
    short = len(pos) - sum(pos_counts)
    for k in range(3):
        take = min(short, sizes[k] - pos_counts[k])
        pos_counts[k] += take
        short -= take
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    out, pi, ni = [], 0, 0
    for k in range(3):
        n_pos, n_neg = pos_counts[k], sizes[k] - pos_counts[k]
        idx = pos[pi : pi + n_pos] + neg[ni : ni + n_neg]
        pi, ni = pi + n_pos, ni + n_neg
        out.append([records[i] for i in sorted(idx)])
    return tuple(out)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


@dataclass
class Example:
    record: PatientRecord  # scaled
    labels: ConceptLabels


def prepare(records: Sequence[PatientRecord], scalers: ScalerParams) -> list[Example]:
    """Label raw records, then scale them with *pre-fitted* parameters."""
    return [Example(apply_scalers(scalers, r), label_record(r)) for r in records]


def prepare_splits(train_raw, val_raw, test_raw=()):
    scalers = fit_scalers(train_raw)
    return scalers, prepare(train_raw, scalers), prepare(val_raw, scalers), prepare(test_raw, scalers)


def make_batch(examples: Sequence[Example]) -> Batch:
    return collate([e.record for e in examples], [e.labels for e in examples])


def iterate_batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator | None = None):
    """Length-bucketed batches.  With ``rng``: shuffled within equal lengths and
    in batch order; without: deterministic order of the input."""
    n = len(examples)
    if rng is None:
        order = np.arange(n)
    else:
        perm = rng.permutation(n)
        lengths = np.array([examples[i].record.los_hours for i in perm])
        order = perm[np.argsort(lengths, kind="stable")]
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    for chunk in chunks:
        yield make_batch([examples[i] for i in chunk])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              config: TrainConfig, decay: Mapping[str, bool] | None = None) -> None:
    """Bias-corrected Adam; ``l2 * w`` is added to the gradient of decaying weights."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise ad.ShapeError(f"adam: grad {g.shape} vs param {p.shape} for {name}")
        if config.l2 and (decay is None or decay.get(name, True)):
            g = g + config.l2 * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


def batch_losses(model, batch: Batch, weights: LossWeights, train: bool = False, rng=None):
    out, imp = model.forward(batch, train=train, rng=rng)
    return compute_losses(out, imp, batch.concept_labels, batch.mortality_labels, batch.valid, weights), out


def evaluate_loss(model, examples: Sequence[Example], weights: LossWeights, batch_size: int = 128) -> dict[str, float]:
    """Eval-mode losses averaged over batches, weighted by valid timesteps."""
    sums = dict.fromkeys(("total", "mort", "aux", "impute"), 0.0)
    n = 0
    for batch in iterate_batches(examples, batch_size):
        losses, _ = batch_losses(model, batch, weights)
        k = int(batch.valid.sum())
        for key, val in losses.values().items():
            sums[key] += k * val
        n += k
    return {k: v / n for k, v in sums.items()}


def snapshot(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def restore(params: Mapping[str, Tensor], arrays: Mapping[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data = arrays[k].copy()


@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    best_epoch: int
    best_val: float
    log: list[dict]
    epoch_seconds: list[float]


def train(model, train_set: Sequence[Example], val_set: Sequence[Example], config: TrainConfig,
          on_epoch=None) -> TrainResult:
    """Mini-batch Adam with per-epoch validation and best-checkpoint retention.

    Stops after ``patience`` epochs without validation improvement (so
    ``patience=0`` runs a single epoch) or at ``max_epochs``.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    weights = config.weights
    params = model.parameters()
    decay = model.decay_mask()
    state = AdamState()
    best = snapshot(params)
    best_val, best_epoch, stale = np.inf, 0, 0
    rows, seconds = [], []
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(4, epoch)))
        sums = dict.fromkeys(("total", "mort", "aux", "impute"), 0.0)
        n_batches = 0
        for batch in iterate_batches(train_set, config.batch_size, rng):
            ad.zero_grad(params.values())
            try:
                losses, _ = batch_losses(model, batch, weights, train=True, rng=rng)
            except ad.DomainError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best) from None
            vals = losses.values()
            if not np.isfinite(vals["total"]):
                raise TrainingDiverged(f"loss became {vals['total']} in epoch {epoch}", best)
            ad.backward(losses.total)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            try:
                adam_step(params, grads, state, config, decay)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best) from None
            for k in sums:
                sums[k] += vals[k]
            n_batches += 1
        ad.zero_grad(params.values())
        val = evaluate_loss(model, val_set, weights, config.batch_size)
        if not np.isfinite(val["total"]):
            raise TrainingDiverged(f"validation loss became {val['total']} in epoch {epoch}", best)
        row = {"epoch": epoch}
        row.update({f"train_{k}": v / n_batches for k, v in sums.items()})
        row.update({f"val_{k}": v for k, v in val.items()})
        rows.append(row)
        seconds.append(time.perf_counter() - t0)
        if val["total"] < best_val:
            best_val, best_epoch, stale = val["total"], epoch, 0
            best = snapshot(params)
        else:
            stale += 1
        log.info("epoch %d train %.5f val %.5f (best %d)", epoch, row["train_total"], val["total"], best_epoch)
        if on_epoch is not None:
            on_epoch(row)
        if stale >= config.patience:
            break
    restore(params, best)
    return TrainResult(best, best_epoch, float(best_val), rows, seconds)


def format_log(rows: Sequence[dict]) -> str:
    lines = ["\t".join(LOG_COLUMNS)]
    for r in rows:
        lines.append("\t".join([str(r["epoch"])] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"


def predict(model, examples: Sequence[Example], batch_size: int = 128) -> list[dict]:
    """Per-patient eval-mode outputs and labels, unpadded."""
    out = []
    for batch in iterate_batches(examples, batch_size):
        o, _ = model.forward(batch)
        T, B = batch.n_steps, batch.size
        prob = o.mortality_prob.data.reshape(T, B)
        con = None if o.concepts is None else o.concepts.data.reshape(T, B, -1)
        rel = None if o.relevance is None else o.relevance.data.reshape(T, B, -1)
        for b, pid in enumerate(batch.patient_ids):
            n = int(batch.valid[:, b].sum())
            out.append({
                "patient_id": pid,
                "y_true": batch.mortality_labels[:n, b].copy(),
                "y_pred": prob[:n, b].copy(),
                "concept_labels": batch.concept_labels[:n, b].copy(),
                "concepts": None if con is None else con[:n, b].copy(),
                "relevance": None if rel is None else rel[:n, b].copy(),
            })
    return out
