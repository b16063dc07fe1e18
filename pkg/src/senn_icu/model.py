"""Self-explaining concept model and the ablation baseline.

Both share the imputer and the LSTM encoder (identical parameter names, so an
encoder can be copied between them).  The concept model routes its prediction
through two heads: ``concepts`` (predicted scaled organ scores) and
``relevance`` (per-concept gates), and the mortality probability is
``sigmoid(sum_j relevance_j * concepts_j)`` with nothing else added.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor
from .imputer import ImputedSeries, MaskedSeries, impute, imputer_specs
from .layers import (
    DenseLayer,
    Dropout,
    LstmStack,
    ParamSpec,
    dense_specs,
    init_parameters,
    lstm_forward_stacked,
    lstm_specs,
)

PROB_EPS = 1e-7


@dataclass
class ModelConfig:
    kind: str = "senn"  # senn | baseline
    d_x: int = 87
    d_s: int = 24
    n_concepts: int = 6
    lstm_hidden: int = 128
    lstm_layers: int = 3
    imputer_hidden: int = 256
    imputer_layers: int = 1
    head_dims: tuple[int, ...] = (256, 128, 64)
    dropout: float = 0.5

    def __post_init__(self):
        self.head_dims = tuple(int(d) for d in self.head_dims)
        if self.kind not in ("senn", "baseline"):
            raise ValueError(f"model kind must be 'senn' or 'baseline', got {self.kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_dims"] = list(self.head_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


@dataclass
class LossWeights:
    mort: float = 1.0
    aux: float = 10.0
    impute: float = 0.001

    def __post_init__(self):
        if min(self.mort, self.aux, self.impute) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class Batch:
    """A padded, time-major batch of stays."""

    series: MaskedSeries  # [T, B, d_x]
    static: np.ndarray  # [B, d_s]
    valid: np.ndarray  # [T, B] bool
    patient_ids: list = field(default_factory=list)
    concept_labels: np.ndarray | None = None  # [T, B, N]
    mortality_labels: np.ndarray | None = None  # [T, B]

    @property
    def n_steps(self) -> int:
        return self.valid.shape[0]

    @property
    def size(self) -> int:
        return self.valid.shape[1]

    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=0)


def collate(records: Sequence, labels: Sequence | None = None) -> Batch:
    """Pad records (``.series``, ``.static``, ``.patient_id``) into one batch.

    ``labels`` items need ``.target`` ``[T, N]`` and ``.mortality`` ``[T]``.
    """
    if not records:
        raise ValueError("collate: no records")
    T = max(r.series.n_steps for r in records)
    B = len(records)
    d_x = records[0].series.values.shape[1]
    values = np.full((T, B, d_x), np.nan)
    mask = np.zeros((T, B, d_x))
    valid = np.zeros((T, B), dtype=bool)
    static = np.stack([np.asarray(r.static, dtype=np.float64) for r in records])
    for b, r in enumerate(records):
        n = r.series.n_steps
        values[:n, b] = r.series.values
        mask[:n, b] = r.series.mask
        valid[:n, b] = True
    batch = Batch(MaskedSeries(values, mask), static, valid, [r.patient_id for r in records])
    if labels is not None:
        N = labels[0].target.shape[1]
        cl = np.zeros((T, B, N))
        ml = np.zeros((T, B))
        for b, lab in enumerate(labels):
            n = lab.target.shape[0]
            cl[:n, b] = lab.target
            ml[:n, b] = lab.mortality
        batch.concept_labels = cl
        batch.mortality_labels = ml
    return batch


class ModelOutput(NamedTuple):
    concepts: Tensor | None  # [T*B, N]
    relevance: Tensor | None  # [T*B, N]
    mortality_prob: Tensor  # [T*B]


class Losses(NamedTuple):
    mort: Tensor
    aux: Tensor
    impute: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in self._fields}


def mortality_from_concepts(concepts: Tensor, relevance: Tensor) -> Tensor:
    """Relevance-weighted concept sum through a sigmoid, one value per row."""
    return ad.sigmoid(ad.sum_(ad.mul(relevance, concepts), axis=1))


def recombine(concepts: np.ndarray, relevance: np.ndarray) -> np.ndarray:
    """Numpy twin of :func:`mortality_from_concepts` for exported explanations."""
    return expit(np.sum(np.asarray(relevance) * np.asarray(concepts), axis=-1))


def _head_specs(prefix: str, in_dim: int, dims: Sequence[int], out_dim: int) -> list[ParamSpec]:
    specs, d = [], in_dim
    for k, h in enumerate(dims):
        specs += dense_specs(f"{prefix}.h{k}", d, h)
        d = h
    return specs + dense_specs(f"{prefix}.out", d, out_dim)


class _Head:
    def __init__(self, params, prefix: str, n_hidden: int, dropout: Dropout):
        self.hidden = [DenseLayer(params, f"{prefix}.h{k}", "tanh") for k in range(n_hidden)]
        self.out = DenseLayer(params, f"{prefix}.out", "sigmoid")
        self.dropout = dropout

    def __call__(self, x: Tensor, train: bool, rng) -> Tensor:
        for layer in self.hidden:
            x = self.dropout(layer(x), train, rng)
        return self.out(x)


class _Base:
    kind = ""
    heads: tuple[str, ...] = ()

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        if config.kind != self.kind:
            raise ValueError(f"{type(self).__name__} needs config.kind={self.kind!r}")
        self.config = config
        self.specs = self.param_specs(config)
        if params is None:
            params = init_parameters(self.specs, seed)
        else:
            params = {k: v if isinstance(v, Tensor) else ad.tensor(v, name=k) for k, v in params.items()}
            expected = {s.name: s.shape for s in self.specs}
            got = {k: v.shape for k, v in params.items()}
            if expected != got:
                missing = sorted(set(expected) - set(got))
                extra = sorted(set(got) - set(expected))
                wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
                raise ad.ShapeError(
                    f"parameter set does not match config: missing={missing[:5]} "
                    f"extra={extra[:5]} wrong_shape={wrong[:5]}"
                )
        self.params = params
        self.dropout = Dropout(config.dropout)
        self.encoder = LstmStack(params, "encoder", config.lstm_layers)

    @classmethod
    def param_specs(cls, c: ModelConfig) -> list[ParamSpec]:
        specs = imputer_specs(c.d_x, c.imputer_hidden, c.imputer_layers)
        specs += lstm_specs("encoder", c.d_x, c.lstm_hidden, c.lstm_layers)
        return specs

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def decay_mask(self) -> dict[str, bool]:
        return {s.name: s.decays for s in self.specs}

    def encode(self, batch: Batch) -> tuple[list[Tensor], ImputedSeries]:
        """Impute, then run the LSTM encoder; returns per-step hidden states."""
        c = self.config
        if batch.series.values.shape[-1] != c.d_x or batch.static.shape[-1] != c.d_s:
            raise ad.ShapeError(
                f"input dims (d_x={batch.series.values.shape[-1]}, d_s={batch.static.shape[-1]}) "
                f"do not match model (d_x={c.d_x}, d_s={c.d_s})"
            )
        imp = impute(batch.series, self.params, batch.valid, c.imputer_layers)
        return lstm_forward_stacked(self.encoder, imp.x_mixed, batch.n_steps, batch.valid), imp

    def features(self, batch: Batch) -> tuple[Tensor, ImputedSeries]:
        """Hidden state at each step joined with the static vector, ``[T*B, H + d_s]``."""
        hs, imp = self.encode(batch)
        static = ad.constant(np.tile(batch.static, (batch.n_steps, 1)))
        return ad.concat([ad.concat(hs, axis=0), static], axis=1), imp


class SennModel(_Base):
    kind = "senn"
    heads = ("concept", "relevance")

    @classmethod
    def param_specs(cls, c: ModelConfig) -> list[ParamSpec]:
        specs = super().param_specs(c)
        f_dim = c.lstm_hidden + c.d_s
        specs += _head_specs("concept", f_dim, c.head_dims, c.n_concepts)
        specs += _head_specs("relevance", f_dim, c.head_dims, c.n_concepts)
        return specs

    def __init__(self, config: ModelConfig, params=None, seed: int = 0):
        super().__init__(config, params, seed)
        n = len(config.head_dims)
        self.concept_head = _Head(self.params, "concept", n, self.dropout)
        self.relevance_head = _Head(self.params, "relevance", n, self.dropout)

    def forward(self, batch: Batch, train: bool = False, rng=None) -> tuple[ModelOutput, Tensor]:
        f, imp = self.features(batch)
        concepts = self.concept_head(f, train, rng)
        relevance = self.relevance_head(f, train, rng)
        return ModelOutput(concepts, relevance, mortality_from_concepts(concepts, relevance)), imp.impute_loss


class BaselineModel(_Base):
    kind = "baseline"
    heads = ("head",)

    @classmethod
    def param_specs(cls, c: ModelConfig) -> list[ParamSpec]:
        specs = super().param_specs(c)
        return specs + _head_specs("head", c.lstm_hidden + c.d_s, c.head_dims, 1)

    def __init__(self, config: ModelConfig, params=None, seed: int = 0):
        super().__init__(config, params, seed)
        self.head = _Head(self.params, "head", len(config.head_dims), self.dropout)

    def forward(self, batch: Batch, train: bool = False, rng=None) -> tuple[ModelOutput, Tensor]:
        f, imp = self.features(batch)
        p = self.head(f, train, rng)
        return ModelOutput(None, None, ad.sum_(p, axis=1)), imp.impute_loss


def build_model(config: ModelConfig, params=None, seed: int = 0):
    cls = SennModel if config.kind == "senn" else BaselineModel
    return cls(config, params, seed)


def senn_forward(model: SennModel, batch: Batch, train: bool = False, rng=None):
    return model.forward(batch, train, rng)


def baseline_forward(model: BaselineModel, batch: Batch, train: bool = False, rng=None):
    out, loss = model.forward(batch, train, rng)
    return out.mortality_prob, loss


def compute_losses(
    output: ModelOutput,
    impute_loss: Tensor,
    concept_labels,
    mortality_labels,
    valid,
    weights: LossWeights = LossWeights(),
) -> Losses:
    """Masked mean BCE, masked mean concept MSE and their weighted total.

    Label arrays may be ``[T, B, ...]`` or already flattened to ``[T*B, ...]``.
    A baseline output (no concepts) gets ``aux = 0`` and no aux term.
    """
    v = np.asarray(valid, dtype=np.float64).reshape(-1)
    n_valid = v.sum()
    if n_valid == 0:
        raise ValueError("compute_losses: no valid timesteps")
    y = np.asarray(mortality_labels, dtype=np.float64).reshape(-1)
    if y.shape != v.shape:
        raise ad.ShapeError(f"mortality labels {y.shape} vs valid {v.shape}")
    p = ad.clip(output.mortality_prob, PROB_EPS, 1.0 - PROB_EPS)
    one = ad.constant(np.ones_like(y))
    bce = ad.add(
        ad.mul(ad.constant(y), ad.log(p)),
        ad.mul(ad.constant(1.0 - y), ad.log(ad.sub(one, p))),
    )
    l_mort = ad.scale(ad.sum_(ad.mul(bce, ad.constant(v))), -1.0 / n_valid)

    if output.concepts is not None:
        N = output.concepts.shape[1]
        lab = np.asarray(concept_labels, dtype=np.float64).reshape(-1, N)
        vm = np.broadcast_to(v[:, None], lab.shape)
        sq = ad.square(ad.sub(ad.constant(lab), output.concepts))
        l_aux = ad.scale(ad.sum_(ad.mul(sq, ad.constant(vm))), 1.0 / (n_valid * N))
        total = ad.add(
            ad.add(ad.scale(l_mort, weights.mort), ad.scale(l_aux, weights.aux)),
            ad.scale(impute_loss, weights.impute),
        )
    else:
        l_aux = ad.constant(0.0)
        total = ad.add(ad.scale(l_mort, weights.mort), ad.scale(impute_loss, weights.impute))
    return Losses(l_mort, l_aux, impute_loss, total)


def total_loss(l_mort: float, l_aux: float, l_impute: float, weights: LossWeights = LossWeights()) -> float:
    return weights.mort * l_mort + weights.aux * l_aux + weights.impute * l_impute
