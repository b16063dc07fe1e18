"""Observation masks and a bidirectional recurrent imputer.

The estimate for step ``t`` comes from the forward recurrence's state after
``x_0 .. x_{t-1}`` and the backward recurrence's state after ``x_{T-1} .. x_{t+1}``,
each projected by its own dense layer; the two are averaged.  Neither direction
ever sees ``x_t`` itself, so the MAE on observed cells is a real
reconstruction error rather than a copy.

Arrays are time-major.  A single stay is ``[T, d_x]``; a padded batch is
``[T, B, d_x]`` and is flattened to ``[T * B, d_x]`` rows (row ``t * B + b``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import DenseLayer, LstmStack, ParamSpec, dense_specs, lstm_forward_stacked, lstm_specs


@dataclass
class MaskedSeries:
    values: np.ndarray  # unobserved cells hold NaN
    mask: np.ndarray  # 1.0 where observed

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.values.shape != self.mask.shape:
            raise ad.ShapeError(f"values {self.values.shape} vs mask {self.mask.shape}")

    @property
    def filled(self) -> np.ndarray:
        """Values with unobserved cells set to 0."""
        return np.where(self.mask > 0, self.values, 0.0)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]


@dataclass
class ImputedSeries:
    x_impute: Tensor
    x_mixed: Tensor
    impute_loss: Tensor


def build_mask(raw) -> MaskedSeries:
    """Mask is 1 exactly where ``raw`` holds a finite value (NaN/None mark missing)."""
    arr = np.array(raw, dtype=np.float64)
    if arr.ndim < 2:
        raise ad.ShapeError(f"build_mask: expected [T, d_x] or [T, B, d_x], got {arr.shape}")
    mask = np.isfinite(arr).astype(np.float64)
    return MaskedSeries(np.where(mask > 0, arr, np.nan), mask)


def imputer_specs(d_x: int, hidden: int, n_layers: int = 1) -> list[ParamSpec]:
    specs = []
    for direction in ("fwd", "bwd"):
        specs += lstm_specs(f"imputer.{direction}", 2 * d_x, hidden, n_layers)
        specs += dense_specs(f"imputer.{direction}_out", hidden, d_x)
    return specs


def _flat(a: np.ndarray) -> np.ndarray:
    # [T, d] -> [T, d]; [T, B, d] -> [T*B, d]
    return a if a.ndim == 2 else a.reshape(-1, a.shape[-1])


def mix(series: MaskedSeries, x_impute: Tensor) -> Tensor:
    """Observed cells pass through, missing cells take the estimate."""
    m = _flat(series.mask)
    return ad.add(ad.constant(_flat(series.filled)), ad.mul(ad.constant(1.0 - m), x_impute))


def impute_loss(series: MaskedSeries, x_impute: Tensor) -> Tensor:
    """Mean absolute error over observed cells only (0 when nothing is observed)."""
    m = _flat(series.mask)
    resid = ad.abs_(ad.sub(x_impute, ad.constant(_flat(series.filled))))
    total = ad.sum_(ad.mul(resid, ad.constant(m)))
    return ad.scale(total, 1.0 / max(float(m.sum()), 1.0))


def _preceding_states(stack: LstmStack, inputs: np.ndarray, valid) -> Tensor:
    """State before each step, stacked ``[T * B, H]``: zeros, then the outputs after steps 0..T-2."""
    T, B, _ = inputs.shape
    zeros = ad.constant(np.zeros((B, stack.hidden_dim)))
    if T == 1:
        return zeros
    x = ad.constant(inputs[:-1].reshape((T - 1) * B, -1))
    outs = lstm_forward_stacked(stack, x, T - 1, None if valid is None else valid[:-1])
    return ad.concat([zeros] + outs, axis=0)


def impute(series: MaskedSeries, params, valid: np.ndarray | None = None, n_layers: int = 1) -> ImputedSeries:
    """Run both recurrences, mix, and compute the masked MAE.

    ``valid`` (``[T, B]``) marks real (non-padding) steps of a batched series;
    padding must also carry mask 0.
    """
    values = series.values if series.values.ndim == 3 else series.values[:, None, :]
    mask = series.mask if series.mask.ndim == 3 else series.mask[:, None, :]
    T, B, _ = values.shape
    if T < 1:
        raise ValueError("impute: empty series")
    inputs = np.concatenate([np.where(mask > 0, values, 0.0), mask], axis=2)

    fwd = LstmStack(params, "imputer.fwd", n_layers)
    bwd = LstmStack(params, "imputer.bwd", n_layers)
    fwd_out = DenseLayer(params, "imputer.fwd_out")
    bwd_out = DenseLayer(params, "imputer.bwd_out")

    est_f = fwd_out(_preceding_states(fwd, inputs, valid))
    rev_valid = None if valid is None else np.asarray(valid)[::-1]
    states_b = _preceding_states(bwd, inputs[::-1], rev_valid)
    # rows of states_b are in reversed time; put them back in order
    order = (np.arange(T)[::-1][:, None] * B + np.arange(B)[None, :]).reshape(-1)
    est_b = bwd_out(ad.slice_(states_b, order))
    x_impute = ad.scale(ad.add(est_f, est_b), 0.5)
    return ImputedSeries(x_impute, mix(series, x_impute), impute_loss(series, x_impute))


def impute_loss_gradcheck(series: MaskedSeries, params, step: float = 1e-5, tolerance: float = 1e-4,
                          n_layers: int = 1, kink: float = 1e-3) -> ad.GradCheckReport:
    """Finite-difference check of the imputation loss w.r.t. imputer parameters.

    Rejects instances with an observed residual within ``kink`` of zero, where
    |.| is not differentiable.
    """
    plist = [p for name, p in params.items() if name.startswith("imputer.")]
    out = impute(series, params, n_layers=n_layers)
    resid = np.abs(out.x_impute.data - _flat(series.filled))[_flat(series.mask) > 0]
    if resid.size and resid.min() < kink:
        raise ValueError(f"instance has a residual within {kink} of zero; pick another")
    return ad.finite_difference_check(
        lambda: impute(series, params, n_layers=n_layers).impute_loss, plist, step, tolerance
    )
