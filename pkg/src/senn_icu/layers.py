"""Dense, LSTM and dropout layers plus parameter init and checkpoint I/O.

Layers do not own storage.  A model declares its parameters as a list of
``ParamSpec``; ``init_parameters`` turns that into a ``name -> Tensor`` dict and
each layer is a thin view over the entries sharing its prefix.  That keeps
checkpoint restore, optimizer state and cross-model parameter sharing trivial.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GATES = ("i", "f", "g", "o")
ACTIVATIONS = ("sigmoid", "tanh", "none")

CHECKPOINT_MAGIC = b"SENNCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    role: str = "weight"  # weight | bias | forget_bias
    fan_in: int = 0
    fan_out: int = 0

    @property
    def decays(self) -> bool:
        return self.role == "weight"


def init_parameters(specs: Sequence[ParamSpec], rng_seed: int) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, forget-gate biases at 1.0."""
    rng = np.random.default_rng(rng_seed)
    params: dict[str, Tensor] = {}
    for spec in specs:
        if not spec.shape or any(int(n) <= 0 for n in spec.shape):
            raise ValueError(f"{spec.name}: dimensions must be positive, got {spec.shape}")
        if spec.name in params:
            raise ValueError(f"duplicate parameter name {spec.name}")
        if spec.role == "weight":
            bound = np.sqrt(6.0 / (spec.fan_in + spec.fan_out))
            data = rng.uniform(-bound, bound, size=spec.shape)
        elif spec.role == "bias":
            data = np.zeros(spec.shape)
        elif spec.role == "forget_bias":
            data = np.ones(spec.shape)
        else:
            raise ValueError(f"{spec.name}: unknown role {spec.role!r}")
        params[spec.name] = ad.tensor(data, name=spec.name)
    return params


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------


def dense_specs(prefix: str, in_dim: int, out_dim: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.W", (in_dim, out_dim), "weight", in_dim, out_dim),
        ParamSpec(f"{prefix}.b", (out_dim,), "bias"),
    ]


class DenseLayer:
    def __init__(self, params: Mapping[str, Tensor], prefix: str, activation: str = "none"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.weight = params[f"{prefix}.W"]
        self.bias = params[f"{prefix}.b"]
        if self.weight.data.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ad.ShapeError(
                f"{prefix}: inconsistent parameter shapes {self.weight.shape} / {self.bias.shape}"
            )
        self.activation = activation

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ad.ShapeError(f"dense: expected [batch x {layer.in_dim}], got {x.shape}")
    z = ad.add(ad.matmul(x, layer.weight), ad.broadcast(layer.bias, (x.shape[0], layer.out_dim)))
    if layer.activation == "sigmoid":
        return ad.sigmoid(z)
    if layer.activation == "tanh":
        return ad.tanh(z)
    return z


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


def lstm_specs(prefix: str, in_dim: int, hidden_dim: int, n_layers: int) -> list[ParamSpec]:
    specs = []
    for layer in range(n_layers):
        d_in = in_dim if layer == 0 else hidden_dim
        fan_in = d_in + hidden_dim
        for gate in GATES:
            specs.append(
                ParamSpec(f"{prefix}.l{layer}.W_{gate}", (fan_in, hidden_dim), "weight", fan_in, hidden_dim)
            )
            role = "forget_bias" if gate == "f" else "bias"
            specs.append(ParamSpec(f"{prefix}.l{layer}.b_{gate}", (hidden_dim,), role))
    return specs


class LstmStack:
    """Stacked LSTM cells; gate order i, f, g (candidate), o."""

    def __init__(self, params: Mapping[str, Tensor], prefix: str, n_layers: int):
        if n_layers < 1:
            raise ValueError("LSTM stack needs at least one layer")
        self.layers = []
        prev_hidden = None
        for layer in range(n_layers):
            W = [params[f"{prefix}.l{layer}.W_{g}"] for g in GATES]
            b = [params[f"{prefix}.l{layer}.b_{g}"] for g in GATES]
            hidden = W[0].shape[1]
            in_dim = W[0].shape[0] - hidden
            if prev_hidden is not None and in_dim != prev_hidden:
                raise ad.ShapeError(
                    f"{prefix}.l{layer}: input dim {in_dim} != previous hidden {prev_hidden}"
                )
            self.layers.append((W, b, in_dim, hidden))
            prev_hidden = hidden
        self.hidden_dim = prev_hidden
        self.in_dim = self.layers[0][2]

    def __call__(self, xs: Sequence[Tensor], valid: np.ndarray | None = None) -> list[Tensor]:
        return lstm_forward(self, xs, valid)


def lstm_forward(stack: LstmStack, xs: Sequence[Tensor], valid: np.ndarray | None = None) -> list[Tensor]:
    """Run the stack over ``xs`` (one ``[batch, in_dim]`` tensor per step).

    ``valid`` is a ``[T, batch]`` boolean array; at invalid steps the hidden and
    cell state of that row are carried forward unchanged.  Returns the top
    layer's hidden state at every step.
    """
    if len(xs) == 0:
        raise ValueError("lstm_forward: empty sequence")
    batch = xs[0].shape[0]
    for t, x in enumerate(xs):
        if x.shape != (batch, stack.in_dim):
            raise ad.ShapeError(f"lstm: step {t} expected {(batch, stack.in_dim)}, got {x.shape}")
    x_all = ad.concat(list(xs), axis=0) if len(xs) > 1 else xs[0]
    return lstm_forward_stacked(stack, x_all, len(xs), valid)


def lstm_forward_stacked(stack: LstmStack, x_all: Tensor, n_steps: int,
                         valid: np.ndarray | None = None) -> list[Tensor]:
    """Same as :func:`lstm_forward` with the inputs stacked time-major as ``[T * batch, in_dim]``."""
    T = n_steps
    if T < 1:
        raise ValueError("lstm_forward: empty sequence")
    if x_all.data.ndim != 2 or x_all.shape[1] != stack.in_dim or x_all.shape[0] % T:
        raise ad.ShapeError(f"lstm: stacked input {x_all.shape} incompatible with {T} steps x {stack.in_dim}")
    batch = x_all.shape[0] // T
    keep = None
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (T, batch):
            raise ad.ShapeError(f"lstm: valid mask shape {valid.shape} != {(T, batch)}")
        keep = valid.astype(np.float64)

    for W, b, in_dim, H in stack.layers:
        W_all = ad.concat(W, axis=1)
        W_x = ad.slice_(W_all, slice(0, in_dim))
        W_h = ad.slice_(W_all, slice(in_dim, in_dim + H))
        # input projections for every step in one product, bias folded in
        b_all = ad.broadcast(ad.concat(b, axis=0), (T * batch, 4 * H))
        zx = ad.add(ad.matmul(x_all, W_x), b_all)
        h = c = None
        out = []
        for t in range(T):
            z = ad.slice_(zx, slice(t * batch, (t + 1) * batch))
            if h is not None:
                z = ad.add(z, ad.matmul(h, W_h))
            act = ad.sigmoid(z)
            i = ad.slice_(act, (slice(None), slice(0, H)))
            f = ad.slice_(act, (slice(None), slice(H, 2 * H)))
            o = ad.slice_(act, (slice(None), slice(3 * H, 4 * H)))
            g = ad.tanh(ad.slice_(z, (slice(None), slice(2 * H, 3 * H))))
            c_new = ad.mul(i, g) if c is None else ad.add(ad.mul(f, c), ad.mul(i, g))
            h_new = ad.mul(o, ad.tanh(c_new))
            if keep is not None and not keep[t].all():
                if h is None:
                    h = c = ad.constant(np.zeros((batch, H)))
                h_new = _carry(h_new, h, keep[t])
                c_new = _carry(c_new, c, keep[t])
            h, c = h_new, c_new
            out.append(h)
        x_all = ad.concat(out, axis=0) if T > 1 else out[0]
    return out


def _carry(new: Tensor, old: Tensor, keep_row: np.ndarray) -> Tensor:
    m = np.broadcast_to(keep_row[:, None], new.shape)
    return ad.add(ad.mul(ad.constant(m), new), ad.mul(ad.constant(1.0 - m), old))


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


class Dropout:
    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x: Tensor, train: bool, rng: np.random.Generator | None = None) -> Tensor:
        if not train or self.rate == 0.0:
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return ad.mul(x, ad.constant(keep))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# layout (little-endian):
#   8s magic | u32 version | u32 meta_len | meta (utf-8 json) | u32 n_records
#   per record: u16 name_len | name | u8 ndim | u64 * ndim | f64 * prod(shape)


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)),
        meta_bytes,
        struct.pack("<I", len(params)),
    ]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return params, meta
