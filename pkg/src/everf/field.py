"""The radiance field: positional encoding plus a small MLP.

One forward pass maps (position, view direction) to mean color, aleatoric
uncertainty, epistemic uncertainty, a shape score, and volume density.
Density comes off the position-only trunk so it stays view-independent;
the color/uncertainty head additionally sees the encoded direction.

The forward pass is written against the polymorphic ops in
:mod:`everf.autodiff`, so the same code runs eagerly for rendering and on a
tape for training.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape
from .config import EPS_UNCERTAINTY

CHECKPOINT_MAGIC = b"EVF1"


@dataclass
class FieldConfig:
    l_pos: int = 6
    l_dir: int = 2
    hidden_width: int = 64
    hidden_layers: int = 4

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.l_pos

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.l_dir


@dataclass
class PointPrediction:
    """Per-sample field output."""

    mean_color: np.ndarray  # (3,) in [0,1]
    au: float               # aleatoric variance, > 0
    eu: float               # epistemic variance, > 0
    shape_score: float      # > 0, feeds the pixel shape parameter
    density: float          # >= 0


@dataclass
class PointBatch:
    """Vectorized field outputs; entries are ndarrays or tape Tensors."""

    colors: object       # (n, 3)
    au: object           # (n,)
    eu: object           # (n,)
    shape_score: object  # (n,)
    density: object      # (n,)


def positional_encode(p: np.ndarray, l: int) -> np.ndarray:
    """[p, sin(2^k pi p), cos(2^k pi p)] for k = 0..l-1, componentwise.

    Accepts (3,) or (n, 3); output length is 3 + 6*l along the last axis.
    """
    p = np.asarray(p, dtype=np.float64)
    if l < 0:
        raise ValueError("frequency count must be >= 0")
    squeeze = p.ndim == 1
    if squeeze:
        p = p[None, :]
    n = p.shape[0]
    out = np.empty((n, 3 + 6 * l))
    out[:, :3] = p
    if l:
        freqs = np.pi * 2.0 ** np.arange(l)
        args = p[:, None, :] * freqs[None, :, None]          # (n, l, 3)
        block = np.empty((n, l, 2, 3))
        np.sin(args, out=block[:, :, 0, :])
        np.cos(args, out=block[:, :, 1, :])
        out[:, 3:] = block.reshape(n, 6 * l)
    return out[0] if squeeze else out


class FieldParams:
    """MLP weights plus the encoding configuration they were built for."""

    def __init__(self, config: FieldConfig, store: ParamStore):
        self.config = config
        self.store = store

    @classmethod
    def create(cls, config: FieldConfig, rng: np.random.Generator) -> "FieldParams":
        store = ParamStore()

        def init(name, fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            store.add(name, rng.uniform(-bound, bound, size=shape))

        width = config.hidden_width
        in_dim = config.pos_dim
        for i in range(config.hidden_layers):
            init(f"trunk{i}.w", in_dim, (in_dim, width))
            init(f"trunk{i}.b", in_dim, (width,))
            in_dim = width
        init("density.w", width, (width, 1))
        init("density.b", width, (1,))
        head_in = width + config.dir_dim
        init("head.w", head_in, (width, 6))
        init("head_dir.w", head_in, (config.dir_dim, 6))
        init("head.b", head_in, (6,))
        return cls(config, store)

    def copy(self) -> "FieldParams":
        return FieldParams(self.config, self.store.copy())


def _columns(x, j0: int, j1: int):
    """Column slice that works on Tensors and arrays."""
    if isinstance(x, ad.Tensor):
        v = x.value
        out = v[:, j0:j1]

        def vjp(g):
            full = np.zeros_like(v)
            full[:, j0:j1] = g
            return (full,)

        return ad.Tensor(out, x.tape, (x,), vjp, "columns")
    return x[:, j0:j1]


def evaluate_points(params: FieldParams, xs: np.ndarray, ds: np.ndarray,
                    tape: Tape | None = None,
                    enc_d: np.ndarray | None = None) -> PointBatch:
    """Run the field on a batch of points.

    xs: (n, 3) positions, ds: (n, 3) unit view directions.  With a tape,
    outputs are Tensors whose gradients flow to the parameters.  Callers
    that share one direction across many samples may pass the encoded
    directions directly via ``enc_d`` to skip recomputation.
    """
    cfg = params.config
    xs = np.asarray(xs, dtype=np.float64)
    ds = np.asarray(ds, dtype=np.float64)
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ds))):
        raise ValueError("non-finite field input")

    enc_x = positional_encode(xs, cfg.l_pos)
    if enc_d is None:
        enc_d = positional_encode(ds, cfg.l_dir)

    if tape is None:
        w = params.store.values
    else:
        w = {name: tape.param(params.store, name) for name in params.store.names()}

    # tanh trunk: smooth everywhere (finite-difference gradient checks stay
    # clean) with an arithmetic-only backward pass.
    h = enc_x
    for i in range(cfg.hidden_layers):
        h = ad.tanh(h @ w[f"trunk{i}.w"] + w[f"trunk{i}.b"])

    density = ad.softplus(h @ w["density.w"] + w["density.b"])
    head = h @ w["head.w"] + enc_d @ w["head_dir.w"] + w["head.b"]

    colors = ad.sigmoid(_columns(head, 0, 3))
    au = ad.reshape(ad.softplus(_columns(head, 3, 4)) + EPS_UNCERTAINTY, (-1,))
    eu = ad.reshape(ad.softplus(_columns(head, 4, 5)) + EPS_UNCERTAINTY, (-1,))
    shape = ad.reshape(ad.softplus(_columns(head, 5, 6)) + EPS_UNCERTAINTY, (-1,))
    density = ad.reshape(density, (-1,))
    return PointBatch(colors, au, eu, shape, density)


def evaluate_point(params: FieldParams, x: np.ndarray, d: np.ndarray) -> PointPrediction:
    """Single-point convenience wrapper; d must be unit length."""
    d = np.asarray(d, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("view direction must be a unit vector")
    batch = evaluate_points(params, np.asarray(x, dtype=np.float64)[None, :], d[None, :])
    return PointPrediction(
        mean_color=batch.colors[0],
        au=float(batch.au[0]),
        eu=float(batch.eu[0]),
        shape_score=float(batch.shape_score[0]),
        density=float(batch.density[0]),
    )


# ---------------------------------------------------------------------------
# checkpoint I/O: flat little-endian binary with a shape table
# ---------------------------------------------------------------------------


def save_params(params: FieldParams, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg = params.config
    buf.write(struct.pack("<4I", cfg.l_pos, cfg.l_dir, cfg.hidden_width,
                          cfg.hidden_layers))
    names = params.store.names()
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode("utf-8")
        arr = params.store.values[name]
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in names:
        buf.write(params.store.values[name].astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_params(path) -> FieldParams:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint (bad magic)")
    off = 4
    l_pos, l_dir, width, layers = struct.unpack_from("<4I", data, off)
    off += 16
    (n_arrays,) = struct.unpack_from("<I", data, off)
    off += 4
    metas = []
    for _ in range(n_arrays):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        metas.append((name, shape))
    store = ParamStore()
    for name, shape in metas:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        store.add(name, arr.copy())
    return FieldParams(FieldConfig(l_pos, l_dir, width, layers), store)
