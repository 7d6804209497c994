"""Small numerical core with hand-written reverse-mode gradients.

Everything operates on numpy arrays in the model's dtype (float32 normally,
float64 when ``HyperParams.precision == "float64"`` for gradient checks).
Weight matrices are stored ``(in, out)`` so a layer is ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DegenerateVectorError, FormatError, IntegrityError, NumericError, ShapeError

EPS_NORM = 1e-12
EVENT_TYPE_DIM = 4
N_EVENT_TYPES = 2
GRU_BLOCKS = ("W_r", "U_r", "W_u", "U_u", "W", "U")


@dataclass
class HyperParams:
    D: int = 64
    D_text: int = 64
    D_category: int = 64
    L: int = 3
    H: int = 64
    tau: float = 0.1
    learning_rate: float = 0.01
    grad_clip: float = 0.001
    negatives_per_positive: int = 3000
    batch_size: int = 600
    epochs: int = 10
    event_type_dim: int = EVENT_TYPE_DIM
    rng_seed: int = 0
    precision: str = "float32"

    def validate(self) -> None:
        for name in ("D", "D_text", "D_category", "H", "negatives_per_positive", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be > 0")
        if self.L < 0:
            raise ConfigError("L", "must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if not self.tau > 0:
            raise ConfigError("tau", "must be > 0")
        if not self.grad_clip > 0:
            raise ConfigError("grad_clip", "must be > 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate", "must be >= 0")
        if self.event_type_dim != EVENT_TYPE_DIM:
            raise ConfigError("event_type_dim", "is fixed at 4")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision", "must be float32 or float64")

    @property
    def dtype(self):
        return np.dtype(self.precision)


# ---------------------------------------------------------------------------
# parameters

def mlp_names(prefix: str, n_layers: int) -> list[tuple[str, str]]:
    return [(f"{prefix}.W{k}", f"{prefix}.b{k}") for k in range(n_layers)]


@dataclass
class ModelParams:
    hyper: HyperParams
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, hyper: HyperParams, n_title: int, n_aspect: int, n_categories: int) -> "ModelParams":
        """Embedding tables from N(0, 1); dense layers He-scaled; GRU scaled by fan-in.

        ``n_categories`` counts every category row including the reserved
        UNKNOWN row.
        """
        hyper.validate()
        rng = np.random.default_rng(hyper.rng_seed)
        dt = hyper.dtype
        D, Dt, Dc, H, L = hyper.D, hyper.D_text, hyper.D_category, hyper.H, hyper.L
        t: dict[str, np.ndarray] = {
            "title_table": rng.standard_normal((n_title, Dt)),
            "aspect_table": rng.standard_normal((n_aspect, Dt)),
            "category_table": rng.standard_normal((n_categories, Dc)),
            "event_type_table": rng.standard_normal((N_EVENT_TYPES, EVENT_TYPE_DIM)),
        }
        for prefix, d_in in (("item_mlp", 2 * Dt + Dc), ("user_mlp", D + EVENT_TYPE_DIM)):
            dims = [d_in] + [H] * L + [D]
            for k, (w, b) in enumerate(mlp_names(prefix, L + 1)):
                t[w] = rng.standard_normal((dims[k], dims[k + 1])) * np.sqrt(2.0 / dims[k])
                t[b] = np.zeros(dims[k + 1])
        x_dim = D + EVENT_TYPE_DIM
        for name in GRU_BLOCKS:
            fan_in = x_dim if name.startswith("W") else D
            t[f"gru.{name}"] = rng.standard_normal((fan_in, D)) / np.sqrt(fan_in)
        return cls(hyper, {k: v.astype(dt) for k, v in t.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(HyperParams(**asdict(self.hyper)), {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, precision: str) -> "ModelParams":
        hyper = HyperParams(**{**asdict(self.hyper), "precision": precision})
        return ModelParams(hyper, {k: v.astype(precision) for k, v in self.tensors.items()})

    def layers(self, prefix: str) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.tensors[w], self.tensors[b]) for w, b in mlp_names(prefix, self.hyper.L + 1)]

    def gru(self) -> dict[str, np.ndarray]:
        return {n: self.tensors[f"gru.{n}"] for n in GRU_BLOCKS}

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    @property
    def vocab_sizes(self) -> tuple[int, int, int]:
        return (self.tensors["title_table"].shape[0], self.tensors["aspect_table"].shape[0],
                self.tensors["category_table"].shape[0])


# ---------------------------------------------------------------------------
# bag of words

def cbow_mean(table: np.ndarray, ids) -> np.ndarray:
    """Mean of the looked-up rows; an empty id list yields the PAD row (row 0)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return table[0].copy()
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")
    return table[ids].mean(axis=0)


def cbow_matrix(id_lists, n_cols: int, dtype=np.float32) -> sp.csr_matrix:
    """Row-averaging sparse matrix: ``cbow_matrix(ids, V) @ table`` is a batch of cbow_mean."""
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    for ids in id_lists:
        ids = list(ids) or [0]
        w = 1.0 / len(ids)
        indices.extend(ids)
        data.extend([w] * len(ids))
        indptr.append(len(indices))
    if indices and (min(indices) < 0 or max(indices) >= n_cols):
        raise IndexError(f"token id out of range for table with {n_cols} rows")
    # duplicates are summed, so repeated tokens keep their weight
    return sp.csr_matrix((np.asarray(data, dtype=dtype), indices, indptr), shape=(len(id_lists), n_cols))


# ---------------------------------------------------------------------------
# dense layers

def relu(x):
    return np.maximum(x, 0)


def mlp_forward(layers, x):
    """ReLU after every layer except the last. Returns (output, cache)."""
    acts = [x]
    h = x
    for k, (W, b) in enumerate(layers):
        if h.shape[-1] != W.shape[0]:
            raise ShapeError(f"layer {k} expects input dim {W.shape[0]}, got {h.shape[-1]}")
        h = h @ W + b
        if k < len(layers) - 1:
            h = relu(h)
        acts.append(h)
    return h, acts


def mlp_backward(layers, acts, dout, grads=None, names=None):
    """Backprop through :func:`mlp_forward`; accumulates into ``grads[names[k]]``."""
    d = dout
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        if k < len(layers) - 1:
            d = d * (acts[k + 1] > 0)
        x = acts[k]
        if grads is not None:
            wn, bn = names[k]
            grads[wn] += x.reshape(-1, x.shape[-1]).T @ d.reshape(-1, d.shape[-1])
            grads[bn] += d.reshape(-1, d.shape[-1]).sum(axis=0)
        d = d @ W.T
    return d


# ---------------------------------------------------------------------------
# normalization and affinity

def l2_normalize(x) -> np.ndarray:
    x = np.asarray(x)
    n = np.sqrt(np.sum(x * x))
    if not n > EPS_NORM:
        raise DegenerateVectorError(f"cannot normalize vector with norm {float(n):g}")
    return x / n


def l2_normalize_rows(x: np.ndarray):
    """Row-wise unit normalization. Returns (y, norms); raises on a degenerate row."""
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(~(norms > EPS_NORM)):
        raise DegenerateVectorError("cannot normalize a (near-)zero row")
    return x / norms, norms


def l2_normalize_backward(y, norms, dy):
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / norms


def affinity(v, u, tau: float) -> float:
    if not tau > 0:
        raise ConfigError("tau", "must be > 0")
    v = np.asarray(v)
    u = np.asarray(u)
    if v.shape != u.shape:
        raise ShapeError(f"affinity needs equal shapes, got {v.shape} and {u.shape}")
    return float(np.dot(v, u)) / tau


# ---------------------------------------------------------------------------
# GRU (reset gate applied inside both the update gate and the candidate)

def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def gru_step(gru: Mapping[str, np.ndarray], x, h, return_cache: bool = False):
    """One step; ``x`` is (..., D+4), ``h`` is (..., D)."""
    if x.shape[-1] != gru["W_r"].shape[0] or h.shape[-1] != gru["U_r"].shape[0]:
        raise ShapeError(
            f"gru_step expects x dim {gru['W_r'].shape[0]} and h dim {gru['U_r'].shape[0]}, "
            f"got {x.shape[-1]} and {h.shape[-1]}")
    r = sigmoid(x @ gru["W_r"] + h @ gru["U_r"])
    s = r * h
    u = sigmoid(x @ gru["W_u"] + s @ gru["U_u"])
    c = np.tanh(x @ gru["W"] + s @ gru["U"])
    h_new = (1 - u) * h + u * c
    if return_cache:
        return h_new, (x, h, r, s, u, c)
    return h_new


def gru_step_backward(gru, cache, dh_new, grads=None):
    """Returns (dx, dh_prev); accumulates weight grads into ``grads['gru.*']``."""
    x, h, r, s, u, c = cache
    du = dh_new * (c - h)
    dc = dh_new * u
    dh = dh_new * (1 - u)
    da_u = du * u * (1 - u)
    da_c = dc * (1 - c * c)
    ds = da_u @ gru["U_u"].T + da_c @ gru["U"].T
    dr = ds * h
    dh = dh + ds * r
    da_r = dr * r * (1 - r)
    dh = dh + da_r @ gru["U_r"].T
    dx = da_r @ gru["W_r"].T + da_u @ gru["W_u"].T + da_c @ gru["W"].T
    if grads is not None:
        grads["gru.W_r"] += x.T @ da_r
        grads["gru.U_r"] += h.T @ da_r
        grads["gru.W_u"] += x.T @ da_u
        grads["gru.U_u"] += s.T @ da_u
        grads["gru.W"] += x.T @ da_c
        grads["gru.U"] += s.T @ da_c
    return dx, dh


# ---------------------------------------------------------------------------
# optimisation

def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def check_finite(grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {name!r}")


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Global-norm clipping in place. Returns the pre-clip norm."""
    check_finite(grads)
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        for name, g in grads.items():
            g *= g.dtype.type(scale)
    return norm


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        check_finite(grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(params, grads, lr, state: Adam | None = None) -> Adam:
    state = state or Adam(lr)
    state.lr = lr
    state.step(params, grads)
    return state


# ---------------------------------------------------------------------------
# finite differences

def finite_diff_check(loss_fn: Callable, params: dict[str, np.ndarray], probe_count: int = 5,
                      h: float = 1e-3, seed: int = 0, report: dict | None = None,
                      numeric_fn: Callable | None = None) -> float:
    """Central-difference check of ``loss_fn(params) -> (loss, grads)``.

    Probes ``probe_count`` random coordinates per parameter block and returns
    the max of ``|analytic - numeric| / max(|numeric|, 1e-6)``. Per-block
    maxima are written to ``report`` if given.

    ``numeric_fn``, if given, evaluates the same loss on a float64 copy of the
    parameters for the numeric side. In float32 the rounding noise of the loss
    divided by ``2h`` swamps small gradients; evaluating the differences in
    float64 isolates errors in the float32 backward pass.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_fn(params)
    if numeric_fn is None:
        ref, evaluate = params, loss_fn
    else:
        ref = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        evaluate = numeric_fn
    worst = 0.0
    for name in sorted(ref):
        p = ref[name]
        if p.size == 0:
            continue
        flat = p.reshape(-1)
        step = p.dtype.type(h)
        block_worst = 0.0
        for idx in rng.choice(flat.size, size=min(probe_count, flat.size), replace=False):
            orig = flat[idx].copy()
            flat[idx] = orig + step
            up = float(evaluate(ref)[0])
            flat[idx] = orig - step
            down = float(evaluate(ref)[0])
            flat[idx] = orig
            numeric = (up - down) / (float(orig + step) - float(orig - step))
            analytic = float(grads[name].reshape(-1)[idx])
            err = abs(analytic - numeric) / max(abs(numeric), 1e-6)
            block_worst = max(block_worst, err)
        if report is not None:
            report[name] = block_worst
        worst = max(worst, block_worst)
    return worst


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"ETTW1\n"


def save_checkpoint(params: ModelParams, path, extra: Mapping[str, object] | None = None) -> None:
    """Header of key=value lines, blank line, then name/shape/raw float32 LE blocks.

    Float64 verification-mode tensors are narrowed to float32.
    """
    hyper = {**asdict(params.hyper), "precision": "float32"}
    header = dict(hyper, **(extra or {}))
    out = bytearray(CKPT_MAGIC)
    for k, v in header.items():
        if isinstance(v, (tuple, list)):
            v = ",".join(map(str, v))
        out += f"{k}={v}\n".encode()
    out += b"\n"
    for name, t in params.tensors.items():
        out += f"{name}\n".encode()
        out += (" ".join(map(str, t.shape)) + "\n").encode()
        out += np.ascontiguousarray(t, dtype="<f4").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def _read_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise IntegrityError("unterminated line", offset=pos)
    return buf[pos:end].decode("utf-8"), end + 1


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value == "True"
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def load_checkpoint(path) -> tuple[ModelParams, dict[str, str]]:
    """Returns the parameters and any extra header keys."""
    buf = Path(path).read_bytes()
    if not buf.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not an ETTW1 checkpoint")
    pos = len(CKPT_MAGIC)
    header: dict[str, str] = {}
    while True:
        line, pos = _read_line(buf, pos)
        if line == "":
            break
        key, sep, value = line.partition("=")
        if not sep:
            raise IntegrityError(f"bad header line {line!r}", offset=pos)
        header[key] = value
    defaults = HyperParams()
    known = {f.name for f in fields(HyperParams)}
    hyper = HyperParams(**{k: _coerce(v, getattr(defaults, k)) for k, v in header.items() if k in known})
    extra = {k: v for k, v in header.items() if k not in known}
    tensors = {}
    while pos < len(buf):
        name, pos = _read_line(buf, pos)
        shape_line, pos = _read_line(buf, pos)
        try:
            shape = tuple(int(s) for s in shape_line.split())
        except ValueError:
            raise IntegrityError(f"bad shape line for {name!r}", offset=pos) from None
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise IntegrityError(f"truncated tensor {name!r}", offset=pos)
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    return ModelParams(hyper, tensors), extra
