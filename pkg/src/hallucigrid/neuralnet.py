"""U-net-like encoder-decoder with skip connections, written against numpy.

The public tensors follow the (batch, channel, height, width) convention; the
layers run channels-last internally because the 3x3 convolution is computed
as one matrix product over the zero-padded, flattened image followed by nine
shifted additions, which needs the channel axis innermost.

Topology for ``depth = D`` and ``base_channels = c``::

    encoder stage s (s = 0..D-1):  conv-[bn]-relu, conv-[bn]-relu  -> e_s  (c * 2**s channels)
                                    2x2 max pool
    decoder stage s (s = D-1..0):   nearest 2x upsample, concat e_s if s is a skip stage,
                                    conv-[bn]-relu, conv-[bn]-relu          (c * 2**s channels)
    output:                         3x3 conv -> sigmoid

Skip stages are the deepest ``skip_levels`` encoder stages.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit

CHECKPOINT_MAGIC = b"HNET1"


LOGIT_CLAMP = (700.0, 36.0)


class StaleTapeError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    depth: int = 4
    base_channels: int = 16
    skip_levels: int | None = None  # None: the deepest min(3, depth) stages
    norm: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.skip_levels is None:
            object.__setattr__(self, "skip_levels", min(3, self.depth))
        if not 0 <= self.skip_levels <= self.depth:
            raise ValueError(f"skip_levels must lie in [0, depth={self.depth}]")

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage

    @property
    def skip_stages(self) -> range:
        return range(self.depth - self.skip_levels, self.depth)

    def conv_layers(self) -> list[tuple[str, int, int]]:
        """(name, in_channels, out_channels) for every conv, in forward order."""
        layers, c = [], self.in_channels
        for s in range(self.depth):
            layers += [(f"enc{s}a", c, self.channels(s)), (f"enc{s}b", self.channels(s), self.channels(s))]
            c = self.channels(s)
        for s in reversed(range(self.depth)):
            cin = c + (self.channels(s) if s in self.skip_stages else 0)
            layers += [(f"dec{s}a", cin, self.channels(s)), (f"dec{s}b", self.channels(s), self.channels(s))]
            c = self.channels(s)
        layers.append(("out", c, 1))
        return layers


class Params:
    """Trainable arrays plus normalization running statistics.

    ``weights`` are optimized; ``buffers`` (running mean/var) are not and are
    excluded from :meth:`flat`. ``version`` increases on every in-place update
    so that stale tapes can be detected.
    """

    def __init__(self, weights: dict[str, np.ndarray], buffers: dict[str, np.ndarray] | None = None):
        self.weights = weights
        self.buffers = buffers or {}
        self.version = 0

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    @property
    def size(self) -> int:
        return sum(a.size for a in self.weights.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights.values()])

    def set_flat(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector)
        if vector.shape != (self.size,):
            raise ValueError(f"flat vector must have length {self.size}")
        pos = 0
        for name, a in self.weights.items():
            a[...] = vector[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        self.version += 1

    def locate(self, flat_index: int) -> tuple[str, tuple[int, ...]]:
        """Parameter name and element index of a flat position."""
        pos = 0
        for name, a in self.weights.items():
            if flat_index < pos + a.size:
                return name, tuple(int(i) for i in np.unravel_index(flat_index - pos, a.shape))
            pos += a.size
        raise IndexError(flat_index)

    def copy(self) -> "Params":
        return Params({k: v.copy() for k, v in self.weights.items()},
                      {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "Params":
        return Params({k: v.astype(dtype) for k, v in self.weights.items()},
                      {k: v.astype(dtype) for k, v in self.buffers.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.weights.items()}


def init_params(config: NetConfig, seed: int, dtype=np.float32) -> Params:
    """He-uniform kernels, zero biases, unit scale / zero shift normalization."""
    rng = np.random.default_rng(seed)
    weights, buffers = {}, {}
    for name, cin, cout in config.conv_layers():
        bound = math.sqrt(6.0 / (9 * cin))
        weights[f"{name}.w"] = rng.uniform(-bound, bound, (3, 3, cin, cout)).astype(dtype)
        weights[f"{name}.b"] = np.zeros(cout, dtype)
        if config.norm and name != "out":
            weights[f"{name}.gamma"] = np.ones(cout, dtype)
            weights[f"{name}.beta"] = np.zeros(cout, dtype)
            buffers[f"{name}.mean"] = np.zeros(cout, dtype)
            buffers[f"{name}.var"] = np.ones(cout, dtype)
    return Params(weights, buffers)


# --------------------------------------------------------------------------
# layers (channels-last)


def _offsets(Wp: int) -> list[int]:
    # flat offset of kernel tap (dy, dx) in the padded image, k = 3 * dy + dx
    return [(k // 3) * Wp + k % 3 for k in range(9)]


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1, zero-padded 3x3 convolution. Returns ``(y, X)`` with ``X`` kept for backward.

    Output cell (i, j) anchors at padded index q = i * Wp + j, and tap k reads
    q + offset_k, so each tap is one matrix product on a shifted contiguous
    slice of the flattened padded input.
    """
    B, H, W, C = x.shape
    O = w.shape[3]
    Hp, Wp = H + 2, W + 2
    xp = np.zeros((B, Hp, Wp, C), x.dtype)
    xp[:, 1:-1, 1:-1] = x
    X = xp.reshape(-1, C)
    P = X.shape[0]
    taps = w.reshape(9, C, O)
    Y = np.zeros((P, O), x.dtype)
    for k, off in enumerate(_offsets(Wp)):
        if C == 1:
            Y[:P - off] += X[off:] * taps[k]
        else:
            Y[:P - off] += X[off:] @ taps[k]
    return Y.reshape(B, Hp, Wp, O)[:, :H, :W] + b, X


def conv3x3_backward(dy: np.ndarray, X: np.ndarray, w: np.ndarray, need_dx: bool = True):
    B, H, W, O = dy.shape
    C = w.shape[2]
    Hp, Wp = H + 2, W + 2
    P = X.shape[0]
    dYp = np.zeros((B, Hp, Wp, O), dy.dtype)
    dYp[:, :H, :W] = dy
    D = dYp.reshape(P, O)
    db = _channel_sum(dy)
    taps = w.reshape(9, C, O)
    dw = np.empty((9, C, O), dy.dtype)
    dX = np.zeros((P, C), dy.dtype) if need_dx else None
    for k, off in enumerate(_offsets(Wp)):
        dw[k] = X[off:].T @ D[:P - off]
        if need_dx:
            dX[off:] += D[:P - off] @ taps[k].T
    dx = dX.reshape(B, Hp, Wp, C)[:, 1:-1, 1:-1] if need_dx else None
    return dx, dw.reshape(3, 3, C, O), db


def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Sum over every axis but the last; a matrix-vector product beats ``sum`` on narrow channel axes."""
    flat = a.reshape(-1, a.shape[-1])
    return np.ones(flat.shape[0], a.dtype) @ flat


def batchnorm_forward(x, gamma, beta, mean_buf, var_buf, train: bool, momentum: float, eps: float):
    if train:
        n = x.shape[0] * x.shape[1] * x.shape[2]
        mean = _channel_sum(x) / n
        centered = x - mean
        var = _channel_sum(centered * centered) / n
        mean_buf *= 1 - momentum
        mean_buf += momentum * mean
        var_buf *= 1 - momentum
        var_buf += momentum * var * (n / max(n - 1, 1))
    else:
        centered = x - mean_buf
        var = var_buf
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std
    return xhat * gamma + beta, (xhat, inv_std, train)


def batchnorm_backward(dy, gamma, cache):
    xhat, inv_std, train = cache
    dgamma = _channel_sum(dy * xhat)
    dbeta = _channel_sum(dy)
    dxhat = dy * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    n = dy.shape[0] * dy.shape[1] * dy.shape[2]
    dx = (inv_std / n) * (n * dxhat - _channel_sum(dxhat) - xhat * _channel_sum(dxhat * xhat))
    return dx, dgamma, dbeta


def maxpool_forward(x):
    """2x2 max pool; ties resolve to the first cell in row-major window order."""
    B, H, W, C = x.shape
    win = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
    idx = win.argmax(axis=-1)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def maxpool_backward(dy, idx):
    B, h, w, C = dy.shape
    dwin = np.zeros((B, h, w, C, 4), dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    return dwin.reshape(B, h, w, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * h, 2 * w, C)


def upsample_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_backward(dy):
    B, H, W, C = dy.shape
    return dy.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


# --------------------------------------------------------------------------
# network


@dataclass
class Tape:
    params: Params
    config: NetConfig
    version: int
    train: bool
    records: list = field(default_factory=list)
    prediction: np.ndarray | None = None


def _check_input(x: np.ndarray, config: NetConfig) -> None:
    if x.ndim != 4:
        raise ValueError(f"input must be (batch, channels, height, width), got shape {x.shape}")
    if x.shape[1] != config.in_channels:
        raise ValueError(f"expected {config.in_channels} input channel(s), got {x.shape[1]}")
    f = 2 ** config.depth
    if x.shape[2] % f or x.shape[3] % f:
        raise ValueError(f"spatial dims {x.shape[2:]} not divisible by 2**depth = {f}")
    if min(x.shape) < 1:
        raise ValueError("empty tensor")


def forward(params: Params, config: NetConfig, x: np.ndarray, train: bool = False):
    """Run the network; returns ``(prediction, tape)``.

    ``prediction`` has shape (batch, 1, H, W) and is computed in float64. In
    train mode, normalization uses batch statistics and updates the running
    buffers in ``params``.
    """
    x = np.asarray(x)
    _check_input(x, config)
    dtype = params.dtype
    W_, B_ = params.weights, params.buffers
    tape = Tape(params, config, params.version, train)
    rec = tape.records

    def block(h, name):
        h, cols = conv3x3_forward(h, W_[f"{name}.w"], W_[f"{name}.b"])
        rec.append(("conv", name, cols))
        if config.norm:
            h, cache = batchnorm_forward(h, W_[f"{name}.gamma"], W_[f"{name}.beta"], B_[f"{name}.mean"],
                                         B_[f"{name}.var"], train, config.bn_momentum, config.bn_eps)
            rec.append(("bn", name, cache))
        mask = h > 0
        rec.append(("relu", name, mask))
        return h * mask

    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=dtype)
    skips = {}
    for s in range(config.depth):
        h = block(block(h, f"enc{s}a"), f"enc{s}b")
        if s in config.skip_stages:
            skips[s] = h
        h, idx = maxpool_forward(h)
        rec.append(("pool", s, idx))
    for s in reversed(range(config.depth)):
        h = upsample_forward(h)
        rec.append(("up", s, None))
        if s in skips:
            rec.append(("concat", s, h.shape[-1]))
            h = np.concatenate([h, skips[s]], axis=-1)
        h = block(block(h, f"dec{s}a"), f"dec{s}b")
    logits, cols = conv3x3_forward(h, W_["out.w"], W_["out.b"])
    rec.append(("conv", "out", cols))
    # clamping keeps float64 sigmoid strictly inside (0, 1); the clamp is inactive for all but saturated logits
    prediction = expit(np.clip(logits.astype(np.float64), -LOGIT_CLAMP[0], LOGIT_CLAMP[1])).transpose(0, 3, 1, 2)
    tape.prediction = prediction
    return prediction, tape


def backward(tape: Tape, grad_prediction: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of a scalar loss, given dLoss/dPrediction."""
    params, config = tape.params, tape.config
    if tape.version != params.version:
        raise StaleTapeError("parameters changed since this tape was recorded")
    grad_prediction = np.asarray(grad_prediction, dtype=np.float64)
    if grad_prediction.shape != tape.prediction.shape:
        raise ValueError(f"gradient shape {grad_prediction.shape} != prediction shape {tape.prediction.shape}")
    W_ = params.weights
    dtype = params.dtype
    grads = {k: np.zeros_like(v) for k, v in W_.items()}
    p = tape.prediction
    g = (grad_prediction * p * (1.0 - p)).transpose(0, 2, 3, 1).astype(dtype)

    skip_grads: dict[int, np.ndarray] = {}
    records = tape.records
    first_conv = records[0][1]
    for i in range(len(records) - 1, -1, -1):
        kind, key, cache = records[i]
        if kind == "conv":
            g, dw, db = conv3x3_backward(g, cache, W_[f"{key}.w"], need_dx=key != first_conv)
            grads[f"{key}.w"] += dw
            grads[f"{key}.b"] += db
        elif kind == "bn":
            g, dgamma, dbeta = batchnorm_backward(g, W_[f"{key}.gamma"], cache)
            grads[f"{key}.gamma"] += dgamma
            grads[f"{key}.beta"] += dbeta
        elif kind == "relu":
            g = g * cache
        elif kind == "concat":
            g, skip_grads[key] = g[..., :cache], g[..., cache:]
        elif kind == "up":
            g = upsample_backward(g)
        elif kind == "pool":
            g = maxpool_backward(g, cache)
            if key in skip_grads:
                g = g + skip_grads.pop(key)
    return grads


def predict(params: Params, config: NetConfig, values: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode probabilities for a stack of (N, H, W) status-value grids."""
    values = np.asarray(values)
    out = np.empty(values.shape, dtype=np.float64)
    for start in range(0, len(values), batch_size):
        chunk = values[start:start + batch_size][:, None]
        out[start:start + batch_size] = forward(params, config, chunk, train=False)[0][:, 0]
    return out


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def create(cls, params: Params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), lr, beta1, beta2, eps)


def adam_step(params: Params, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place. Non-finite gradients leave everything untouched."""
    if set(grads) != set(params.weights):
        raise ValueError("gradient names do not match parameters")
    for name, g in grads.items():
        if g.shape != params.weights[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {params.weights[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}; step refused")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1.0 - b1 ** t)
    inv_bc2 = 1.0 / (1.0 - b2 ** t)
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params.weights[name] -= (step_size * m / (np.sqrt(v * inv_bc2) + state.eps)).astype(m.dtype)
    params.version += 1


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    n_params: int
    passed: bool


def grad_check(config: NetConfig | None = None, seed: int = 0, *, batch: int = 2, size: int = 8,
               h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6,
               backward_fn: Callable[[Tape, np.ndarray], dict] = None) -> GradCheckReport:
    """Compare :func:`backward` with central differences on a random tiny instance.

    The loss is the masked binary cross-entropy against random targets and a
    random valid mask. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    from .supervision import masked_bce, masked_bce_grad

    config = config or NetConfig(depth=2, base_channels=2, skip_levels=2, norm=False)
    if config.norm:
        raise ValueError("gradient checks run with normalization off")
    backward_fn = backward_fn or backward
    rng = np.random.default_rng(seed)
    params = init_params(config, seed, dtype=np.float64)
    for v in params.weights.values():  # non-zero biases exercise every path
        v += rng.normal(0.0, 0.1, v.shape)
    x = rng.choice([0.0, 0.5, 1.0], size=(batch, config.in_channels, size, size))
    target = rng.random((batch, 1, size, size))
    valid = rng.random((batch, 1, size, size)) < 0.7

    def loss_at(vec):
        params.set_flat(vec)
        return masked_bce(forward(params, config, x)[0], target, valid)

    theta = params.flat().copy()
    params.set_flat(theta)
    pred, tape = forward(params, config, x)
    analytic = backward_fn(tape, masked_bce_grad(pred, target, valid))
    analytic = np.concatenate([analytic[k].ravel() for k in params.weights])

    numeric = np.empty_like(theta)
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] += h
        up = loss_at(bumped)
        bumped[i] -= 2 * h
        down = loss_at(bumped)
        numeric[i] = (up - down) / (2 * h)
    params.set_flat(theta)

    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    worst = int(np.argmax(rel))
    name, index = params.locate(worst)
    return GradCheckReport(float(rel[worst]), name, index, theta.size, bool(rel[worst] < tol))


# --------------------------------------------------------------------------
# checkpoints
#
# layout: "HNET1", u32 LE header length, JSON header, then raw little-endian
# arrays in header order (weights, buffers, adam m, adam v).


def save_checkpoint(path, params: Params, config: NetConfig, state: AdamState | None = None,
                    seed: int | None = None, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, config, state, seed, extra))


def checkpoint_bytes(params: Params, config: NetConfig, state: AdamState | None = None,
                     seed: int | None = None, extra: dict | None = None) -> bytes:
    groups = [("weights", params.weights), ("buffers", params.buffers)]
    if state is not None:
        groups += [("adam_m", state.m), ("adam_v", state.v)]
    arrays, blobs = [], []
    for group, d in groups:
        for name, a in d.items():
            le = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
            arrays.append({"group": group, "name": name, "shape": list(a.shape), "dtype": le.dtype.str})
            blobs.append(le.tobytes())
    header = {
        "config": asdict(config),
        "step": state.step if state is not None else 0,
        "seed": seed,
        "adam": None if state is None else {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
                                            "eps": state.eps},
        "arrays": arrays,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<I", len(raw)) + raw + b"".join(blobs)


def load_checkpoint(path):
    """Returns ``(params, config, adam_state_or_None, header)``."""
    data = Path(path).read_bytes()
    if data[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an HNET1 checkpoint")
    (hlen,) = struct.unpack_from("<I", data, 5)
    header = json.loads(data[9:9 + hlen])
    pos = 9 + hlen
    groups: dict[str, dict[str, np.ndarray]] = {"weights": {}, "buffers": {}, "adam_m": {}, "adam_v": {}}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        n = int(np.prod(spec["shape"], dtype=np.int64))
        if pos + n * dt.itemsize > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        a = np.frombuffer(data, dtype=dt, count=n, offset=pos).reshape(spec["shape"])
        groups[spec["group"]][spec["name"]] = a.astype(dt.newbyteorder("="))
        pos += n * dt.itemsize
    config = NetConfig(**header["config"])
    params = Params(groups["weights"], groups["buffers"])
    state = None
    if header["adam"] is not None:
        state = AdamState(groups["adam_m"], groups["adam_v"], step=header["step"], **header["adam"])
    return params, config, state, header
