"""Five-layer fully-convolutional grasp-value network.

Forward and backward passes are written out explicitly on numpy arrays
(im2col + GEMM convolutions, batch norm, inverted dropout, sigmoid head) and
trained with SGD + momentum.  The same kernels run on a 32x32 training window
(output 1x1x3) and on the full overview image (output 40x40x3 for 110x110
input); the two paths agree cell-for-cell in inference mode.

Window inputs are normalized by subtracting a per-window reference depth.
To keep the full-image path a plain convolution, the first layer's kernels
are constrained to sum to zero per output channel (projected after every
optimizer step), which makes the network exactly insensitive to constant
depth offsets, so the per-window reference cancels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import NetConfig, TrainConfig


@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    stride: int
    out_channels: int
    batch_norm: bool
    dropout: float
    l2: float


ARCHITECTURE = (
    LayerSpec(5, 2, 32, True, 0.4, 0.3),
    LayerSpec(5, 1, 48, True, 0.5, 0.3),
    LayerSpec(5, 1, 64, True, 0.6, 0.3),
    LayerSpec(6, 1, 142, False, 0.7, 8.0),
    LayerSpec(1, 1, 3, False, 0.0, 0.3),      # sigmoid head, one unit per jaw opening
)
IN_CHANNELS = 1
WINDOW_PX = 32


def spatial_trace(size_px: int) -> list[int]:
    """Spatial side lengths through the stack (valid convolutions)."""
    trace = [size_px]
    for spec in ARCHITECTURE:
        size_px = (size_px - spec.kernel) // spec.stride + 1
        if size_px < 1:
            raise ValueError("input too small for the network")
        trace.append(size_px)
    return trace


@dataclass
class LayerParams:
    w: np.ndarray                      # (k, k, cin, cout)
    b: np.ndarray                      # (cout,)
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    run_mean: Optional[np.ndarray] = None
    run_var: Optional[np.ndarray] = None

    def trainable(self):
        out = [("w", self.w), ("b", self.b)]
        if self.gamma is not None:
            out += [("gamma", self.gamma), ("beta", self.beta)]
        return out


@dataclass
class NetworkParams:
    layers: list[LayerParams]
    version: int = 0                   # bumped by the optimizer, marks snapshots

    @property
    def dtype(self):
        return self.layers[0].w.dtype

    def astype(self, dtype) -> "NetworkParams":
        def cast(a):
            return None if a is None else a.astype(dtype)
        return NetworkParams(
            [LayerParams(cast(l.w), cast(l.b), cast(l.gamma), cast(l.beta),
                         cast(l.run_mean), cast(l.run_var))
             for l in self.layers], self.version)

    def copy(self) -> "NetworkParams":
        return self.astype(self.dtype)


def init_params(seed: int = 0, dtype=np.float32) -> NetworkParams:
    """Fan-in-scaled uniform init; BN affine at identity, running stats (0, 1)."""
    rng = np.random.default_rng(seed)
    layers = []
    cin = IN_CHANNELS
    for spec in ARCHITECTURE:
        fan_in = spec.kernel * spec.kernel * cin
        limit = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit,
                        (spec.kernel, spec.kernel, cin, spec.out_channels))
        b = np.zeros(spec.out_channels)
        lp = LayerParams(w.astype(dtype), b.astype(dtype))
        if spec.batch_norm:
            lp.gamma = np.ones(spec.out_channels, dtype)
            lp.beta = np.zeros(spec.out_channels, dtype)
            lp.run_mean = np.zeros(spec.out_channels, dtype)
            lp.run_var = np.ones(spec.out_channels, dtype)
        layers.append(lp)
        cin = spec.out_channels
    params = NetworkParams(layers)
    project_first_layer(params)
    return params


def project_first_layer(params: NetworkParams) -> None:
    """Remove the per-output-channel mean of the first conv kernel."""
    w = params.layers[0].w
    w -= w.mean(axis=(0, 1, 2), keepdims=True).astype(w.dtype)


def trainable_parameter_count(params: NetworkParams) -> int:
    return sum(t.size for layer in params.layers for _, t in layer.trainable())


# -- forward / backward ------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, out: np.ndarray | None = None):
    n, h, w, c = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    s = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, ho, wo, k, k, c),
        (s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]))
    if out is None or out.shape != (n * ho * wo, k * k * c) \
            or out.dtype != x.dtype:
        out = np.empty((n * ho * wo, k * k * c), x.dtype)
    np.copyto(out.reshape(n, ho, wo, k, k, c), view)
    return out, ho, wo


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int) -> np.ndarray:
    n, h, w, c = x_shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    dx = np.zeros(x_shape, dcols.dtype)
    d6 = dcols.reshape(n, ho, wo, k, k, c)
    for ki in range(k):
        for kj in range(k):
            dx[:, ki:ki + ho * stride:stride,
               kj:kj + wo * stride:stride, :] += d6[:, :, :, ki, kj, :]
    return dx


def _stable_softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sample_dropout_masks(shapes_like: list, rng: np.random.Generator,
                         dtype=np.float32) -> list:
    """Inverted-dropout masks matching a cached forward's activation shapes."""
    masks = []
    scalar = np.dtype(dtype).type
    for spec, shape in zip(ARCHITECTURE, shapes_like):
        if spec.dropout > 0.0:
            keep = rng.random(shape) >= spec.dropout
            masks.append(keep.astype(dtype) / scalar(1.0 - spec.dropout))
        else:
            masks.append(None)
    return masks


def activation_shapes(batch: int, size_px: int) -> list:
    trace = spatial_trace(size_px)
    return [(batch, s, s, spec.out_channels)
            for s, spec in zip(trace[1:], ARCHITECTURE)]


def _forward(params: NetworkParams, x: np.ndarray, *, train: bool,
             bn_batch_stats: bool, dropout_masks: list | None,
             net_cfg: NetConfig, collect: bool):
    """Shared stack; x is (N, H, W, 1).  Returns (logits, cache)."""
    dtype = x.dtype.type
    cache = {"inputs": [], "cols": [], "bn": [], "relu": [], "shapes": []}
    for li, (spec, lp) in enumerate(zip(ARCHITECTURE, params.layers)):
        if collect:
            cache["inputs"].append(x)
        cols, ho, wo = _im2col(x, spec.kernel, spec.stride)
        y = cols @ lp.w.reshape(-1, spec.out_channels)
        y += lp.b
        y = y.reshape(x.shape[0], ho, wo, spec.out_channels)
        if collect:
            cache["cols"].append(cols)
            cache["shapes"].append(x.shape)
        if spec.batch_norm:
            if bn_batch_stats:
                mean = y.mean(axis=(0, 1, 2), dtype=np.float64)
                var = y.var(axis=(0, 1, 2), dtype=np.float64)
                if train:
                    m = net_cfg.bn_momentum
                    lp.run_mean[:] = (m * lp.run_mean
                                      + (1 - m) * mean).astype(lp.run_mean.dtype)
                    lp.run_var[:] = (m * lp.run_var
                                     + (1 - m) * var).astype(lp.run_var.dtype)
                mean = mean.astype(dtype)
                var = var.astype(dtype)
            else:
                mean, var = lp.run_mean, lp.run_var
            inv_std = 1.0 / np.sqrt(var + dtype(net_cfg.bn_eps))
            xhat = (y - mean) * inv_std
            y = lp.gamma * xhat + lp.beta
            if collect:
                cache["bn"].append((xhat, inv_std))
        elif collect:
            cache["bn"].append(None)
        if li < len(ARCHITECTURE) - 1:
            relu_mask = y > 0
            y = np.where(relu_mask, y, dtype(0.0))
            if collect:
                cache["relu"].append(relu_mask)
            mask = dropout_masks[li] if dropout_masks else None
            if mask is not None:
                y = y * mask
        elif collect:
            cache["relu"].append(None)
        x = np.ascontiguousarray(y)
    return x, cache


def _probs_from_logits(logits: np.ndarray, net_cfg: NetConfig) -> np.ndarray:
    clip = net_cfg.output_clip
    return np.clip(_stable_sigmoid(logits), clip, 1.0 - clip)


def forward_train(params: NetworkParams, windows: np.ndarray, *,
                  mode: str = "infer", dropout_rng=None,
                  net_cfg: NetConfig | None = None) -> np.ndarray:
    """Probabilities for normalized windows: (32, 32) -> (3,), batched OK."""
    net_cfg = net_cfg or NetConfig()
    x = np.asarray(windows)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim == 3:
        x = x[..., None]
    if x.shape[1] != WINDOW_PX or x.shape[2] != WINDOW_PX:
        raise ValueError(f"expected {WINDOW_PX}x{WINDOW_PX} windows")
    x = x.astype(params.dtype, copy=False)
    masks = None
    if mode == "train":
        if dropout_rng is None:
            raise ValueError("train mode needs a dropout rng/seed")
        if not isinstance(dropout_rng, np.random.Generator):
            dropout_rng = np.random.default_rng(dropout_rng)
        masks = sample_dropout_masks(
            activation_shapes(x.shape[0], WINDOW_PX), dropout_rng, params.dtype)
    elif mode != "infer":
        raise ValueError(f"unknown mode {mode!r}")
    logits, _ = _forward(params, x, train=False,
                         bn_batch_stats=(mode == "train"),
                         dropout_masks=masks, net_cfg=net_cfg, collect=False)
    probs = _probs_from_logits(logits, net_cfg).reshape(x.shape[0], -1)
    return probs[0] if single else probs


def forward_full(params: NetworkParams, image: np.ndarray, *,
                 net_cfg: NetConfig | None = None) -> np.ndarray:
    """Full-image inference: (H, W) normalized input -> (H', W', 3) probs."""
    net_cfg = net_cfg or NetConfig()
    x = np.asarray(image)
    if x.ndim != 2:
        raise ValueError("forward_full expects a single 2-D image")
    if min(x.shape) < WINDOW_PX:
        raise ValueError("image smaller than the training window")
    x = x[None, ..., None].astype(params.dtype, copy=False)
    logits, _ = _forward(params, x, train=False, bn_batch_stats=False,
                         dropout_masks=None, net_cfg=net_cfg, collect=False)
    return _probs_from_logits(logits, net_cfg)[0]


# -- loss and gradients -------------------------------------------------------

@dataclass
class TrainBatch:
    windows: np.ndarray            # (B, 32, 32) normalized
    d_index: np.ndarray            # (B,) in {0, 1, 2}
    rewards: np.ndarray            # (B,) in {0, 1}
    weights: np.ndarray            # (B,) positive

    def __post_init__(self):
        self.windows = np.asarray(self.windows)
        self.d_index = np.asarray(self.d_index, dtype=np.intp)
        self.rewards = np.asarray(self.rewards)
        self.weights = np.asarray(self.weights)
        if np.any(self.weights <= 0):
            raise ValueError("batch weights must be positive")
        if self.d_index.min() < 0 or self.d_index.max() >= 3:
            raise ValueError("jaw-opening index out of range")


@dataclass
class LossBreakdown:
    total: float
    cross_entropy: float
    regularizer: float


def _reg_scale(spec: LayerSpec, cin: int, mode: str) -> float:
    if mode == "sum":
        return 1.0
    if mode == "fan_in":
        return 1.0 / (spec.kernel * spec.kernel * cin)
    return 1.0 / (spec.kernel * spec.kernel * cin * spec.out_channels)


def regularizer(params: NetworkParams, mode: str = "sum") -> float:
    total = 0.0
    cin = IN_CHANNELS
    for spec, lp in zip(ARCHITECTURE, params.layers):
        total += spec.l2 * _reg_scale(spec, cin, mode) * float((lp.w ** 2).sum())
        cin = spec.out_channels
    return total


def loss(params: NetworkParams, batch: TrainBatch, *,
         net_cfg: NetConfig | None = None, reg_mode: str = "sum",
         bn_batch_stats: bool = False,
         dropout_masks: list | None = None) -> LossBreakdown:
    """Weighted cross entropy at the attempted jaw opening, plus kernel L2."""
    net_cfg = net_cfg or NetConfig()
    x = batch.windows[..., None].astype(params.dtype, copy=False)
    logits, _ = _forward(params, x, train=False, bn_batch_stats=bn_batch_stats,
                         dropout_masks=dropout_masks, net_cfg=net_cfg,
                         collect=False)
    z = logits.reshape(x.shape[0], -1)[np.arange(x.shape[0]), batch.d_index]
    r = batch.rewards.astype(z.dtype)
    ce_each = r * _stable_softplus(-z) + (1 - r) * _stable_softplus(z)
    ce = float(np.mean(batch.weights * ce_each))
    reg = regularizer(params, reg_mode)
    return LossBreakdown(ce + reg, ce, reg)


def loss_and_grads(params: NetworkParams, batch: TrainBatch, *,
                   net_cfg: NetConfig | None = None, reg_mode: str = "sum",
                   bn_batch_stats: bool = True, train_stats: bool = False,
                   dropout_masks: list | None = None):
    """Analytic gradients of `loss` for every trainable tensor.

    Returns (LossBreakdown, grads) with grads a list of per-layer dicts.
    ``bn_batch_stats`` selects batch vs running statistics;
    ``train_stats=True`` additionally updates the running stats in place.
    """
    net_cfg = net_cfg or NetConfig()
    b = batch.windows.shape[0]
    x = batch.windows[..., None].astype(params.dtype, copy=False)
    logits, cache = _forward(params, x, train=train_stats,
                             bn_batch_stats=bn_batch_stats,
                             dropout_masks=dropout_masks, net_cfg=net_cfg,
                             collect=True)
    z = logits.reshape(b, -1)[np.arange(b), batch.d_index]
    r = batch.rewards.astype(z.dtype)
    ce_each = r * _stable_softplus(-z) + (1 - r) * _stable_softplus(z)
    ce = float(np.mean(batch.weights * ce_each))
    reg = regularizer(params, reg_mode)

    # d loss / d logit, only at the attempted opening
    sig = _stable_sigmoid(z)
    dz = (batch.weights * (sig - r) / b).astype(params.dtype)
    dy = np.zeros_like(logits).reshape(b, -1)
    dy[np.arange(b), batch.d_index] = dz
    dy = dy.reshape(logits.shape)

    grads = [dict() for _ in ARCHITECTURE]
    cin_list = [IN_CHANNELS] + [s.out_channels for s in ARCHITECTURE[:-1]]
    for li in range(len(ARCHITECTURE) - 1, -1, -1):
        spec, lp = ARCHITECTURE[li], params.layers[li]
        if li < len(ARCHITECTURE) - 1:
            mask = dropout_masks[li] if dropout_masks else None
            if mask is not None:
                dy = dy * mask
            dy = np.where(cache["relu"][li], dy, dy.dtype.type(0.0))
        if spec.batch_norm:
            xhat, inv_std = cache["bn"][li]
            axes = (0, 1, 2)
            grads[li]["gamma"] = (dy * xhat).sum(axis=axes)
            grads[li]["beta"] = dy.sum(axis=axes)
            dxhat = dy * lp.gamma
            if bn_batch_stats:
                n = float(np.prod([dy.shape[a] for a in axes]))
                dy = (inv_std / n) * (n * dxhat - dxhat.sum(axis=axes)
                                      - xhat * (dxhat * xhat).sum(axis=axes))
                dy = dy.astype(params.dtype, copy=False)
            else:
                dy = dxhat * inv_std
        co = spec.out_channels
        dy2 = dy.reshape(-1, co)
        cols = cache["cols"][li]
        grads[li]["w"] = (cols.T @ dy2).reshape(lp.w.shape)
        grads[li]["b"] = dy2.sum(axis=0)
        if li > 0:
            dcols = dy2 @ lp.w.reshape(-1, co).T
            dy = _col2im(dcols, cache["shapes"][li], spec.kernel, spec.stride)
    for li, (spec, lp) in enumerate(zip(ARCHITECTURE, params.layers)):
        scale = spec.l2 * _reg_scale(spec, cin_list[li], reg_mode)
        grads[li]["w"] = grads[li]["w"] + 2.0 * scale * lp.w
    return LossBreakdown(ce + reg, ce, reg), grads


class InferenceEngine:
    """Repeat-call full-image inference with preallocated buffers.

    Numerically this is `forward_full` with the inference-mode batch-norm
    affine folded into the convolution weights; buffers are reused across
    calls, which matters when a value map needs 20 rotated forwards.
    """

    def __init__(self, params: NetworkParams, net_cfg: NetConfig | None = None):
        self.net_cfg = net_cfg or NetConfig()
        self.version = params.version
        self.wmats = []
        self.shifts = []
        cin = IN_CHANNELS
        for spec, lp in zip(ARCHITECTURE, params.layers):
            w = lp.w.reshape(-1, spec.out_channels).astype(np.float32)
            if spec.batch_norm:
                s = (lp.gamma / np.sqrt(lp.run_var + self.net_cfg.bn_eps))
                s = s.astype(np.float32)
                self.wmats.append(np.ascontiguousarray(w * s))
                self.shifts.append(((lp.b - lp.run_mean) * s
                                    + lp.beta).astype(np.float32))
            else:
                self.wmats.append(np.ascontiguousarray(w))
                self.shifts.append(lp.b.astype(np.float32))
            cin = spec.out_channels
        self._bufs: dict = {}

    def _layer_buffers(self, size_px: int):
        bufs = self._bufs.get(size_px)
        if bufs is None:
            bufs = []
            side = size_px
            cin = IN_CHANNELS
            for spec in ARCHITECTURE:
                out_side = (side - spec.kernel) // spec.stride + 1
                cols = np.empty((out_side * out_side,
                                 spec.kernel * spec.kernel * cin), np.float32)
                y = np.empty((out_side * out_side, spec.out_channels),
                             np.float32)
                bufs.append((cols, y, out_side))
                side, cin = out_side, spec.out_channels
            self._bufs[size_px] = bufs
        return bufs

    def full(self, image: np.ndarray) -> np.ndarray:
        """(H, H) normalized image -> (H', H', 3) probabilities."""
        if image.ndim != 2 or image.shape[0] != image.shape[1]:
            raise ValueError("engine expects a square 2-D image")
        bufs = self._layer_buffers(image.shape[0])
        x = np.ascontiguousarray(image, dtype=np.float32)[None, ..., None]
        for li, (spec, (cols, y, out_side)) in enumerate(
                zip(ARCHITECTURE, bufs)):
            _im2col(x, spec.kernel, spec.stride, out=cols)
            np.dot(cols, self.wmats[li], out=y)
            y += self.shifts[li]
            if li < len(ARCHITECTURE) - 1:
                np.maximum(y, 0.0, out=y)
            x = y.reshape(1, out_side, out_side, spec.out_channels)
        return _probs_from_logits(x[0].copy(), self.net_cfg)


class NonFiniteGradient(RuntimeError):
    pass


@dataclass
class SGDState:
    learning_rate: float
    momentum: float
    velocities: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: NetworkParams, learning_rate: float,
                   momentum: float = 0.9) -> "SGDState":
        vel = [{name: np.zeros_like(t) for name, t in layer.trainable()}
               for layer in params.layers]
        return cls(learning_rate, momentum, vel)


def backward_and_step(params: NetworkParams, batch: TrainBatch,
                      opt: SGDState, *, net_cfg: NetConfig | None = None,
                      reg_mode: str = "sum",
                      dropout_rng=None) -> LossBreakdown:
    """One SGD-with-momentum step (in place).  Raises on non-finite gradients."""
    if not isinstance(dropout_rng, np.random.Generator):
        dropout_rng = np.random.default_rng(dropout_rng)
    masks = sample_dropout_masks(
        activation_shapes(batch.windows.shape[0], WINDOW_PX), dropout_rng,
        params.dtype)
    breakdown, grads = loss_and_grads(
        params, batch, net_cfg=net_cfg, reg_mode=reg_mode,
        bn_batch_stats=True, train_stats=True, dropout_masks=masks)
    for g in grads:
        for t in g.values():
            if not np.isfinite(t).all():
                raise NonFiniteGradient("aborting step: non-finite gradient")
    if not math.isfinite(breakdown.total):
        raise NonFiniteGradient("aborting step: non-finite loss")
    for layer, g, v in zip(params.layers, grads, opt.velocities):
        for name, tensor in layer.trainable():
            vel = v[name]
            vel *= opt.momentum
            vel -= opt.learning_rate * g[name].astype(tensor.dtype)
            tensor += vel
    project_first_layer(params)
    params.version += 1
    return breakdown
