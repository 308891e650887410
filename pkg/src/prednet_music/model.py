"""Four-level convLSTM predictive-coding network (PredNet wiring).

Every level holds a representation ``R`` and cell ``C`` (a convLSTM), emits a
prediction ``A_hat`` of its input ``A`` and passes the rectified error
``E = [relu(A - A_hat), relu(A_hat - A)]`` upward, where it becomes the next
level's target after a conv + 2x2 max-pool. Representations are updated
top-down first, each receiving its own previous error and the upsampled
representation from the level above.

Pixel frames live in [0, 255]; the network works on frames divided by 255 and
reports predictions back in pixel units.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dsp import FRAME_COLS, FRAME_ROWS
from .errors import ShapeMismatchError, UsageError

CHANNEL_PRESETS = {
    "stock": (1, 32, 64, 128),
    "desk": (1, 16, 32, 64),
}

LAYER_LOSS_PRESETS = {
    "prediction": (1.0, 0.0, 0.0, 0.0),
    "all": (1.0, 0.1, 0.1, 0.1),
}

GATES = ("i", "f", "o", "g")


@dataclass(frozen=True)
class ModelConfig:
    a_channels: tuple = CHANNEL_PRESETS["stock"]
    r_channels: tuple | None = None
    layer_loss_weights: tuple = LAYER_LOSS_PRESETS["prediction"]
    frame_rows: int = FRAME_ROWS
    frame_cols: int = FRAME_COLS
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "a_channels", tuple(int(c) for c in self.a_channels))
        r = self.a_channels if self.r_channels is None else self.r_channels
        object.__setattr__(self, "r_channels", tuple(int(c) for c in r))
        object.__setattr__(
            self, "layer_loss_weights", tuple(float(w) for w in self.layer_loss_weights)
        )
        n = len(self.a_channels)
        if n < 1 or len(self.r_channels) != n or len(self.layer_loss_weights) != n:
            raise UsageError("a_channels, r_channels and layer_loss_weights must have equal length")
        if self.a_channels[0] != 1:
            raise UsageError("the bottom layer sees one spectrogram channel (a_channels[0] == 1)")
        if any(w < 0 for w in self.layer_loss_weights):
            raise UsageError("layer loss weights must be non-negative")
        if self.kernel_size % 2 != 1:
            raise UsageError("kernel_size must be odd")

    @property
    def num_layers(self) -> int:
        return len(self.a_channels)

    @property
    def e_channels(self) -> tuple:
        return tuple(2 * a for a in self.a_channels)

    def spatial_shapes(self):
        """Per-level (rows, cols); each level ceil-halves the one below."""
        shapes = [(self.frame_rows, self.frame_cols)]
        for _ in range(1, self.num_layers):
            h, w = shapes[-1]
            shapes.append((-(-h // 2), -(-w // 2)))
        return shapes

    def cell_input_channels(self, layer: int) -> int:
        c = self.e_channels[layer]
        if layer < self.num_layers - 1:
            c += self.r_channels[layer + 1]
        return c

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def lambda_time(t: int) -> float:
    """Weight of time step ``t`` in the training loss (the first prediction is blind)."""
    return 0.0 if t == 0 else 1.0


@dataclass
class LayerState:
    R: Tensor
    C: Tensor
    E: Tensor


class PredNetModel:
    """Parameter container; the computation lives in :func:`step`."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        k = config.kernel_size
        for l in range(config.num_layers):
            r = config.r_channels[l]
            cin = config.cell_input_channels(l)
            self._add(f"layer{l}.cell.wx", _glorot(rng, (k, k, cin, 4 * r)))
            self._add(f"layer{l}.cell.wh", _glorot(rng, (k, k, r, 4 * r)))
            bias = np.zeros(4 * r)
            bias[r : 2 * r] = 1.0  # forget gate
            self._add(f"layer{l}.cell.bias", bias)
            self._add(f"layer{l}.pred.weight", _glorot(rng, (k, k, r, config.a_channels[l])))
            self._add(f"layer{l}.pred.bias", np.zeros(config.a_channels[l]))
            if l > 0:
                cin = config.e_channels[l - 1]
                self._add(f"layer{l}.target.weight", _glorot(rng, (k, k, cin, config.a_channels[l])))
                self._add(f"layer{l}.target.bias", np.zeros(config.a_channels[l]))

    def _add(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def parameter_shapes(self) -> dict:
        return {name: p.shape for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def zero_parameters(self):
        for p in self.params.values():
            p.data[...] = 0

    def frozen(self) -> dict[str, Tensor]:
        """Gradient-free views of the parameters for evaluation."""
        return {name: Tensor(p.data, name=name) for name, p in self.params.items()}

    def initial_state(self, batch: int = 1, requires_grad: bool = False) -> list[LayerState]:
        cfg = self.config
        states = []
        for l, (h, w) in enumerate(cfg.spatial_shapes()):
            zeros = lambda c: Tensor(np.zeros((batch, h, w, c), dtype=self.dtype))
            states.append(LayerState(zeros(cfg.r_channels[l]), zeros(cfg.r_channels[l]), zeros(cfg.e_channels[l])))
        return states


def _glorot(rng, shape):
    kh, kw, cin, cout = shape
    limit = math.sqrt(6.0 / (kh * kw * (cin + cout)))
    return rng.uniform(-limit, limit, size=shape)


def conv_lstm(params, prefix: str, x: Tensor, h: Tensor, c: Tensor):
    """One convLSTM update; returns (hidden, cell)."""
    # one convolution over [x, h] equals the sum of the input and hidden convolutions
    kernel = ag.concat([params[prefix + ".wx"], params[prefix + ".wh"]], axis=2)
    gates = ag.conv2d(ag.concat([x, h]), kernel, params[prefix + ".bias"])
    i, f, o, g = ag.split(gates, 4)
    i, f, o, g = ag.sigmoid(i), ag.sigmoid(f), ag.sigmoid(o), ag.tanh(g)
    c_new = f * c + i * g
    h_new = o * ag.tanh(c_new)
    return h_new, c_new


def _as_batch(frame, dtype) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[None]
    if frame.ndim == 3:
        frame = frame[..., None]
    return (frame / 255.0).astype(dtype)


def check_state(model: PredNetModel, state, batch: int):
    cfg = model.config
    if len(state) != cfg.num_layers:
        raise ShapeMismatchError(f"state has {len(state)} layers, model has {cfg.num_layers}")
    for l, ((h, w), s) in enumerate(zip(cfg.spatial_shapes(), state)):
        expect = {
            "R": (batch, h, w, cfg.r_channels[l]),
            "C": (batch, h, w, cfg.r_channels[l]),
            "E": (batch, h, w, cfg.e_channels[l]),
        }
        for key, shape in expect.items():
            got = getattr(s, key).shape
            if got != shape:
                raise ShapeMismatchError(f"layer {l} {key} has shape {got}, expected {shape}")


def step_tensors(model: PredNetModel, params, state, frame: np.ndarray):
    """Core time step on tensors.

    ``frame`` is already scaled to [0, 1] with shape (N, H, W, 1). Returns
    (new_state, A_hat_0 tensor, list of per-layer E tensors).
    """
    cfg = model.config
    L = cfg.num_layers
    shapes = cfg.spatial_shapes()
    new_R, new_C = [None] * L, [None] * L
    for l in reversed(range(L)):
        inputs = [state[l].E]
        if l < L - 1:
            inputs.append(ag.upsample2x(new_R[l + 1], shapes[l]))
        x = inputs[0] if len(inputs) == 1 else ag.concat(inputs)
        new_R[l], new_C[l] = conv_lstm(params, f"layer{l}.cell", x, state[l].R, state[l].C)

    A = Tensor(frame)
    errors, a_hat0 = [], None
    for l in range(L):
        a_hat = ag.relu(ag.conv2d(new_R[l], params[f"layer{l}.pred.weight"], params[f"layer{l}.pred.bias"]))
        if l == 0:
            a_hat = ag.clamp(a_hat, 0.0, 1.0)
            a_hat0 = a_hat
        e = ag.concat([ag.relu(A - a_hat), ag.relu(a_hat - A)])
        errors.append(e)
        if l < L - 1:
            A = ag.maxpool2x2(
                ag.relu(ag.conv2d(e, params[f"layer{l + 1}.target.weight"], params[f"layer{l + 1}.target.bias"]))
            )
    new_state = [LayerState(new_R[l], new_C[l], errors[l]) for l in range(L)]
    return new_state, a_hat0, errors


def step(model: PredNetModel, state, frame):
    """Advance the network by one frame without recording gradients.

    ``frame`` holds pixels in [0, 255], shape (rows, cols) or (N, rows, cols).
    Returns (new_state, prediction in pixels, per-layer mean error).
    The prediction is the network's guess for ``frame`` made from the past.
    """
    x = _as_batch(frame, model.dtype)
    cfg = model.config
    if x.shape[1:3] != (cfg.frame_rows, cfg.frame_cols):
        raise ShapeMismatchError(f"frame shape {x.shape[1:3]} does not match model {(cfg.frame_rows, cfg.frame_cols)}")
    check_state(model, state, x.shape[0])
    new_state, a_hat, errors = step_tensors(model, model.frozen(), state, x)
    prediction = a_hat.data[..., 0] * 255.0
    magnitudes = [float(e.data.mean()) for e in errors]
    if np.asarray(frame).ndim == 2:
        prediction = prediction[0]
    return new_state, prediction, magnitudes


def pixel_mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"pixel_mse: shapes {pred.shape} and {target.shape} differ")
    return float(np.mean((pred - target) ** 2))


@dataclass
class SequenceOutput:
    predictions: np.ndarray | None  # (N, T-1, rows, cols) pixels, prediction for frames 1..T-1
    mse: np.ndarray  # (N, T-1) pixel MSE per scored step
    loss: Tensor  # scalar training loss


def forward_sequence(
    model: PredNetModel, frames, train: bool = False, keep_predictions: bool = True
) -> SequenceOutput:
    """Run the network over a frame sequence from a zero state.

    ``frames``: (T, rows, cols) or (N, T, rows, cols) pixels. The prediction
    produced while stepping with frame ``t`` was computed from frames
    ``< t``; predictions for ``t >= 1`` are returned and scored.
    With ``train=True`` the returned loss carries a gradient tape; with
    ``keep_predictions=False`` only the per-step MSE is kept (predictions is None).
    """
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    n, T = frames.shape[:2]
    if T < 2:
        raise UsageError("forward_sequence needs at least 2 frames")
    cfg = model.config
    if frames.shape[2:] != (cfg.frame_rows, cfg.frame_cols):
        raise ShapeMismatchError(f"frame shape {frames.shape[2:]} does not match model")
    params = model.params if train else model.frozen()
    weights = cfg.layer_loss_weights
    state = model.initial_state(n)
    x = (frames[..., None] / 255.0).astype(model.dtype)
    preds = np.empty((n, T - 1, cfg.frame_rows, cfg.frame_cols)) if keep_predictions else None
    mse = np.empty((n, T - 1))
    loss = Tensor(np.zeros((), dtype=model.dtype))
    for t in range(T):
        state, a_hat, errors = step_tensors(model, params, state, x[:, t])
        if t > 0:
            pred = a_hat.data[..., 0].astype(np.float64) * 255.0
            mse[:, t - 1] = ((pred - frames[:, t]) ** 2).mean(axis=(1, 2))
            if keep_predictions:
                preds[:, t - 1] = pred
        w_t = lambda_time(t)
        if w_t == 0:
            continue
        for l, e in enumerate(errors):
            if weights[l] > 0:
                loss = loss + ag.mul(ag.mean(e), w_t * weights[l])
    return SequenceOutput(preds, mse, loss)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, Tensor]) -> None:
        grads = {name: p.grad for name, p in params.items()}
        values = {name: p.data for name, p in params.items()}
        new_values = adam_step(values, grads, self)
        for name, p in params.items():
            p.data = new_values[name]


def adam_step(params: dict, grads: dict, opt: Adam) -> dict:
    """Bias-corrected Adam update; advances ``opt.step_count`` and its moments in place.

    A missing gradient (``None``) is treated as zero.
    """
    opt.step_count += 1
    t = opt.step_count
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    out = {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        if g.shape != value.shape:
            raise ShapeMismatchError(f"gradient for {name} has shape {g.shape}, expected {value.shape}")
        m = opt.m.get(name)
        v = opt.v.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        opt.m[name], opt.v[name] = m.astype(value.dtype), v.astype(value.dtype)
        update = opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        out[name] = (value - update).astype(value.dtype)
    return out
