"""Feedforward network: affine layers, ReLU hiddens, softmax output.

The forward pass can run clean, masked (dropout family), or with stored
additive pre-activation noise; the backward pass produces exact
gradients of the cross-entropy loss for whichever corruption the trace
recorded. The rectifier's subgradient at 0 is taken as 0 everywhere.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    IoError,
    NumericError,
    ShapeError,
)
from .linalg import RngStream
from .noise import MaskTrace, apply_mask, gaussian_offsets, mask_scale_factors

CHECKPOINT_MAGIC = b"DAUG"
CHECKPOINT_VERSION = 1


@dataclass
class LayerParams:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray     # (1, out_dim)
    bias_enabled: bool = True

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.bias.copy(), self.bias_enabled)


@dataclass
class MlpModel:
    layers: list

    @property
    def layer_dims(self) -> list:
        return [self.layers[0].in_dim] + [l.out_dim for l in self.layers]

    @property
    def hidden_count(self) -> int:
        return len(self.layers) - 1

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_dim

    def hidden_widths(self) -> list:
        return [l.out_dim for l in self.layers[:-1]]

    def mask_widths(self) -> list:
        """Widths of the mask slots: input layer plus every hidden layer."""
        return [self.input_dim] + self.hidden_widths()

    def copy(self) -> "MlpModel":
        return MlpModel([l.copy() for l in self.layers])

    def validate(self) -> "MlpModel":
        if not self.layers:
            raise ConfigError("model has no layers")
        for i, layer in enumerate(self.layers):
            if layer.weights.ndim != 2 or layer.bias.shape != (1, layer.out_dim):
                raise ShapeError(
                    f"layer {i}: weights {layer.weights.shape} / bias {layer.bias.shape}"
                )
            if i > 0 and self.layers[i - 1].out_dim != layer.in_dim:
                raise ShapeError(
                    f"layer {i - 1} out_dim {self.layers[i - 1].out_dim} "
                    f"!= layer {i} in_dim {layer.in_dim}"
                )
            if not (np.isfinite(layer.weights).all() and np.isfinite(layer.bias).all()):
                raise NumericError(f"layer {i} has non-finite parameters")
        return self


@dataclass
class ForwardTrace:
    """Everything one forward pass produced, kept for backprop and loss."""

    x: np.ndarray
    x_used: np.ndarray
    pre_activations: list
    activations: list
    logits: np.ndarray
    probabilities: np.ndarray
    log_probabilities: np.ndarray
    mask_trace: MaskTrace | None = None
    act_scales: list | None = None


@dataclass
class Gradients:
    d_weights: list
    d_bias: list
    d_input: np.ndarray


def init_model(layer_dims, stream: RngStream, hidden_bias: bool = True) -> MlpModel:
    """Glorot-uniform weights, zero biases.

    ``hidden_bias=False`` freezes hidden-layer biases at zero (mirrors
    the with/without-hidden-bias model variants); the output layer
    always keeps its bias.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ConfigError(f"need at least input and output dims, got {dims}")
    if any(d < 1 for d in dims):
        raise ConfigError(f"layer dims must be positive, got {dims}")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = stream.substream(i).uniform(fan_in * fan_out, -bound, bound)
        is_output = i == len(dims) - 2
        layers.append(LayerParams(
            weights=w.reshape(fan_in, fan_out),
            bias=np.zeros((1, fan_out)),
            bias_enabled=True if is_output else hidden_bias,
        ))
    return MlpModel(layers)


def _check_mask_trace(model: MlpModel, trace: MaskTrace, batch: int) -> None:
    widths = model.mask_widths()
    got = trace.widths()
    if got != widths:
        raise ShapeError(f"mask widths {got} do not match model slots {widths}")
    if trace.batch != batch:
        raise ShapeError(f"mask batch {trace.batch} != input batch {batch}")
    if trace.hidden_noise is not None and len(trace.hidden_noise) != model.hidden_count:
        raise ShapeError(
            f"{len(trace.hidden_noise)} noise slots for {model.hidden_count} hidden layers"
        )


def forward(model: MlpModel, x, masks: MaskTrace | None = None,
            act_scales=None) -> ForwardTrace:
    """Run the network, recording per-layer values.

    With ``masks`` given, the input mask is applied to ``x`` first (no
    rectifier at the input) and each hidden activation goes through
    rect -> mask -> scaling. ``act_scales`` are the constant test-time
    factors from ``noise.evaluation_scales`` (slot 0 scales the input).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match model input {model.input_dim}")
    if act_scales is not None and len(act_scales) != model.hidden_count + 1:
        raise ShapeError(
            f"{len(act_scales)} activation scales for {model.hidden_count} hidden layers"
        )
    if masks is not None:
        _check_mask_trace(model, masks, x.shape[0])

    x_used = x
    if masks is not None:
        x_used = apply_mask(x, masks.masks[0], masks.levels[0], masks.scaling)
    if act_scales is not None:
        x_used = x_used * act_scales[0]

    pre, acts = [], []
    a = x_used
    for i, layer in enumerate(model.layers[:-1]):
        h = a @ layer.weights
        if layer.bias_enabled:
            h = h + layer.bias
        if masks is not None and masks.hidden_noise is not None:
            h = h + masks.hidden_noise[i]
        pre.append(h)
        a = np.maximum(h, 0.0)
        if masks is not None:
            a = apply_mask(a, masks.masks[i + 1], masks.levels[i + 1], masks.scaling)
        if act_scales is not None:
            a = a * act_scales[i + 1]
        acts.append(a)

    out = model.layers[-1]
    logits = a @ out.weights
    if out.bias_enabled:
        logits = logits + out.bias
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits in forward pass")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    return ForwardTrace(x, x_used, pre, acts, logits, probs, log_probs,
                        masks, list(act_scales) if act_scales is not None else None)


def _check_labels(trace: ForwardTrace, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, classes = trace.probabilities.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DomainError(f"labels must be in [0, {classes}), got range "
                          f"[{labels.min()}, {labels.max()}]")
    return labels


def loss_ce(trace: ForwardTrace, labels) -> float:
    """Mean negative log probability of the true class."""
    labels = _check_labels(trace, labels)
    picked = trace.log_probabilities[np.arange(labels.size), labels]
    return float(-picked.mean())


def backward(model: MlpModel, trace: ForwardTrace, labels) -> Gradients:
    """Exact gradients of ``loss_ce`` w.r.t. every parameter and the input.

    Honors the trace: masked units propagate zero, inverse-scaling
    factors propagate linearly, and additive pre-activation noise is a
    constant. The ReLU gate is taken from the (possibly noisy) stored
    pre-activations with rect'(0) = 0.
    """
    labels = _check_labels(trace, labels)
    n = labels.size
    n_layers = len(model.layers)
    if len(trace.activations) != n_layers - 1:
        raise ShapeError(
            f"trace has {len(trace.activations)} hidden activations for "
            f"{n_layers - 1} hidden layers"
        )

    onehot = np.zeros_like(trace.probabilities)
    onehot[np.arange(n), labels] = 1.0
    delta = (trace.probabilities - onehot) / n

    d_weights = [None] * n_layers
    d_bias = [None] * n_layers
    mt = trace.mask_trace
    for i in range(n_layers - 1, -1, -1):
        layer = model.layers[i]
        a_in = trace.x_used if i == 0 else trace.activations[i - 1]
        if a_in.shape[1] != layer.in_dim:
            raise ShapeError(f"layer {i} input width {a_in.shape[1]} != {layer.in_dim}")
        d_weights[i] = a_in.T @ delta
        if layer.bias_enabled:
            d_bias[i] = delta.sum(axis=0, keepdims=True)
        else:
            d_bias[i] = np.zeros((1, layer.out_dim))
        delta = delta @ layer.weights.T
        if i > 0:
            j = i - 1
            factor = (trace.pre_activations[j] > 0.0).astype(np.float64)
            if mt is not None:
                factor = factor * mask_scale_factors(mt.masks[j + 1], mt.levels[j + 1],
                                                     mt.scaling)
            if trace.act_scales is not None:
                factor = factor * trace.act_scales[j + 1]
            delta = delta * factor

    d_input = delta
    if mt is not None:
        d_input = d_input * mask_scale_factors(mt.masks[0], mt.levels[0], mt.scaling)
    if trace.act_scales is not None:
        d_input = d_input * trace.act_scales[0]
    return Gradients(d_weights, d_bias, d_input)


def sgd_step(model: MlpModel, grads: Gradients, lr: float) -> MlpModel:
    """Plain gradient step: theta <- theta - lr * d_theta."""
    if not np.isfinite(lr):
        raise DomainError(f"learning rate must be finite, got {lr}")
    if len(grads.d_weights) != len(model.layers) or len(grads.d_bias) != len(model.layers):
        raise ShapeError(
            f"{len(grads.d_weights)} weight / {len(grads.d_bias)} bias gradients "
            f"for {len(model.layers)} layers"
        )
    layers = []
    for layer, dw, db in zip(model.layers, grads.d_weights, grads.d_bias):
        if dw.shape != layer.weights.shape or db.shape != layer.bias.shape:
            raise ShapeError(
                f"gradient shapes {dw.shape}/{db.shape} do not match "
                f"layer shapes {layer.weights.shape}/{layer.bias.shape}"
            )
        w = layer.weights - lr * dw
        b = layer.bias - lr * db if layer.bias_enabled else layer.bias.copy()
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise NumericError("sgd_step produced non-finite parameters")
        layers.append(LayerParams(w, b, layer.bias_enabled))
    return MlpModel(layers)


def forward_gaussian(model: MlpModel, x, masks: MaskTrace, stream: RngStream) -> ForwardTrace:
    """Forward pass with variance-matched Gaussian pre-activation noise.

    Each hidden layer's noise variance depends on its (noisy) input, so
    the draws happen during the walk; the realized offsets are stored in
    the returned trace's mask_trace, making the trace replayable with a
    plain ``forward`` call and differentiable by ``backward`` with the
    noise held constant.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    _check_mask_trace(model, masks, x.shape[0])
    if masks.hidden_noise is not None:
        raise ConfigError("mask trace already carries realized noise; use forward")
    a = apply_mask(x, masks.masks[0], masks.levels[0], masks.scaling)
    offsets = []
    for i, layer in enumerate(model.layers[:-1]):
        h = a @ layer.weights
        if layer.bias_enabled:
            h = h + layer.bias
        off = gaussian_offsets(a, layer.weights, stream.substream(i))
        offsets.append(off)
        a = np.maximum(h + off, 0.0)
        a = apply_mask(a, masks.masks[i + 1], masks.levels[i + 1], masks.scaling)
    realized = MaskTrace(masks.masks, masks.levels, masks.scaling, hidden_noise=offsets)
    return forward(model, x, realized)


def evaluate(model: MlpModel, x, labels, act_scales=None) -> dict:
    """Deterministic mask-free metrics: argmax error rate and mean loss."""
    trace = forward(model, x, masks=None, act_scales=act_scales)
    labels = _check_labels(trace, labels)
    predicted = trace.probabilities.argmax(axis=1)
    return {
        "error_rate": float((predicted != labels).mean()),
        "mean_loss": loss_ce(trace, labels),
    }


# --- checkpoint format -------------------------------------------------
#
# magic "DAUG" | version u32 | layer count u32 | per layer:
#   in_dim u32 | out_dim u32 | bias_enabled u8 |
#   weights f64 LE row-major | bias f64 LE
# All integers little-endian.

def model_to_bytes(model: MlpModel) -> bytes:
    model.validate()
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<IIB", layer.in_dim, layer.out_dim,
                                 1 if layer.bias_enabled else 0))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(blob: bytes) -> MlpModel:
    def need(offset, count, what):
        if offset + count > len(blob):
            raise FormatError(f"truncated checkpoint: {what} at byte offset {offset}")
        return blob[offset:offset + count]

    if need(0, 4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic at byte offset 0")
    (version,) = struct.unpack("<I", need(4, 4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte offset 4")
    (n_layers,) = struct.unpack("<I", need(8, 4, "layer count"))
    if n_layers < 1:
        raise FormatError("checkpoint declares zero layers at byte offset 8")
    off = 12
    layers = []
    for i in range(n_layers):
        in_dim, out_dim, bias_flag = struct.unpack("<IIB", need(off, 9, f"layer {i} header"))
        off += 9
        if in_dim < 1 or out_dim < 1:
            raise FormatError(f"layer {i} has invalid dims at byte offset {off - 9}")
        w_bytes = need(off, 8 * in_dim * out_dim, f"layer {i} weights")
        w = np.frombuffer(w_bytes, dtype="<f8").reshape(in_dim, out_dim).astype(np.float64)
        off += 8 * in_dim * out_dim
        b_bytes = need(off, 8 * out_dim, f"layer {i} bias")
        b = np.frombuffer(b_bytes, dtype="<f8").reshape(1, out_dim).astype(np.float64)
        off += 8 * out_dim
        layers.append(LayerParams(w, b, bool(bias_flag)))
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes at byte offset {off}")
    return MlpModel(layers).validate()


def save_model(model: MlpModel, path) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> MlpModel:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    return model_from_bytes(blob)


def model_sha256(model: MlpModel) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()
