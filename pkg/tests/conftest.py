"""Shared test fixtures and the independent gradient oracle.

The oracle reimplements the forward pass from scratch in extended
precision (longdouble) and differentiates by central differences at
eps = 1e-5, sharpened by one Richardson step (pairing eps with 2*eps)
so truncation error cancels to O(eps^4) while roundoff stays far below
the 1e-6 relative tolerance. It shares no code with the library.

ReLU makes the loss piecewise smooth, so finite differences are only
trustworthy away from the kinks; ``draw_case`` redraws its net until
every pre-activation clears a margin much larger than the probe step.
"""

import numpy as np
import pytest

from dropaug import (
    Dataset,
    DataBundle,
    MaskTrace,
    NoiseScheme,
    RngStream,
    backward,
    forward,
    forward_gaussian,
    init_model,
    sample_mask_trace,
    split,
    synth_blobs,
)

LD = np.longdouble
REL_FLOOR = 1e-7  # relative error denominator floor for near-zero gradients
KINK_MARGIN = 1e-3


def oracle_loss_fn(model, trace, labels):
    """Build an extended-precision loss closure mirroring the trace.

    Returns (params, f) where mutating the longdouble arrays in
    ``params`` changes what ``f()`` computes. The forward walk below is
    written independently of the library's.
    """
    mt = trace.mask_trace
    weights = [np.array(l.weights, dtype=LD) for l in model.layers]
    biases = [np.array(l.bias, dtype=LD) for l in model.layers]
    flags = [l.bias_enabled for l in model.layers]
    x = np.array(trace.x, dtype=LD)
    masks = [np.array(m, dtype=LD) for m in mt.masks] if mt else None
    levels = [np.array(v, dtype=LD) for v in mt.levels] if mt else None
    noise = ([np.array(o, dtype=LD) for o in mt.hidden_noise]
             if mt is not None and mt.hidden_noise is not None else None)
    scaling = mt.scaling if mt else "off"
    scales = ([LD(s) for s in trace.act_scales]
              if trace.act_scales is not None else None)
    labels = np.asarray(labels).reshape(-1)

    def corrupt(a, slot):
        if masks is not None:
            a = a * masks[slot]
            if scaling == "train_time_inverse":
                a = a / (LD(1.0) - levels[slot])
        if scales is not None:
            a = a * scales[slot]
        return a

    def f():
        a = corrupt(x, 0)
        for i in range(len(weights) - 1):
            h = a @ weights[i]
            if flags[i]:
                h = h + biases[i]
            if noise is not None:
                h = h + noise[i]
            a = corrupt(np.maximum(h, LD(0.0)), i + 1)
        z = a @ weights[-1]
        if flags[-1]:
            z = z + biases[-1]
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -logp[np.arange(labels.size), labels].mean()

    return {"weights": weights, "biases": biases, "x": x, "flags": flags}, f


def _central_diff(f, arr, eps):
    grad = np.zeros(arr.shape, dtype=LD)
    flat, out = arr.reshape(-1), grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = f()
        flat[j] = orig - eps
        f_minus = f()
        flat[j] = orig
        out[j] = (f_plus - f_minus) / (LD(2.0) * eps)
    return grad


def richardson_grad(f, arr, eps=1e-5):
    e = LD(eps)
    g1 = _central_diff(f, arr, e)
    g2 = _central_diff(f, arr, LD(2.0) * e)
    return (LD(4.0) * g1 - g2) / LD(3.0)


def max_rel_err(analytic, numeric, floor=REL_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def gradient_check(model, trace, labels, eps=1e-5, floor=REL_FLOOR):
    """Worst relative error between backward() and the oracle, over
    every weight matrix, enabled bias, and the input."""
    params, f = oracle_loss_fn(model, trace, labels)
    grads = backward(model, trace, labels)
    worst = 0.0
    for i, w in enumerate(params["weights"]):
        worst = max(worst, max_rel_err(grads.d_weights[i],
                                       richardson_grad(f, w, eps), floor))
    for i, b in enumerate(params["biases"]):
        if params["flags"][i]:
            worst = max(worst, max_rel_err(grads.d_bias[i],
                                           richardson_grad(f, b, eps), floor))
        else:
            assert not grads.d_bias[i].any(), "disabled bias must get zero gradient"
    worst = max(worst, max_rel_err(grads.d_input,
                                   richardson_grad(f, params["x"], eps), floor))
    return worst


def min_abs_pre(trace):
    return min(float(np.abs(p).min()) for p in trace.pre_activations)


def draw_case(dims, seed, batch, condition="plain", margin=KINK_MARGIN,
              max_attempts=60):
    """Deterministically draw (model, trace, labels) clear of ReLU kinks.

    ``condition`` picks the corruption the trace carries:
    plain | plain_nobias | dropout_inverse | dropout_off |
    random_inverse | test_scales | gaussian.
    """
    widths_of = lambda m: m.mask_widths()
    for attempt in range(max_attempts):
        s = RngStream(seed, 7000 + attempt)
        hidden_bias = condition != "plain_nobias"
        model = init_model(dims, s.substream(0), hidden_bias=hidden_bias)
        x = s.substream(1).uniform(batch * dims[0], -1.0, 1.0).reshape(batch, dims[0])
        labels = s.substream(2).integers(batch, 0, dims[-1])
        if condition in ("plain", "plain_nobias"):
            trace = forward(model, x)
        elif condition == "dropout_inverse":
            scheme = NoiseScheme("dropout", p_input=0.2, p_hidden=0.5)
            masks = sample_mask_trace(scheme, widths_of(model), batch, s.substream(3))
            trace = forward(model, x, masks)
        elif condition == "dropout_off":
            scheme = NoiseScheme("dropout", p_input=0.1, p_hidden=0.3, scaling="off")
            masks = sample_mask_trace(scheme, widths_of(model), batch, s.substream(3))
            trace = forward(model, x, masks)
        elif condition == "random_inverse":
            scheme = NoiseScheme("random_dropout", p_max_input=0.4, p_max_hidden=0.6)
            masks = sample_mask_trace(scheme, widths_of(model), batch, s.substream(3))
            trace = forward(model, x, masks)
        elif condition == "test_scales":
            scales = [0.8] + [0.5] * model.hidden_count
            trace = forward(model, x, act_scales=scales)
        elif condition == "gaussian":
            scheme = NoiseScheme("gaussian_matched", p_input=0.2, scaling="off")
            masks = sample_mask_trace(scheme, widths_of(model), batch, s.substream(3))
            trace = forward_gaussian(model, x, masks, s.substream(4))
        else:
            raise ValueError(f"unknown condition {condition!r}")
        if min_abs_pre(trace) > margin:
            return model, trace, labels
    raise AssertionError(
        f"no kink-free draw for dims={dims} condition={condition} in "
        f"{max_attempts} attempts"
    )


@pytest.fixture
def small_bundle():
    """3-class, 8-dim, well-separated blob split for fast training tests."""
    data = synth_blobs(classes=3, per_class=40, dims=8, separation=6.0,
                       stream=RngStream(5, 7))
    train, valid, test = split(data, (0.6, 0.2, 0.2), RngStream(5, 6))
    return DataBundle(train, valid, test)


@pytest.fixture
def line_dataset():
    """Collinear 3-D points: one dominant direction, rank-1 covariance."""
    t = np.linspace(-2.0, 2.0, 41)
    features = np.stack([t, 2.0 * t, -t], axis=1)
    return Dataset(features=features, labels=np.zeros(41, dtype=np.int64))
