"""Project sampled corruption back into input space.

Given a batch ``x`` and a sampled mask trace, the noisy hidden
activations are frozen as optimization targets and an input ``x*`` is
searched by plain gradient descent so that the CLEAN network reproduces
them:

    L = sum_i lambda_i * |clean_acts_i(x*_i) - noisy_acts_i(x)|^2

Three modes: ``per_layer`` optimizes an independent x* against each
hidden layer's target, ``joint_distinct`` keeps per-layer points under
the summed loss, and ``joint_shared`` forces a single x* to match every
layer at once. The module also quantifies how unlikely a perfect shared
x* is: a random mask must keep every active unit of a layer, which
happens with probability keep_prob ** (units * sparsity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, NumericError, ShapeError
from .linalg import RngStream
from .network import ForwardTrace, MlpModel, forward
from .noise import MaskTrace

MODES = ("per_layer", "joint_distinct", "joint_shared")
RATE_GRID = (0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0)

_MC_CHUNK = 65536


@dataclass
class BackProjectionConfig:
    """Input-optimization settings.

    The learning-rate defaults are the published rates for a two-hidden
    -layer network; for other architectures run ``calibrate_rates``.
    ``use_scaling=False`` builds targets from mask-only corruption even
    when the scheme trains with inverse scaling.
    """

    steps: int = 20
    lr_per_layer: tuple = (300.0, 30.0)
    lam: tuple | None = None
    mode: str = "joint_shared"
    init: str = "copy_of_x"
    clip_range: tuple | None = None
    use_scaling: bool = False
    joint_lr: float | None = None

    def validate_for(self, model: MlpModel) -> "BackProjectionConfig":
        n_hidden = model.hidden_count
        if n_hidden < 1:
            raise ConfigError("back-projection needs at least one hidden layer")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.init != "copy_of_x":
            raise ConfigError(f"unknown init {self.init!r}")
        rates = list(self.lr_per_layer)
        if not rates or any(r <= 0 for r in rates):
            raise ConfigError(f"learning rates must be positive, got {rates}")
        if self.mode == "per_layer" and len(rates) < n_hidden:
            raise ConfigError(
                f"per_layer mode needs {n_hidden} learning rates, got {len(rates)}"
            )
        if self.joint_lr is not None and self.joint_lr <= 0:
            raise ConfigError(f"joint_lr must be positive, got {self.joint_lr}")
        lam = self.lambdas(n_hidden)
        if len(lam) != n_hidden:
            raise ConfigError(f"{len(lam)} lambda weights for {n_hidden} hidden layers")
        if any(l < 0 for l in lam):
            raise ConfigError(f"lambda weights must be >= 0, got {lam}")
        if self.clip_range is not None:
            lo, hi = self.clip_range
            if not lo < hi:
                raise ConfigError(f"clip_range must satisfy lo < hi, got {self.clip_range}")
        return self

    def lambdas(self, n_hidden: int) -> list:
        if self.lam is None:
            return [1.0] * n_hidden
        return [float(l) for l in self.lam]


@dataclass
class BackProjectionResult:
    x_star: list                 # one tensor per hidden layer, or a singleton
    loss_history: list           # steps + 1 entries, starting at the initial loss
    initial_loss: float = field(init=False)
    final_loss: float = field(init=False)

    def __post_init__(self):
        self.initial_loss = self.loss_history[0]
        self.final_loss = self.loss_history[-1]


def bp_target(model: MlpModel, x, masks: MaskTrace, use_scaling: bool = False) -> list:
    """Freeze the noisy chain's hidden activations as optimization targets.

    By default the targets are mask-only corruption; ``use_scaling``
    keeps the trace's own scaling convention instead.
    """
    trace_masks = masks if use_scaling else masks.with_scaling("off")
    trace = forward(model, x, masks=trace_masks)
    return [a.copy() for a in trace.activations]


def _clean_state(model: MlpModel, xs) -> ForwardTrace:
    return forward(model, xs)


def _term_loss(trace: ForwardTrace, targets, lam, layer: int) -> float:
    diff = trace.activations[layer] - targets[layer]
    return float(lam[layer] * (diff * diff).sum())


def _input_gradient_from_trace(model: MlpModel, trace: ForwardTrace, targets,
                               lam, layers) -> np.ndarray:
    """Gradient of the selected squared-error terms w.r.t. the input.

    Walks the clean chain from the deepest selected layer down to the
    input, accumulating 2 * lam * (activation - target) at each selected
    layer. Masks never appear here; the chain is noiseless.
    """
    selected = set(layers)
    deepest = max(selected)
    delta = np.zeros_like(trace.activations[deepest])
    for i in range(deepest, -1, -1):
        if i in selected:
            delta = delta + 2.0 * lam[i] * (trace.activations[i] - targets[i])
        gate = (trace.pre_activations[i] > 0.0).astype(np.float64)
        delta = (delta * gate) @ model.layers[i].weights.T
    return delta


def _check_targets(model: MlpModel, targets) -> None:
    widths = model.hidden_widths()
    if len(targets) != len(widths):
        raise ShapeError(f"{len(targets)} targets for {len(widths)} hidden layers")
    for i, (t, w) in enumerate(zip(targets, widths)):
        if t.shape[1] != w:
            raise ShapeError(f"target {i} width {t.shape[1]} != layer width {w}")


def bp_loss(model: MlpModel, x_star: list, targets, lam, mode: str,
            layer: int | None = None) -> float:
    """Back-projection loss at the given point(s), clean chain only."""
    _check_targets(model, targets)
    n_hidden = model.hidden_count
    lam = list(lam)
    if mode == "joint_shared":
        if len(x_star) != 1:
            raise ConfigError(f"joint_shared expects a single x*, got {len(x_star)}")
        trace = _clean_state(model, x_star[0])
        return sum(_term_loss(trace, targets, lam, i) for i in range(n_hidden))
    if mode == "joint_distinct":
        if len(x_star) != n_hidden:
            raise ConfigError(f"joint_distinct expects {n_hidden} x*, got {len(x_star)}")
        return sum(
            _term_loss(_clean_state(model, x_star[i]), targets, lam, i)
            for i in range(n_hidden)
        )
    if mode == "per_layer":
        if layer is None:
            raise ConfigError("per_layer loss needs a layer index")
        if not 0 <= layer < n_hidden:
            raise ConfigError(f"layer {layer} out of range for {n_hidden} hidden layers")
        xs = x_star[0] if len(x_star) == 1 else x_star[layer]
        return _term_loss(_clean_state(model, xs), targets, lam, layer)
    raise ConfigError(f"unknown mode {mode!r}")


def bp_input_gradient(model: MlpModel, x_star, targets, lam, mode: str,
                      layer_subset=None) -> np.ndarray:
    """Gradient of the selected loss terms w.r.t. a single ``x_star`` tensor."""
    _check_targets(model, targets)
    n_hidden = model.hidden_count
    if layer_subset is None:
        layer_subset = list(range(n_hidden)) if mode != "per_layer" else None
    if not layer_subset:
        raise ConfigError("layer_subset must name at least one hidden layer")
    if any(not 0 <= i < n_hidden for i in layer_subset):
        raise ConfigError(f"layer subset {layer_subset} out of range")
    trace = _clean_state(model, np.asarray(x_star, dtype=np.float64))
    return _input_gradient_from_trace(model, trace, targets, list(lam), layer_subset)


def backproject(model: MlpModel, x, masks: MaskTrace,
                config: BackProjectionConfig) -> BackProjectionResult:
    """Gradient-descent search for x* starting from x.

    Records the summed loss before any step and after every step; a
    non-finite loss aborts with the offending step index.
    """
    config.validate_for(model)
    x = np.asarray(x, dtype=np.float64)
    n_hidden = model.hidden_count
    lam = config.lambdas(n_hidden)
    targets = bp_target(model, x, masks, config.use_scaling)

    shared = config.mode == "joint_shared"
    if shared:
        points = [x.copy()]
        subsets = [list(range(n_hidden))]
        rates = [config.joint_lr if config.joint_lr is not None
                 else float(config.lr_per_layer[0])]
    else:
        points = [x.copy() for _ in range(n_hidden)]
        subsets = [[i] for i in range(n_hidden)]
        if config.mode == "per_layer":
            rates = [float(config.lr_per_layer[i]) for i in range(n_hidden)]
        else:
            joint = (config.joint_lr if config.joint_lr is not None
                     else float(config.lr_per_layer[0]))
            rates = [joint] * n_hidden

    traces = [_clean_state(model, p) for p in points]

    def total_loss():
        return sum(
            _term_loss(traces[k], targets, lam, i)
            for k, subset in enumerate(subsets) for i in subset
        )

    history = [total_loss()]
    for step in range(config.steps):
        for k, subset in enumerate(subsets):
            grad = _input_gradient_from_trace(model, traces[k], targets, lam, subset)
            points[k] = points[k] - rates[k] * grad
            if config.clip_range is not None:
                lo, hi = config.clip_range
                np.clip(points[k], lo, hi, out=points[k])
            traces[k] = _clean_state(model, points[k])
        loss = total_loss()
        if not math.isfinite(loss):
            raise NumericError(f"back-projection diverged at step {step + 1}")
        history.append(loss)
    return BackProjectionResult(points, history)


def _descend_terms(model, x, targets, lam, subset, rate, steps) -> float:
    """Run plain descent on the selected terms; inf if it diverges."""
    xs = np.asarray(x, dtype=np.float64).copy()
    trace = _clean_state(model, xs)
    loss = sum(_term_loss(trace, targets, lam, i) for i in subset)
    for _ in range(steps):
        grad = _input_gradient_from_trace(model, trace, targets, lam, subset)
        xs = xs - rate * grad
        if not np.isfinite(xs).all():
            return math.inf
        trace = _clean_state(model, xs)
        loss = sum(_term_loss(trace, targets, lam, i) for i in subset)
        if not math.isfinite(loss):
            return math.inf
    return loss


def calibrate_rates(model: MlpModel, x_probe, masks: MaskTrace, mode: str,
                    steps: int, lam=None, grid=RATE_GRID,
                    use_scaling: bool = False) -> list:
    """Grid-search learning rates that minimize the final loss on a probe batch.

    ``per_layer`` scores each hidden layer's own term in isolation;
    joint modes pick one rate for the summed loss and replicate it per
    layer. Diverging candidates count as infinitely bad; ties go to the
    smaller rate.
    """
    n_hidden = model.hidden_count
    lam = list(lam) if lam is not None else [1.0] * n_hidden
    targets = bp_target(model, x_probe, masks, use_scaling)

    if mode == "per_layer":
        subsets = [[i] for i in range(n_hidden)]
        return [
            min((_descend_terms(model, x_probe, targets, lam, subset, rate, steps),
                 rate) for rate in grid)[1]
            for subset in subsets
        ]
    if mode == "joint_distinct":
        best = min(
            (sum(_descend_terms(model, x_probe, targets, lam, [i], rate, steps)
                 for i in range(n_hidden)), rate)
            for rate in grid
        )[1]
        return [best] * n_hidden
    if mode != "joint_shared":
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    everything = list(range(n_hidden))
    best = min(
        (_descend_terms(model, x_probe, targets, lam, everything, rate, steps), rate)
        for rate in grid
    )[1]
    return [best] * n_hidden


def mask_identity_probability(p_keep: float, d: int, s: float) -> dict:
    """Probability that a random mask keeps all active units: p_keep ** (d*s).

    Computed in the log domain; the raw probability may underflow to 0
    while ``log10`` stays exact. ``p_keep`` is the KEEP probability
    (Bernoulli success), not the drop level.
    """
    if not 0.0 <= p_keep <= 1.0:
        raise DomainError(f"p_keep must be in [0, 1], got {p_keep}")
    if d < 1:
        raise DomainError(f"d must be >= 1, got {d}")
    if not 0.0 <= s <= 1.0:
        raise DomainError(f"s must be in [0, 1], got {s}")
    exponent = d * s
    if exponent == 0.0 or p_keep == 1.0:
        return {"probability": 1.0, "log10": 0.0}
    if p_keep == 0.0:
        return {"probability": 0.0, "log10": -math.inf}
    log10 = exponent * math.log10(p_keep)
    return {"probability": 10.0 ** log10, "log10": log10}


def mask_identity_monte_carlo(p_keep: float, active_units: int, total_units: int,
                              trials: int, stream: RngStream) -> float:
    """Fraction of sampled masks that keep every active position.

    Positions beyond ``active_units`` are unconstrained, so only the
    active columns are sampled; the indicator's distribution is the
    same either way.
    """
    if not 0.0 <= p_keep <= 1.0:
        raise DomainError(f"p_keep must be in [0, 1], got {p_keep}")
    if active_units > total_units:
        raise DomainError(f"active_units {active_units} > total_units {total_units}")
    if active_units < 0 or trials < 1:
        raise DomainError("need active_units >= 0 and trials >= 1")
    if active_units == 0 or p_keep == 1.0:
        return 1.0
    hits = 0
    done = 0
    block = 0
    while done < trials:
        n = min(_MC_CHUNK, trials - done)
        draws = stream.substream(block).bernoulli(n * active_units, p_keep)
        hits += int(draws.reshape(n, active_units).all(axis=1).sum())
        done += n
        block += 1
    return hits / trials


def mean_sparsity(model: MlpModel, x, layer: int) -> float:
    """Mean fraction of strictly positive units at a hidden layer (clean pass)."""
    if not 0 <= layer < model.hidden_count:
        raise ConfigError(
            f"layer {layer} out of range for {model.hidden_count} hidden layers"
        )
    trace = forward(model, x)
    return float((trace.pre_activations[layer] > 0.0).mean())


# --- dump formats -------------------------------------------------------

def save_tensor_raw(a: np.ndarray, path) -> None:
    """Raw row-major float64 little-endian dump, no header."""
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_tensor_raw(path, rows: int, cols: int) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    expected = rows * cols * 8
    if len(blob) != expected:
        raise ShapeError(f"raw tensor file holds {len(blob)} bytes, expected {expected}")
    return np.frombuffer(blob, dtype="<f8").reshape(rows, cols).astype(np.float64)


def save_pgm(row: np.ndarray, image_shape, path) -> None:
    """8-bit binary PGM render of one image row, clamped to [0, 1]."""
    height, width = image_shape
    row = np.asarray(row, dtype=np.float64).reshape(-1)
    if row.size != height * width:
        raise ShapeError(f"{row.size} values cannot fill a {height}x{width} image")
    clamped = np.clip(row, 0.0, 1.0)
    pixels = np.rint(clamped * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
