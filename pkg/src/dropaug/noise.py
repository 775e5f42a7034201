"""Corruption schemes: dropout, random-level dropout, Gaussian-matched noise.

Conventions used throughout the package:

* ``p`` is always the DROP probability; a mask entry of 1 means the unit
  is kept, so the kept fraction is ``1 - p``.
* Masks multiply rectified activations. The input layer gets a mask slot
  of its own (slot 0) applied directly to ``x``, with no rectifier.
* ``train_time_inverse`` scaling multiplies kept activations by
  ``1 / (1 - level)`` during training so evaluation needs no factor.
  ``test_time`` leaves training activations raw and compensates at
  evaluation by multiplying outgoing activations by ``1 - p``.
* Random-level dropout draws one level per (layer, sample) from
  U(0, p_max) and uses that single level for every neuron of the layer;
  drawing per-neuron levels instead would collapse back to plain
  dropout at rate p_max / 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .linalg import RngStream

KINDS = ("none", "dropout", "random_dropout", "gaussian_matched")
SCALINGS = ("train_time_inverse", "test_time", "off")

_CHUNK_ROWS = 4096


@dataclass(frozen=True)
class NoiseScheme:
    """Declarative description of per-layer corruption."""

    kind: str = "none"
    p_input: float = 0.0
    p_hidden: float = 0.0
    p_max_input: float = 0.0
    p_max_hidden: float = 0.0
    scaling: str = "train_time_inverse"

    def validate(self) -> "NoiseScheme":
        if self.kind not in KINDS:
            raise ConfigError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        if self.scaling not in SCALINGS:
            raise ConfigError(
                f"unknown scaling mode {self.scaling!r}; expected one of {SCALINGS}"
            )
        for name in ("p_input", "p_hidden", "p_max_input", "p_max_hidden"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise DomainError(f"{name} must be in [0, 1), got {v}")
        if self.kind == "random_dropout" and self.scaling == "test_time":
            # per-sample levels are unknown at test time, so there is no
            # constant factor that could compensate
            raise ConfigError("random_dropout requires train_time_inverse or off scaling")
        return self

    def is_noisy(self) -> bool:
        return self.kind != "none"


@dataclass
class MaskTrace:
    """Concrete sampled corruption for one batch.

    ``masks[0]``/``levels[0]`` belong to the input layer; slots 1..n to
    the hidden layers. ``hidden_noise`` holds realized additive
    pre-activation draws for the Gaussian-matched scheme (filled in by
    the forward pass that sampled them) so a trace can be replayed
    deterministically.
    """

    masks: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    scaling: str = "off"
    hidden_noise: list | None = None

    @property
    def batch(self) -> int:
        return self.masks[0].shape[0]

    def widths(self) -> list:
        return [m.shape[1] for m in self.masks]

    def with_scaling(self, scaling: str) -> "MaskTrace":
        """Same masks and levels under a different scaling convention."""
        return MaskTrace(self.masks, self.levels, scaling, self.hidden_noise)


def _sample_slot(scheme: NoiseScheme, width: int, batch: int, is_input: bool,
                 stream: RngStream):
    ones = lambda: np.ones((batch, width))
    zeros_level = lambda: np.zeros((batch, 1))
    if scheme.kind == "none":
        return ones(), zeros_level()
    if scheme.kind == "gaussian_matched" and not is_input:
        return ones(), zeros_level()
    if scheme.kind in ("dropout", "gaussian_matched"):
        p = scheme.p_input if is_input else scheme.p_hidden
        mask = stream.bernoulli(batch * width, 1.0 - p).reshape(batch, width)
        return mask, np.full((batch, 1), p)
    # random_dropout: one level per sample row, shared by the whole layer
    p_max = scheme.p_max_input if is_input else scheme.p_max_hidden
    rho = stream.uniform(batch, 0.0, p_max).reshape(batch, 1)
    u = stream.uniform(batch * width, 0.0, 1.0).reshape(batch, width)
    mask = (u >= rho).astype(np.float64)
    return mask, rho


def sample_mask_trace(scheme: NoiseScheme, layer_widths, batch: int,
                      stream: RngStream) -> MaskTrace:
    """Sample masks and levels for one batch.

    ``layer_widths`` lists the input width followed by the hidden layer
    widths. Each slot draws from its own substream so the per-layer
    sampling order cannot shift draws between layers.
    """
    scheme.validate()
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    if any(w < 1 for w in layer_widths):
        raise ConfigError(f"layer widths must be positive, got {list(layer_widths)}")
    masks, levels = [], []
    for slot, width in enumerate(layer_widths):
        m, lv = _sample_slot(scheme, int(width), batch, slot == 0,
                             stream.substream(slot))
        masks.append(m)
        levels.append(lv)
    return MaskTrace(masks, levels, scheme.scaling)


def apply_mask(acts: np.ndarray, mask: np.ndarray, level: np.ndarray,
               scaling: str) -> np.ndarray:
    """Mask activations, optionally with train-time inverse scaling.

    ``level`` is a per-sample column of drop levels; under
    ``train_time_inverse`` each row is rescaled by ``1 / (1 - level)``.
    ``test_time`` and ``off`` both reduce to plain masking here (the
    test-time factor lives in evaluation, see ``evaluation_scales``).
    """
    acts = np.asarray(acts, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    level = np.asarray(level, dtype=np.float64)
    if mask.shape != acts.shape:
        raise ShapeError(f"mask shape {mask.shape} != activations shape {acts.shape}")
    if level.shape != (acts.shape[0], 1):
        raise ShapeError(
            f"level must be a per-sample column {(acts.shape[0], 1)}, got {level.shape}"
        )
    if (level >= 1.0).any():
        raise DomainError("drop level >= 1 would divide by zero under inverse scaling")
    if scaling not in SCALINGS:
        raise ConfigError(f"unknown scaling mode {scaling!r}")
    out = acts * mask
    if scaling == "train_time_inverse":
        out = out / (1.0 - level)
    return out


def mask_scale_factors(mask: np.ndarray, level: np.ndarray, scaling: str) -> np.ndarray:
    """d(apply_mask)/d(acts) as an elementwise factor; used by backprop."""
    factor = np.asarray(mask, dtype=np.float64)
    if scaling == "train_time_inverse":
        factor = factor / (1.0 - np.asarray(level, dtype=np.float64))
    return factor


def evaluation_scales(scheme: NoiseScheme, n_hidden: int):
    """Constant activation factors the noiseless evaluation must apply.

    Only the ``test_time`` convention needs them: slot 0 scales the raw
    input by ``1 - p_input`` and each hidden slot scales outgoing
    activations by ``1 - p_hidden``. Every other configuration returns
    None (no factors).
    """
    scheme.validate()
    if scheme.scaling != "test_time" or scheme.kind == "none":
        return None
    if scheme.kind == "dropout":
        return [1.0 - scheme.p_input] + [1.0 - scheme.p_hidden] * n_hidden
    if scheme.kind == "gaussian_matched":
        # the Gaussian draw is mean-preserving; only input dropout needs
        # compensating
        return [1.0 - scheme.p_input] + [1.0] * n_hidden
    return None


def gaussian_offsets(x: np.ndarray, weights: np.ndarray, stream: RngStream) -> np.ndarray:
    """Additive pre-activation noise matching dropout's variance.

    For each sample row and output unit with contributions
    ``s_i = x_i * w_i`` the clean pre-activation is ``sum(s_i)``; the
    returned offset is a draw from Normal(0, sum(s_i^2)), so adding it
    reproduces the input-dependent spread of dropout at p = 0.5 with x2
    scaling.
    """
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"cannot chain input {x.shape} with weights {weights.shape}"
        )
    var = (x * x) @ (weights * weights)
    z = stream.gaussian(var.size, 0.0, 1.0).reshape(var.shape)
    return np.sqrt(var) * z


def gaussian_matched_pre_activation(x_row: np.ndarray, weights: np.ndarray,
                                    bias: np.ndarray, stream: RngStream) -> np.ndarray:
    """Sample the noisy pre-activation for a single input row.

    Draws from Normal(mu = x @ W, sigma^2 = (x*x) @ (W*W)) per output
    unit, then adds the bias. The variance is input-dependent, not a
    fixed additive noise floor.
    """
    x_row = np.asarray(x_row, dtype=np.float64)
    if x_row.ndim == 1:
        x_row = x_row.reshape(1, -1)
    if x_row.shape[0] != 1:
        raise ShapeError(f"expected a single sample row, got shape {x_row.shape}")
    bias = np.asarray(bias, dtype=np.float64).reshape(1, -1)
    offset = gaussian_offsets(x_row, weights, stream)
    if bias.shape[1] != offset.shape[1]:
        raise ShapeError(f"bias shape {bias.shape} does not match output width {offset.shape[1]}")
    return x_row @ np.asarray(weights, dtype=np.float64) + offset + bias


def drop_fractions(scheme: NoiseScheme, layer_width: int, trials: int,
                   stream: RngStream) -> np.ndarray:
    """Per-trial dropped fraction of a hidden-layer mask under ``scheme``."""
    scheme.validate()
    out = np.empty(trials)
    done = 0
    block = 0
    while done < trials:
        n = min(_CHUNK_ROWS, trials - done)
        mask, _ = _sample_slot(scheme, layer_width, n, False,
                               stream.substream(block))
        out[done:done + n] = 1.0 - mask.mean(axis=1)
        done += n
        block += 1
    return out


def drop_proportion_histogram(scheme: NoiseScheme, layer_width: int, trials: int,
                              bins: int, stream: RngStream,
                              hist_range=(0.0, 1.0)):
    """Empirical density of the per-sample dropped fraction.

    Returns ``(edges, densities)`` with ``len(edges) == bins + 1``.
    Trials falling outside ``hist_range`` are discarded; the densities
    integrate to one over the range.
    """
    if bins < 2:
        raise DomainError(f"need at least 2 bins, got {bins}")
    if trials < bins:
        raise DomainError(f"need trials >= bins, got {trials} < {bins}")
    fractions = drop_fractions(scheme, layer_width, trials, stream)
    densities, edges = np.histogram(fractions, bins=bins, range=hist_range,
                                    density=True)
    return edges, densities


def histogram_to_csv(edges: np.ndarray, densities: np.ndarray, path) -> None:
    lines = ["bin_lo,bin_hi,density"]
    for lo, hi, d in zip(edges[:-1], edges[1:], densities):
        lines.append(f"{float(lo)!r},{float(hi)!r},{float(d)!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
