"""Experiment protocols over the network core.

Three protocols share one minibatch-SGD engine: plain training, training
under a noise scheme, and deterministic training that alternates clean
epochs with epochs over back-projected samples. Every random draw comes
from a purpose-keyed counter stream, so a fixed seed gives bit-identical
histories regardless of which subsystems happen to draw.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import numpy as np

from .backprojection import BackProjectionConfig, backproject
from .data import Dataset
from .errors import ConfigError, FormatError, NumericError, StateError
from .linalg import RngStream
from .network import (
    MlpModel,
    backward,
    evaluate,
    forward,
    forward_gaussian,
    init_model,
    load_model,
    loss_ce,
    model_sha256,
    save_model,
    sgd_step,
)
from .noise import NoiseScheme, evaluation_scales, sample_mask_trace

logger = logging.getLogger("dropaug.training")

# Stream purposes. Each subsystem draws from its own top-level stream so
# adding or removing one kind of draw never shifts any other; this is what
# makes the degenerate schemes (p = 0) reproduce the plain baseline
# bit-for-bit. Refit runs shift every purpose by REFIT_OFFSET.
INIT_STREAM = 1
SHUFFLE_STREAM = 2
MASK_STREAM = 3
GAUSS_STREAM = 4
BP_STREAM = 5
REFIT_OFFSET = 16

# x* generation walks the training set in fixed-size chunks; the size is
# logged with each generation round so rows stay regenerable byte-for-byte
BP_CHUNK = 256


class DataBundle(NamedTuple):
    train: Dataset
    valid: Dataset
    test: Dataset


@dataclass
class ExperimentConfig:
    """Knobs for one training run.

    ``refit_epochs`` is the post-selection budget on train+valid;
    ``eval_every`` thins evaluation (records are kept only at evaluated
    epochs, and the final epoch is always evaluated). ``lr = 0`` is legal
    and leaves the model at its initialization.
    """

    layer_dims: tuple
    scheme: NoiseScheme = NoiseScheme()
    bp_config: BackProjectionConfig | None = None
    epochs: int = 50
    batch_size: int = 100
    lr: float = 0.1
    seed: int = 0
    refit_epochs: int = 0
    eval_every: int = 1
    hidden_bias: bool = True

    def validate(self) -> "ExperimentConfig":
        dims = [int(d) for d in self.layer_dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ConfigError(f"layer_dims must list positive input..output sizes, got {dims}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (math.isfinite(self.lr) and self.lr >= 0.0):
            raise ConfigError(f"lr must be finite and >= 0, got {self.lr}")
        if self.refit_epochs < 0:
            raise ConfigError(f"refit_epochs must be >= 0, got {self.refit_epochs}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        self.scheme.validate()
        return self


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    valid_error: float
    test_error: float
    sparsity: tuple  # mean fraction of active units per hidden layer


@dataclass
class TrainHistory:
    """Per-epoch metrics plus the selected and final models.

    ``best_epoch`` is the earliest evaluated epoch achieving the minimum
    validation error. ``provenance`` lists one entry per x*-generation
    round: epoch, snapshot hash, row count, and chunk size.
    """

    records: list
    best_epoch: int
    best_model: MlpModel | None
    final_model: MlpModel
    provenance: list


def config_hash(config: ExperimentConfig) -> str:
    """sha256 of the canonical JSON rendering of the config."""
    blob = json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("ascii")).hexdigest()


def _check_bundle(config: ExperimentConfig, data: DataBundle) -> None:
    dims = [int(d) for d in config.layer_dims]
    for part in data:
        part.validate()
        if part.features.shape[1] != dims[0]:
            raise ConfigError(
                f"{part.split_tag} features have {part.features.shape[1]} dims, "
                f"model expects {dims[0]}"
            )
        if part.labels.size and int(part.labels.max()) >= dims[-1]:
            raise ConfigError(
                f"{part.split_tag} labels reach {int(part.labels.max())}, "
                f"model has {dims[-1]} outputs"
            )


def _one_epoch(model, x, y, config, scheme, shuffle, mask_stream, gauss, epoch):
    """Shuffled minibatch SGD over (x, y); returns (model, mean loss)."""
    n = x.shape[0]
    order = shuffle.substream(epoch).permutation(n)
    widths = model.mask_widths()
    total = 0.0
    for b, start in enumerate(range(0, n, config.batch_size)):
        idx = order[start:start + config.batch_size]
        xb, yb = x[idx], y[idx]
        try:
            if scheme.is_noisy():
                masks = sample_mask_trace(scheme, widths, xb.shape[0],
                                          mask_stream.substream(epoch, b))
                if scheme.kind == "gaussian_matched":
                    trace = forward_gaussian(model, xb, masks,
                                             gauss.substream(epoch, b))
                else:
                    trace = forward(model, xb, masks)
            else:
                trace = forward(model, xb)
            batch_loss = loss_ce(trace, yb)
            if not math.isfinite(batch_loss):
                raise NumericError("non-finite training loss")
            model = sgd_step(model, backward(model, trace, yb), config.lr)
        except NumericError as e:
            raise NumericError(f"at epoch {epoch}, batch {b}: {e}") from e
        total += batch_loss * xb.shape[0]
    return model, total / n


def _hidden_sparsity(model: MlpModel, x) -> tuple:
    trace = forward(model, x)
    return tuple(float((p > 0.0).mean()) for p in trace.pre_activations)


def _generate_x_star(model, x, y, config, stream, epoch):
    """One x* per training sample from a fresh mask draw and the snapshot.

    The distinct modes produce one x* per (sample, hidden layer); stacks
    are concatenated layer-major, so row ``k * n + i`` traces back to
    sample ``i``. Labels repeat accordingly.
    """
    scheme, bp = config.scheme, config.bp_config
    widths = model.mask_widths()
    parts = None
    for start in range(0, x.shape[0], BP_CHUNK):
        xb = x[start:start + BP_CHUNK]
        masks = sample_mask_trace(scheme, widths, xb.shape[0],
                                  stream.substream(epoch, start, 0))
        if scheme.kind == "gaussian_matched":
            trace = forward_gaussian(model, xb, masks, stream.substream(epoch, start, 1))
            masks = trace.mask_trace
        try:
            result = backproject(model, xb, masks, bp)
        except NumericError as e:
            raise NumericError(
                f"x* generation failed at epoch {epoch} on samples "
                f"[{start}, {start + xb.shape[0]}): {e}"
            ) from e
        if parts is None:
            parts = [[] for _ in result.x_star]
        for k, xs in enumerate(result.x_star):
            parts[k].append(xs)
    stacks = [np.concatenate(p, axis=0) for p in parts]
    return np.concatenate(stacks, axis=0), np.tile(y, len(stacks))


def _train_loop(config, data, model, epochs, offset):
    """Shared engine; returns (final, records, provenance, best_epoch, best_model)."""
    shuffle = RngStream(config.seed, SHUFFLE_STREAM + offset)
    mask_stream = RngStream(config.seed, MASK_STREAM + offset)
    gauss = RngStream(config.seed, GAUSS_STREAM + offset)
    bp_stream = RngStream(config.seed, BP_STREAM + offset)
    x, y = data.train.features, data.train.labels
    scales = evaluation_scales(config.scheme, model.hidden_count)
    use_bp = config.bp_config is not None
    # back-projection replaces in-network noise: both epoch kinds train
    # the deterministic network, the scheme only shapes the x* targets
    epoch_scheme = NoiseScheme() if use_bp else config.scheme
    records, provenance = [], []
    best_epoch, best_err, best_model = -1, math.inf, None
    for e in range(epochs):
        if use_bp and e % 2 == 1:
            snapshot = model.copy()
            digest = model_sha256(snapshot)
            xs, ys = _generate_x_star(snapshot, x, y, config, bp_stream, e)
            provenance.append({
                "epoch": e,
                "model_sha256": digest,
                "n_samples": int(xs.shape[0]),
                "chunk_size": BP_CHUNK,
            })
            logger.info("epoch %d: %d back-projected rows from snapshot %s",
                        e, xs.shape[0], digest[:12])
            model, train_loss = _one_epoch(model, xs, ys, config, epoch_scheme,
                                           shuffle, mask_stream, gauss, e)
        else:
            model, train_loss = _one_epoch(model, x, y, config, epoch_scheme,
                                           shuffle, mask_stream, gauss, e)
        if (e + 1) % config.eval_every == 0 or e == epochs - 1:
            v = evaluate(model, data.valid.features, data.valid.labels, scales)
            t = evaluate(model, data.test.features, data.test.labels, scales)
            records.append(EpochRecord(
                epoch=e,
                train_loss=train_loss,
                valid_error=v["error_rate"],
                test_error=t["error_rate"],
                sparsity=_hidden_sparsity(model, data.valid.features),
            ))
            if v["error_rate"] < best_err:
                best_epoch, best_err = e, v["error_rate"]
                best_model = model.copy()
    return model, records, provenance, best_epoch, best_model


def _fresh_run(config: ExperimentConfig, data: DataBundle) -> TrainHistory:
    _check_bundle(config, data)
    model = init_model(config.layer_dims, RngStream(config.seed, INIT_STREAM),
                       hidden_bias=config.hidden_bias)
    if config.bp_config is not None:
        config.bp_config.validate_for(model)
    final, records, prov, best_epoch, best_model = _train_loop(
        config, data, model, config.epochs, 0)
    return TrainHistory(records, best_epoch, best_model, final, prov)


def train_standard(config: ExperimentConfig, data: DataBundle) -> TrainHistory:
    """Noiseless minibatch-SGD baseline."""
    config.validate()
    if config.scheme.is_noisy():
        raise ConfigError("train_standard requires the noiseless scheme")
    if config.bp_config is not None:
        raise ConfigError("train_standard does not take back-projection settings")
    return _fresh_run(config, data)


def train_with_noise(config: ExperimentConfig, data: DataBundle) -> TrainHistory:
    """Training under a noise scheme; masks resample every batch,
    evaluation stays noiseless."""
    config.validate()
    if not config.scheme.is_noisy():
        raise ConfigError("train_with_noise requires a noisy scheme")
    if config.bp_config is not None:
        raise ConfigError("train_with_noise does not take back-projection settings")
    return _fresh_run(config, data)


def train_backprojected(config: ExperimentConfig, data: DataBundle) -> TrainHistory:
    """Alternate clean-data epochs with epochs over back-projected samples.

    Odd epochs snapshot the model, generate one x* per training sample
    from freshly drawn masks (stacked per layer in the distinct modes),
    and train the deterministic network on (x*, original label).
    """
    config.validate()
    if config.bp_config is None:
        raise ConfigError("train_backprojected requires back-projection settings")
    return _fresh_run(config, data)


def select_and_refit(history: TrainHistory, config: ExperimentConfig,
                     data: DataBundle) -> dict:
    """Restore the best checkpoint, retrain on train+valid, report test error.

    The report's mean and standard deviation cover the final half of the
    refit epochs (at least one); ``refit_epochs = 0`` reports the best
    checkpoint's test error directly. Refit repeats the original
    protocol, inferred from the config.
    """
    config.validate()
    if history.best_model is None or history.best_epoch < 0:
        raise StateError("history has no best checkpoint to restore")
    _check_bundle(config, data)
    if config.refit_epochs == 0:
        scales = evaluation_scales(config.scheme, history.best_model.hidden_count)
        err = evaluate(history.best_model, data.test.features, data.test.labels,
                       scales)["error_rate"]
        return {
            "best_epoch": history.best_epoch,
            "refit_epochs": 0,
            "window": 1,
            "test_error_mean": err,
            "test_error_std": 0.0,
            "test_errors": [err],
            "provenance": [],
            "final_model": history.best_model.copy(),
        }
    merged = Dataset(
        features=np.concatenate([data.train.features, data.valid.features], axis=0),
        labels=np.concatenate([data.train.labels, data.valid.labels], axis=0),
        image_shape=data.train.image_shape,
        split_tag="train",
    ).validate()
    refit_bundle = DataBundle(merged, data.valid, data.test)
    model = history.best_model.copy()
    if config.bp_config is not None:
        config.bp_config.validate_for(model)
    final, records, prov, _, _ = _train_loop(
        replace(config, eval_every=1), refit_bundle, model,
        config.refit_epochs, REFIT_OFFSET)
    errors = [r.test_error for r in records]
    window = max(1, config.refit_epochs // 2)
    tail = errors[-window:]
    return {
        "best_epoch": history.best_epoch,
        "refit_epochs": config.refit_epochs,
        "window": len(tail),
        "test_error_mean": float(np.mean(tail)),
        "test_error_std": float(np.std(tail)),
        "test_errors": errors,
        "provenance": prov,
        "final_model": final,
    }


def history_to_csv(history: TrainHistory, path=None) -> str:
    """Render records as CSV; floats use repr so files round-trip exactly."""
    n_hidden = len(history.records[0].sparsity) if history.records else 0
    header = "epoch,train_loss,valid_error,test_error" + "".join(
        f",sparsity_l{i + 1}" for i in range(n_hidden))
    lines = [header]
    for r in history.records:
        cells = [str(r.epoch), repr(r.train_loss), repr(r.valid_error),
                 repr(r.test_error)] + [repr(s) for s in r.sparsity]
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text


def save_checkpoint(model: MlpModel, path, config: ExperimentConfig,
                    epoch: int) -> None:
    """Binary model file plus an adjacent <path>.json metadata sidecar."""
    save_model(model, path)
    meta = {"seed": int(config.seed), "config_hash": config_hash(config),
            "epoch": int(epoch)}
    with open(str(path) + ".json", "w") as f:
        json.dump(meta, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_checkpoint(path) -> tuple:
    model = load_model(path)
    meta_path = str(path) + ".json"
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except OSError as e:
        raise StateError(f"missing checkpoint metadata {meta_path}: {e}") from e
    except ValueError as e:
        raise FormatError(f"bad checkpoint metadata {meta_path}: {e}") from e
    return model, meta
