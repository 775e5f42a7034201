"""Command-line driver: configs in, CSV/checkpoint/PGM artifacts out.

Config files are JSON documents mirroring the library dataclasses; keys
are parsed strictly so a misspelled knob fails fast instead of silently
defaulting. Every command is byte-reproducible for a fixed seed. Errors
exit nonzero and put one machine-readable JSON line on standard error:
``{"error": {"kind": ..., "message": ...}}``.

Exit codes: 0 success, 2 usage/config, 3 io/format, 4 numeric, 5 state.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace

from .backprojection import (
    BackProjectionConfig,
    backproject,
    mask_identity_monte_carlo,
    mask_identity_probability,
    save_pgm,
    save_tensor_raw,
)
from .data import Dataset, load_csv_features, load_idx, pca_fit, pca_transform, split, synth_blobs
from .errors import ConfigError, DropaugError, StateError, UsageError
from .linalg import RngStream
from .network import forward_gaussian, load_model
from .noise import NoiseScheme, drop_proportion_histogram, histogram_to_csv, sample_mask_trace
from .training import (
    BP_STREAM,
    DataBundle,
    ExperimentConfig,
    config_hash,
    history_to_csv,
    save_checkpoint,
    select_and_refit,
    train_backprojected,
    train_standard,
    train_with_noise,
)

# stream purposes owned by the CLI layer (the training module owns 1..5)
SPLIT_STREAM = 6
BLOBS_STREAM = 7
HIST_STREAM = 8
ANALYZE_STREAM = 9

logger = logging.getLogger("dropaug.cli")

_PROTOCOLS = {
    "standard": train_standard,
    "noise": train_with_noise,
    "backprojected": train_backprojected,
}
_GRID_KEYS = ("p_input", "p_hidden", "p_max_input", "p_max_hidden")


# --- strict config parsing ----------------------------------------------

def _load_json(path) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


def _strict(doc: dict, allowed, where: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {unknown}")


def _req(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"missing config key {key!r} in {where}")
    return doc[key]


def _num(v, key: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"config key {key!r} must be a number, got {v!r}")
    return float(v)


def _count(v, key: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"config key {key!r} must be an integer, got {v!r}")
    return v


def _flag(v, key: str) -> bool:
    if not isinstance(v, bool):
        raise ConfigError(f"config key {key!r} must be true or false, got {v!r}")
    return v


def _text(v, key: str) -> str:
    if not isinstance(v, str):
        raise ConfigError(f"config key {key!r} must be a string, got {v!r}")
    return v


def _parse_scheme(doc) -> NoiseScheme:
    if not isinstance(doc, dict):
        raise ConfigError("scheme must be a JSON object")
    _strict(doc, ("kind", "p_input", "p_hidden", "p_max_input", "p_max_hidden",
                  "scaling"), "scheme")
    return NoiseScheme(
        kind=_text(doc.get("kind", "none"), "scheme.kind"),
        p_input=_num(doc.get("p_input", 0.0), "scheme.p_input"),
        p_hidden=_num(doc.get("p_hidden", 0.0), "scheme.p_hidden"),
        p_max_input=_num(doc.get("p_max_input", 0.0), "scheme.p_max_input"),
        p_max_hidden=_num(doc.get("p_max_hidden", 0.0), "scheme.p_max_hidden"),
        scaling=_text(doc.get("scaling", "train_time_inverse"), "scheme.scaling"),
    ).validate()


def _parse_bp(doc) -> BackProjectionConfig:
    if not isinstance(doc, dict):
        raise ConfigError("bp_config must be a JSON object")
    _strict(doc, ("steps", "lr_per_layer", "lam", "mode", "init", "clip_range",
                  "use_scaling", "joint_lr"), "bp_config")
    rates = doc.get("lr_per_layer", [300.0, 30.0])
    if not isinstance(rates, list):
        raise ConfigError("bp_config.lr_per_layer must be a list of numbers")
    lam = doc.get("lam")
    if lam is not None and not isinstance(lam, list):
        raise ConfigError("bp_config.lam must be a list of numbers or null")
    clip = doc.get("clip_range")
    if clip is not None:
        if not (isinstance(clip, list) and len(clip) == 2):
            raise ConfigError("bp_config.clip_range must be [lo, hi] or null")
        clip = (_num(clip[0], "clip_range"), _num(clip[1], "clip_range"))
    joint_lr = doc.get("joint_lr")
    return BackProjectionConfig(
        steps=_count(doc.get("steps", 20), "bp_config.steps"),
        lr_per_layer=tuple(_num(r, "lr_per_layer") for r in rates),
        lam=None if lam is None else tuple(_num(l, "lam") for l in lam),
        mode=_text(doc.get("mode", "joint_shared"), "bp_config.mode"),
        init=_text(doc.get("init", "copy_of_x"), "bp_config.init"),
        clip_range=clip,
        use_scaling=_flag(doc.get("use_scaling", False), "bp_config.use_scaling"),
        joint_lr=None if joint_lr is None else _num(joint_lr, "bp_config.joint_lr"),
    )


def _parse_dataset(doc, seed: int) -> Dataset:
    if not isinstance(doc, dict):
        raise ConfigError("data must be a JSON object")
    source = _text(_req(doc, "source", "data"), "data.source")
    if source == "idx":
        _strict(doc, ("source", "images", "labels", "fractions"), "data")
        return load_idx(_text(_req(doc, "images", "data"), "data.images"),
                        _text(_req(doc, "labels", "data"), "data.labels"))
    if source == "csv":
        _strict(doc, ("source", "path", "label_column", "fractions"), "data")
        return load_csv_features(
            _text(_req(doc, "path", "data"), "data.path"),
            _text(_req(doc, "label_column", "data"), "data.label_column"))
    if source == "blobs":
        _strict(doc, ("source", "classes", "per_class", "dims", "separation",
                      "fractions"), "data")
        return synth_blobs(
            classes=_count(_req(doc, "classes", "data"), "data.classes"),
            per_class=_count(_req(doc, "per_class", "data"), "data.per_class"),
            dims=_count(_req(doc, "dims", "data"), "data.dims"),
            separation=_num(_req(doc, "separation", "data"), "data.separation"),
            stream=RngStream(seed, BLOBS_STREAM))
    raise ConfigError(f"unknown data source {source!r}; expected idx, csv, or blobs")


def _parse_fractions(doc):
    fractions = doc.get("fractions")
    if fractions is None:
        return None
    if not (isinstance(fractions, list) and len(fractions) == 3):
        raise ConfigError("data.fractions must be [train, valid, test]")
    return [_num(f, "data.fractions") for f in fractions]


def _make_bundle(dataset: Dataset, fractions, seed: int) -> DataBundle:
    if fractions is None:
        raise ConfigError("data.fractions is required for training")
    train, valid, test = split(dataset, fractions, RngStream(seed, SPLIT_STREAM))
    return DataBundle(train, valid, test)


def _resolve_seed(doc: dict, override) -> int:
    if override is not None:
        return int(override)
    seed = doc.get("seed", 0)
    return _count(seed, "seed")


def _write_json(doc: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


# --- train ---------------------------------------------------------------

def _parse_train(doc: dict, seed_override):
    _strict(doc, ("protocol", "layer_dims", "epochs", "batch_size", "lr", "seed",
                  "refit_epochs", "eval_every", "hidden_bias", "scheme",
                  "bp_config", "data"), "config")
    protocol = _text(_req(doc, "protocol", "config"), "protocol")
    if protocol not in _PROTOCOLS:
        raise ConfigError(
            f"unknown protocol {protocol!r}; expected one of {sorted(_PROTOCOLS)}")
    dims = _req(doc, "layer_dims", "config")
    if not (isinstance(dims, list) and len(dims) >= 2):
        raise ConfigError("layer_dims must list input..output sizes")
    seed = _resolve_seed(doc, seed_override)
    bp_doc = doc.get("bp_config")
    config = ExperimentConfig(
        layer_dims=tuple(_count(d, "layer_dims") for d in dims),
        scheme=_parse_scheme(doc.get("scheme", {})),
        bp_config=None if bp_doc is None else _parse_bp(bp_doc),
        epochs=_count(doc.get("epochs", 50), "epochs"),
        batch_size=_count(doc.get("batch_size", 100), "batch_size"),
        lr=_num(doc.get("lr", 0.1), "lr"),
        seed=seed,
        refit_epochs=_count(doc.get("refit_epochs", 0), "refit_epochs"),
        eval_every=_count(doc.get("eval_every", 1), "eval_every"),
        hidden_bias=_flag(doc.get("hidden_bias", True), "hidden_bias"),
    ).validate()
    data_doc = _req(doc, "data", "config")
    dataset = _parse_dataset(data_doc, seed)
    bundle = _make_bundle(dataset, _parse_fractions(data_doc), seed)
    return protocol, config, bundle


def _run_train(protocol: str, config: ExperimentConfig, bundle: DataBundle,
               out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    history = _PROTOCOLS[protocol](config, bundle)
    history_to_csv(history, os.path.join(out_dir, "history.csv"))
    save_checkpoint(history.best_model, os.path.join(out_dir, "best.ckpt"),
                    config, history.best_epoch)
    report = select_and_refit(history, config, bundle)
    if config.refit_epochs > 0:
        save_checkpoint(report["final_model"], os.path.join(out_dir, "refit.ckpt"),
                        config, config.refit_epochs)
    doc = {k: v for k, v in report.items() if k != "final_model"}
    doc["protocol"] = protocol
    doc["config_hash"] = config_hash(config)
    _write_json(doc, os.path.join(out_dir, "report.json"))
    logger.info("wrote history.csv, best.ckpt, report.json to %s", out_dir)


def _parse_grid(arg: str):
    if "=" not in arg:
        raise UsageError(f"--grid expects KEY=V1,V2,..., got {arg!r}")
    key, _, values = arg.partition("=")
    if key not in _GRID_KEYS:
        raise UsageError(f"--grid key must be one of {_GRID_KEYS}, got {key!r}")
    try:
        levels = [float(v) for v in values.split(",") if v != ""]
    except ValueError as e:
        raise UsageError(f"bad --grid value in {values!r}: {e}") from e
    if not levels:
        raise UsageError("--grid lists no values")
    return key, levels


def cmd_train(ns) -> int:
    protocol, config, bundle = _parse_train(_load_json(ns.config), ns.seed)
    if ns.grid is None:
        _run_train(protocol, config, bundle, ns.out)
        return 0
    key, levels = _parse_grid(ns.grid)
    for level in levels:
        run_config = replace(config, scheme=replace(config.scheme, **{key: level}))
        run_config.validate()
        sub = os.path.join(ns.out, f"{key}_{level}")
        _run_train(protocol, run_config, bundle, sub)
    return 0


# --- backproject -----------------------------------------------------------

def cmd_backproject(ns) -> int:
    doc = _load_json(ns.config)
    _strict(doc, ("checkpoint", "data", "samples", "split", "scheme",
                  "bp_config", "seed"), "config")
    seed = _resolve_seed(doc, ns.seed)
    ckpt_path = _text(_req(doc, "checkpoint", "config"), "checkpoint")
    if not os.path.exists(ckpt_path):
        raise StateError(f"checkpoint not found: {ckpt_path}")
    model = load_model(ckpt_path)

    data_doc = _req(doc, "data", "config")
    dataset = _parse_dataset(data_doc, seed)
    fractions = _parse_fractions(data_doc)
    tag = _text(doc.get("split", "train"), "split")
    if fractions is not None:
        parts = split(dataset, fractions, RngStream(seed, SPLIT_STREAM))
        by_tag = {p.split_tag: p for p in parts}
        if tag not in by_tag:
            raise ConfigError(f"split must be train, valid, or test, got {tag!r}")
        dataset = by_tag[tag]

    scheme = _parse_scheme(doc.get("scheme", {}))
    if ns.all_ones_masks:
        # debug path: identity masks make the targets the clean
        # activations, so x* must replay the inputs exactly
        scheme = NoiseScheme()
    bp = _parse_bp(doc.get("bp_config", {})).validate_for(model)
    n = min(_count(doc.get("samples", 16), "samples"), dataset.n_samples)
    if n < 1:
        raise ConfigError("no samples to back-project")

    os.makedirs(ns.out, exist_ok=True)
    widths = model.mask_widths()
    root = RngStream(seed, BP_STREAM)
    shared = bp.mode == "joint_shared"
    for i in range(n):
        xb = dataset.features[i:i + 1]
        masks = sample_mask_trace(scheme, widths, 1, root.substream(0, i, 0))
        if scheme.kind == "gaussian_matched":
            masks = forward_gaussian(model, xb, masks, root.substream(0, i, 1)).mask_trace
        try:
            result = backproject(model, xb, masks, bp)
        except DropaugError as e:
            raise type(e)(f"sample {i}: {e}") from e
        for k, xs in enumerate(result.x_star):
            stem = f"x_star_{i:04d}" if shared else f"x_star_{i:04d}_l{k + 1}"
            save_tensor_raw(xs, os.path.join(ns.out, stem + ".f64"))
            if dataset.image_shape is not None:
                save_pgm(xs[0], dataset.image_shape,
                         os.path.join(ns.out, stem + ".pgm"))
        lines = ["step,loss"] + [f"{s},{v!r}" for s, v in enumerate(result.loss_history)]
        with open(os.path.join(ns.out, f"loss_{i:04d}.csv"), "w") as f:
            f.write("\n".join(lines) + "\n")
    logger.info("back-projected %d samples into %s", n, ns.out)
    return 0


# --- analyze ---------------------------------------------------------------

def cmd_analyze(ns) -> int:
    if ns.p_drop is None or not 0.0 <= ns.p_drop <= 1.0:
        raise UsageError(f"--p-drop must be in [0, 1], got {ns.p_drop}")
    p_keep = 1.0 - ns.p_drop
    if ns.d is not None and ns.s is not None:
        if ns.d < 1:
            raise UsageError(f"--d must be >= 1, got {ns.d}")
        if not 0.0 <= ns.s <= 1.0:
            raise UsageError(f"--s must be in [0, 1], got {ns.s}")
        exponent_d, exponent_s = ns.d, ns.s
    elif ns.active is not None:
        if ns.active < 0:
            raise UsageError(f"--active must be >= 0, got {ns.active}")
        exponent_d, exponent_s = max(ns.active, 1), 1.0 if ns.active else 0.0
    else:
        raise UsageError("analyze needs --d and --s, or --active")

    closed = mask_identity_probability(p_keep, exponent_d, exponent_s)
    lines = [
        f"keep_probability {p_keep!r}",
        f"d_times_s {float(exponent_d * exponent_s)!r}",
        f"probability {closed['probability']!r}",
        f"log10 {closed['log10']!r}",
    ]
    if ns.trials is not None:
        if ns.active is None:
            raise UsageError("--trials needs --active (and optionally --total)")
        total = ns.total if ns.total is not None else ns.active
        estimate = mask_identity_monte_carlo(
            p_keep, ns.active, total, ns.trials,
            RngStream(ns.seed if ns.seed is not None else 0, ANALYZE_STREAM))
        sigma = math.sqrt(max(estimate * (1.0 - estimate), 0.0) / ns.trials)
        lines += [
            f"mc_trials {ns.trials}",
            f"mc_estimate {estimate!r}",
            f"mc_sigma {sigma!r}",
            f"mc_interval_lo {estimate - 3.0 * sigma!r}",
            f"mc_interval_hi {estimate + 3.0 * sigma!r}",
        ]
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


# --- histogram ---------------------------------------------------------------

def cmd_histogram(ns) -> int:
    doc = _load_json(ns.config)
    _strict(doc, ("scheme", "layer_width", "trials", "bins", "range", "seed"),
            "config")
    seed = _resolve_seed(doc, ns.seed)
    scheme = _parse_scheme(_req(doc, "scheme", "config"))
    hist_range = doc.get("range", [0.0, 1.0])
    if not (isinstance(hist_range, list) and len(hist_range) == 2):
        raise ConfigError("range must be [lo, hi]")
    edges, densities = drop_proportion_histogram(
        scheme,
        layer_width=_count(doc.get("layer_width", 100), "layer_width"),
        trials=_count(doc.get("trials", 100000), "trials"),
        bins=_count(doc.get("bins", 50), "bins"),
        stream=RngStream(seed, HIST_STREAM),
        hist_range=(_num(hist_range[0], "range"), _num(hist_range[1], "range")),
    )
    os.makedirs(ns.out, exist_ok=True)
    path = os.path.join(ns.out, "histogram.csv")
    histogram_to_csv(edges, densities, path)
    logger.info("wrote %s", path)
    return 0


# --- pca ---------------------------------------------------------------------

def cmd_pca(ns) -> int:
    doc = _load_json(ns.config)
    _strict(doc, ("data", "seed"), "config")
    seed = _resolve_seed(doc, ns.seed)
    dataset = _parse_dataset(_req(doc, "data", "config"), seed)
    transform = pca_fit(dataset, ns.k)
    projected = pca_transform(transform, dataset.features)

    os.makedirs(ns.out, exist_ok=True)
    eig_lines = ["component,eigenvalue"] + [
        f"{i + 1},{float(v)!r}" for i, v in enumerate(transform.eigenvalues)]
    with open(os.path.join(ns.out, "eigenvalues.csv"), "w") as f:
        f.write("\n".join(eig_lines) + "\n")
    header = ",".join(f"c{j + 1}" for j in range(ns.k)) + ",label"
    rows = [header] + [
        ",".join(repr(float(v)) for v in projected[i]) + f",{int(dataset.labels[i])}"
        for i in range(projected.shape[0])]
    with open(os.path.join(ns.out, "transformed.csv"), "w") as f:
        f.write("\n".join(rows) + "\n")
    save_tensor_raw(transform.components, os.path.join(ns.out, "components.f64"))
    save_tensor_raw(transform.mean, os.path.join(ns.out, "mean.f64"))
    logger.info("wrote eigenvalues.csv and transformed.csv to %s", ns.out)
    return 0


# --- wiring -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(sub, config_required=True):
    if config_required:
        sub.add_argument("--config", required=True, help="JSON config path")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config seed")
    sub.add_argument("--out", default="dropaug_out", help="output directory")
    sub.add_argument("--quiet", action="store_true", help="log warnings only")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dropaug",
                     description="dropout-as-augmentation experiment driver")
    commands = parser.add_subparsers(dest="command", required=True,
                                     parser_class=_Parser)

    train = commands.add_parser("train", help="run a training protocol")
    _add_common(train)
    train.add_argument("--grid", default=None,
                       help="KEY=V1,V2 expansion over noise levels")
    train.set_defaults(func=cmd_train)

    bp = commands.add_parser("backproject", help="emit x* dumps for samples")
    _add_common(bp)
    bp.add_argument("--all-ones-masks", action="store_true",
                    help="debug: identity masks, x* must equal x")
    bp.set_defaults(func=cmd_backproject)

    an = commands.add_parser("analyze", help="mask-identity probability table")
    an.add_argument("--p-drop", type=float, required=True, dest="p_drop")
    an.add_argument("--d", type=int, default=None, help="layer width")
    an.add_argument("--s", type=float, default=None, help="mean sparsity")
    an.add_argument("--trials", type=int, default=None, help="Monte Carlo trials")
    an.add_argument("--active", type=int, default=None, help="active unit count")
    an.add_argument("--total", type=int, default=None, help="total unit count")
    an.add_argument("--seed", type=int, default=None)
    an.add_argument("--quiet", action="store_true")
    an.set_defaults(func=cmd_analyze)

    hist = commands.add_parser("histogram", help="drop-proportion density CSV")
    _add_common(hist)
    hist.set_defaults(func=cmd_histogram)

    pca = commands.add_parser("pca", help="fit and apply PCA without whitening")
    _add_common(pca)
    pca.add_argument("--k", type=int, required=True, help="number of components")
    pca.set_defaults(func=cmd_pca)
    return parser


def _configure_logging(quiet: bool) -> None:
    # basicConfig is once-per-process; configure our logger directly so
    # repeated in-process invocations still honor --quiet.
    root = logging.getLogger("dropaug")
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
        root.propagate = False
    root.setLevel(logging.WARNING if quiet else logging.INFO)


def main(argv=None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        _configure_logging(getattr(ns, "quiet", False))
        return ns.func(ns)
    except DropaugError as e:
        sys.stderr.write(json.dumps(
            {"error": {"kind": e.kind, "message": str(e)}}, sort_keys=True) + "\n")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
