"""Command-line front end: synth, preprocess, train, eval, kfold, classify.

Every command is deterministic given its flags (including --seed) and
refuses to overwrite existing outputs unless --force is passed.  Errors
derived from SleepStageError print to stderr as ``error[Kind]: message``
and exit with status 1.

A plain-text config file (``key = value``, '#' comments) can pre-set any
flag of the invoked command; explicit command-line flags win.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import model_store, pipeline
from .edf import (
    SleepStage,
    SynthSpec,
    format_hypnogram,
    generate_synthetic_recording,
    load_hypnogram,
    parse_edf,
    parse_stage,
    write_edf,
)
from .errors import (
    DimensionMismatch,
    InvalidConfig,
    IoError,
    SleepStageError,
)
from .pipeline import (
    ALPHA_SWEEP,
    PreprocessConfig,
    TrainConfig,
    mode_config,
)

log = logging.getLogger("sleepstage")


def _write_output(path: str, data, force: bool):
    p = Path(path)
    if p.exists() and not force:
        raise IoError(f"output {path} already exists, pass --force to overwrite")
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        p.write_bytes(data)
    else:
        p.write_text(data)
    log.info("wrote %s", path)


def _read_bytes(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


# --- config file ------------------------------------------------------------


def parse_config_file(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise InvalidConfig(f"config line {lineno} is not 'key = value': {line!r}")
        key, _, value = stripped.partition("=")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _apply_config(parser: argparse.ArgumentParser, cfg: dict[str, str]):
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in cfg.items():
        action = actions.get(key)
        if action is None:
            raise InvalidConfig(f"unknown config key {key!r} for this command")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            low = raw.lower()
            if low in _TRUE:
                defaults[key] = isinstance(action, argparse._StoreTrueAction)
            elif low in _FALSE:
                defaults[key] = not isinstance(action, argparse._StoreTrueAction)
            else:
                raise InvalidConfig(f"config key {key!r} expects a boolean, got {raw!r}")
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except ValueError as exc:
                raise InvalidConfig(f"bad value for config key {key!r}: {raw!r}") from exc
        else:
            defaults[key] = raw
    parser.set_defaults(**defaults)


# --- parser construction ------------------------------------------------------


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="global random seed")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="-v info, -vv debug (stderr)")


def _preprocess_flags(p: argparse.ArgumentParser):
    p.add_argument("--channel", type=int, default=0, help="EEG channel index to use")
    p.add_argument("--target-fs", type=float, default=64.0, help="resample rate, Hz")
    p.add_argument("--notch", type=float, default=50.0,
                   help="power-line notch frequency, Hz (0 disables)")
    p.add_argument("--notch-q", type=float, default=30.0, help="notch quality factor")
    p.add_argument("--band-lo", type=float, default=0.5, help="bandpass low edge, Hz")
    p.add_argument("--band-hi", type=float, default=30.0, help="bandpass high edge, Hz")
    p.add_argument("--order", type=int, default=8, help="bandpass total order")
    p.add_argument("--epoch-seconds", type=float, default=30.0, help="epoch length, s")
    p.add_argument("--t-bins", type=int, default=64, help="image time bins")
    p.add_argument("--f-bins", type=int, default=32, help="image frequency bins")
    p.add_argument("--max-imfs", type=int, default=6, help="IMF cap per epoch")
    p.add_argument("--sift-tol", type=float, default=0.05, help="sifting stop tolerance")
    p.add_argument("--no-autoencoder", action="store_true",
                   help="keep full-resolution images, skip reduction")
    p.add_argument("--latent-dim", type=int, default=None,
                   help="autoencoder latent size (default t*f/8)")
    p.add_argument("--ae-epochs", type=int, default=60, help="autoencoder epochs")
    p.add_argument("--ae-lr", type=float, default=1e-3, help="autoencoder learning rate")


def _train_flags(p: argparse.ArgumentParser):
    p.add_argument("--mode", choices=("proposed", "baseline"), default="proposed",
                   help="proposed = LeakyReLU+Adam, baseline = Sigmoid+SGD")
    p.add_argument("--epochs", type=int, default=30, help="training epochs")
    p.add_argument("--batch-size", type=int, default=16, help="mini-batch size")
    p.add_argument("--alpha", type=float, default=0.1, help="negative-side slope")
    p.add_argument("--optimizer", choices=("adam", "sgd", "none"), default=None,
                   help="override the mode's optimizer")
    p.add_argument("--activation", choices=("sigmoid", "relu", "leaky_relu"),
                   default=None, help="override the mode's activation")
    p.add_argument("--gate", choices=("leaky_clamp", "sigmoid"), default=None,
                   help="override the mode's SE gate")
    p.add_argument("--lr", type=float, default=3e-5, help="learning rate")
    p.add_argument("--ortho-lambda", type=float, default=1e-4,
                   help="orthogonal regularization strength")
    p.add_argument("--no-se", action="store_true", help="disable SE blocks")
    p.add_argument("--no-oversample", action="store_true",
                   help="skip class-balance oversampling of the training set")
    p.add_argument("--precision", choices=("f64", "f32"), default="f64",
                   help="parameter storage precision")


def _train_config(args) -> TrainConfig:
    cfg = mode_config(args.mode, seed=args.seed, epochs=args.epochs,
                      batch_size=args.batch_size, lr=args.lr,
                      ortho_lambda=args.ortho_lambda, alpha=args.alpha,
                      se_enabled=not args.no_se, oversample=not args.no_oversample,
                      precision=args.precision)
    if args.optimizer:
        cfg.optimizer = args.optimizer
    if args.activation:
        cfg.activation = args.activation
    if args.gate:
        cfg.gate = args.gate
    return cfg


def _preprocess_config(args) -> PreprocessConfig:
    return PreprocessConfig(
        channel=args.channel,
        target_fs=args.target_fs,
        notch_f0=args.notch,
        notch_q=args.notch_q,
        band_lo=args.band_lo,
        band_hi=args.band_hi,
        band_order=args.order,
        epoch_s=args.epoch_seconds,
        t_bins=args.t_bins,
        f_bins=args.f_bins,
        max_imfs=args.max_imfs,
        sift_tol=args.sift_tol,
        autoencoder=not args.no_autoencoder,
        latent_dim=args.latent_dim,
        ae_epochs=args.ae_epochs,
        ae_lr=args.ae_lr,
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sleepstage",
        description="EEG sleep-stage classification experiments",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter
    sub_parsers = {}

    p = subs.add_parser("synth", formatter_class=fmt,
                        help="generate a labelled synthetic EDF recording")
    p.add_argument("--stages", default="W,S1,S2,SWS,REM",
                   help="comma-separated stage cycle")
    p.add_argument("--epochs-per-stage", type=int, default=1,
                   help="consecutive 30 s epochs per listed stage")
    p.add_argument("--channels", type=int, default=1, help="EEG channels")
    p.add_argument("--fs", type=float, default=128.0, help="sample rate, Hz (>= 64)")
    p.add_argument("--noise", type=float, default=0.05,
                   help="additive noise level relative to stage amplitude")
    p.add_argument("--out-edf", default="synthetic.edf", help="EDF output path")
    p.add_argument("--out-hypnogram", default="synthetic.hyp",
                   help="hypnogram output path")
    _common_flags(p)
    sub_parsers["synth"] = p

    p = subs.add_parser("preprocess", formatter_class=fmt,
                        help="EDF -> filtered epochs -> time-frequency dataset cache")
    p.add_argument("edf", help="input EDF file")
    p.add_argument("--hypnogram", default=None,
                   help="stage labels, one per line (omit for an unlabeled cache)")
    p.add_argument("--out", default="dataset.essc", help="dataset cache output path")
    p.add_argument("--save-autoencoder", default=None,
                   help="also store the fitted autoencoder at this path")
    _preprocess_flags(p)
    _common_flags(p)
    sub_parsers["preprocess"] = p

    p = subs.add_parser("train", formatter_class=fmt,
                        help="train the classifier on a labelled cache")
    p.add_argument("cache", help="dataset cache from `preprocess`")
    p.add_argument("--out", default="model.esscm", help="model output path")
    p.add_argument("--history", default=None, help="per-epoch history CSV path")
    p.add_argument("--alpha-sweep", action="store_true",
                   help="train once per slope in {0.1, 0.2, 0.3}")
    p.add_argument("--sweep-report", default=None,
                   help="CSV summary path for --alpha-sweep")
    p.add_argument("--save-optimizer-state", action="store_true",
                   help="embed Adam state in the model file")
    p.add_argument("--emit-plot-data", default=None,
                   help="write gnuplot-ready history TSV to this path")
    _train_flags(p)
    _common_flags(p)
    sub_parsers["train"] = p

    p = subs.add_parser("eval", formatter_class=fmt,
                        help="evaluate a model on a labelled cache")
    p.add_argument("model", help="model file from `train`")
    p.add_argument("cache", help="labelled dataset cache")
    p.add_argument("--out-json", default="metrics.json", help="metrics JSON path")
    p.add_argument("--out-csv", default=None, help="metrics CSV path")
    p.add_argument("--include-timing", action="store_true",
                   help="add wall-clock timing to the report files "
                        "(makes re-runs differ byte-wise)")
    p.add_argument("--emit-plot-data", default=None,
                   help="write per-stage accuracy TSV to this path")
    _common_flags(p)
    sub_parsers["eval"] = p

    p = subs.add_parser("kfold", formatter_class=fmt,
                        help="k-fold cross-validated training and evaluation")
    p.add_argument("cache", help="labelled dataset cache")
    p.add_argument("--k", type=int, default=20, help="number of folds")
    p.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    p.add_argument("--out-json", default="kfold.json", help="per-fold + aggregate JSON")
    p.add_argument("--out-csv", default=None, help="per-fold + aggregate CSV")
    p.add_argument("--include-timing", action="store_true",
                   help="add wall-clock timing to the report files")
    p.add_argument("--emit-plot-data", default=None,
                   help="write aggregate per-stage accuracy TSV to this path")
    _train_flags(p)
    _common_flags(p)
    sub_parsers["kfold"] = p

    p = subs.add_parser("classify", formatter_class=fmt,
                        help="predict stages for an unlabeled cache")
    p.add_argument("model", help="model file from `train`")
    p.add_argument("cache", help="dataset cache (labels not required)")
    p.add_argument("--out", default="predictions.csv", help="predictions CSV path")
    _common_flags(p)
    sub_parsers["classify"] = p

    return parser, sub_parsers


# --- commands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    stages = [parse_stage(tok) for tok in args.stages.split(",") if tok.strip()]
    if args.epochs_per_stage < 1:
        raise SleepStageError("--epochs-per-stage must be >= 1")
    sequence = [s for s in stages for _ in range(args.epochs_per_stage)]
    spec = SynthSpec(
        stage_sequence=sequence,
        channels=args.channels,
        fs=args.fs,
        noise_level=args.noise,
        seed=args.seed,
    )
    rec, hyp = generate_synthetic_recording(spec)
    _write_output(args.out_edf, write_edf(rec), args.force)
    _write_output(args.out_hypnogram, format_hypnogram(hyp), args.force)
    log.info("synthesized %d epochs at %g Hz", len(hyp.stages), args.fs)
    return 0


def cmd_preprocess(args) -> int:
    rec = parse_edf(_read_bytes(args.edf))
    hyp = load_hypnogram(_read_text(args.hypnogram)) if args.hypnogram else None
    ds, ae = pipeline.recording_to_dataset(rec, hyp, _preprocess_config(args), args.seed)
    _write_output(args.out, pipeline.save_dataset(ds), args.force)
    if args.save_autoencoder:
        if ae is None:
            raise SleepStageError("--save-autoencoder needs the autoencoder enabled")
        _write_output(args.save_autoencoder, model_store.save_autoencoder(ae), args.force)
    counts = ds.class_counts()
    if counts:
        log.info("class counts: %s", {s.label: c for s, c in counts.items()})
    return 0


def _history_csv(history) -> str:
    lines = ["epoch,loss,accuracy"]
    lines += [f"{h['epoch']},{h['loss']:.10g},{h['accuracy']:.10g}" for h in history]
    return "\n".join(lines) + "\n"


def _history_tsv(history) -> str:
    lines = ["# epoch\tloss\taccuracy"]
    lines += [f"{h['epoch']}\t{h['loss']:.10g}\t{h['accuracy']:.10g}" for h in history]
    return "\n".join(lines) + "\n"


def _stage_accuracy_tsv(report) -> str:
    lines = ["# stage\taccuracy"]
    lines += [f"{s.label}\t{report.per_stage_accuracy[s]:.6f}" for s in SleepStage]
    return "\n".join(lines) + "\n"


def cmd_train(args) -> int:
    ds = pipeline.load_dataset(_read_bytes(args.cache), provenance=f"cache:{args.cache}")
    if ds.labels is None:
        raise SleepStageError("training needs a labelled cache (preprocess with --hypnogram)")
    base_cfg = _train_config(args)

    def run_one(cfg: TrainConfig, model_path: str, history_path, plot_path):
        net, history, state = pipeline.train(ds, cfg, return_state=True)
        if not args.save_optimizer_state:
            state = None
        _write_output(model_path, model_store.save(net, state), args.force)
        if history_path:
            _write_output(history_path, _history_csv(history), args.force)
        if plot_path:
            _write_output(plot_path, _history_tsv(history), args.force)
        return net, history

    if not args.alpha_sweep:
        run_one(base_cfg, args.out, args.history, args.emit_plot_data)
        return 0

    out = Path(args.out)
    rows = ["alpha,final_loss,final_train_accuracy"]
    for alpha in ALPHA_SWEEP:
        cfg = replace(base_cfg, activation="leaky_relu", alpha=alpha)
        model_path = str(out.with_name(f"{out.stem}_alpha{alpha:g}{out.suffix}"))
        hist_path = None
        if args.history:
            hp = Path(args.history)
            hist_path = str(hp.with_name(f"{hp.stem}_alpha{alpha:g}{hp.suffix}"))
        _, history = run_one(cfg, model_path, hist_path, None)
        if history:
            rows.append(
                f"{alpha:g},{history[-1]['loss']:.10g},{history[-1]['accuracy']:.10g}"
            )
        else:
            rows.append(f"{alpha:g},,")
    report_path = args.sweep_report or str(out.with_name(f"{out.stem}_sweep.csv"))
    _write_output(report_path, "\n".join(rows) + "\n", args.force)
    return 0


def _load_model_for_cache(model_path: str, ds) -> "pipeline.Network":
    net, _ = model_store.load(_read_bytes(model_path))
    h, w = ds.image_shape
    if net.input_shape != (1, h, w):
        raise DimensionMismatch(
            f"model expects images of shape {net.input_shape[1:]}, "
            f"cache holds {h}x{w}; preprocess with matching --t-bins/--f-bins "
            f"and autoencoder settings"
        )
    return net


def cmd_eval(args) -> int:
    ds = pipeline.load_dataset(_read_bytes(args.cache), provenance=f"cache:{args.cache}")
    if ds.labels is None:
        raise SleepStageError("eval needs a labelled cache")
    net = _load_model_for_cache(args.model, ds)
    report = pipeline.evaluate(net, ds)
    _write_output(
        args.out_json,
        pipeline.reports_to_json([report], include_timing=args.include_timing),
        args.force,
    )
    if args.out_csv:
        _write_output(
            args.out_csv,
            pipeline.reports_to_csv([report], include_timing=args.include_timing),
            args.force,
        )
    if args.emit_plot_data:
        _write_output(args.emit_plot_data, _stage_accuracy_tsv(report), args.force)
    log.info("overall accuracy %.2f%%", report.overall_accuracy)
    return 0


def cmd_kfold(args) -> int:
    ds = pipeline.load_dataset(_read_bytes(args.cache), provenance=f"cache:{args.cache}")
    if ds.labels is None:
        raise SleepStageError("kfold needs a labelled cache")
    cfg = _train_config(args)
    result = pipeline.run_experiment(ds, cfg, mode="kfold", k=args.k, jobs=args.jobs)
    _write_output(
        args.out_json,
        pipeline.reports_to_json(result.reports, result.aggregate, args.include_timing),
        args.force,
    )
    if args.out_csv:
        _write_output(
            args.out_csv,
            pipeline.reports_to_csv(result.reports, result.aggregate, args.include_timing),
            args.force,
        )
    if args.emit_plot_data:
        _write_output(args.emit_plot_data, _stage_accuracy_tsv(result.aggregate), args.force)
    log.info(
        "aggregate accuracy %.2f%% over %d folds", result.aggregate.overall_accuracy, args.k
    )
    return 0


def cmd_classify(args) -> int:
    ds = pipeline.load_dataset(_read_bytes(args.cache), provenance=f"cache:{args.cache}")
    net = _load_model_for_cache(args.model, ds)
    x = ds.images[:, None, :, :].astype(np.float64)
    lines = ["epoch_index,predicted_stage," + ",".join(f"p_{s.label}" for s in SleepStage)]
    for i in range(0, len(ds), 64):
        probs = np.atleast_2d(net.forward(x[i : i + 64]))
        for j, row in enumerate(probs):
            stage = SleepStage(int(np.argmax(row)))
            lines.append(
                f"{i + j},{stage.label}," + ",".join(f"{p:.10g}" for p in row)
            )
    _write_output(args.out, "\n".join(lines) + "\n", args.force)
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "kfold": cmd_kfold,
    "classify": cmd_classify,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, sub_parsers = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            _apply_config(sub_parsers[args.command], parse_config_file(_read_text(args.config)))
            args = parser.parse_args(argv)
        level = logging.WARNING - 10 * min(args.verbose, 2)
        logging.basicConfig(level=level, stream=sys.stderr, format="%(message)s")
        return _COMMANDS[args.command](args)
    except SleepStageError as exc:
        print(f"error[{exc.kind}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
