"""End-to-end orchestration: preprocessing into datasets, train/test
splitting (k-fold and hold-out), the training loop, evaluation metrics,
and the binary dataset cache.

Oversampling runs inside ``train`` only, so evaluation folds are never
inflated.  Every split, shuffle and initialization flows through seeded
generators; fold f of an experiment uses sub-seed ``seed ^ f``.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import dsp, hht
from .edf import Hypnogram, Recording, SleepStage, STAGES, SynthSpec, generate_synthetic_recording
from .errors import (
    BadMagic,
    EmptyDataset,
    EmptyInput,
    InvalidSpec,
    TooFewItems,
    TruncatedData,
)
from .hht import Autoencoder, encode_to_image, train_autoencoder
from .nn import Network, NetworkConfig
from .optim import (
    DEFAULT_BETA1,
    DEFAULT_BETA2,
    DEFAULT_EPS,
    DEFAULT_LR,
    AdamState,
    adam_step,
    sgd_step,
)

log = logging.getLogger(__name__)

N_STAGES = len(STAGES)
DATASET_MAGIC = b"ESSCDS01"


# --- data containers -----------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # (n, height, width) float32
    labels: np.ndarray | None  # (n,) int64 stage codes, or None when unlabeled
    provenance: str = ""
    seed: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 3:
            raise InvalidSpec("dataset images must be a (n, height, width) array")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise InvalidSpec("labels must align 1:1 with images")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            images=self.images[idx],
            labels=None if self.labels is None else self.labels[idx],
            provenance=self.provenance,
            seed=self.seed,
        )

    def class_counts(self) -> dict[SleepStage, int]:
        if self.labels is None:
            return {}
        return {s: int(np.sum(self.labels == s)) for s in STAGES}


@dataclass
class FoldPlan:
    k: int
    assignment: np.ndarray  # per-item fold index

    def fold_indices(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        test = np.flatnonzero(self.assignment == fold)
        train = np.flatnonzero(self.assignment != fold)
        return train, test


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    optimizer: str = "adam"  # adam | sgd | none
    activation: str = "leaky_relu"  # sigmoid | relu | leaky_relu
    alpha: float = 0.1
    gate: str = "leaky_clamp"  # leaky_clamp | sigmoid
    ortho_lambda: float = 1e-4
    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS
    seed: int = 0
    se_enabled: bool = True
    oversample: bool = True
    precision: str = "f64"  # f64 | f32 parameter storage

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            activation=self.activation,
            alpha=self.alpha,
            se_enabled=self.se_enabled,
            gate=self.gate,
        )


def mode_config(mode: str, **overrides) -> TrainConfig:
    """Preset configs: 'proposed' = LeakyReLU + Adam + clamped leaky gate;
    'baseline' = sigmoid activation and gate, plain gradient descent."""
    if mode == "proposed":
        cfg = TrainConfig(optimizer="adam", activation="leaky_relu", gate="leaky_clamp")
    elif mode == "baseline":
        cfg = TrainConfig(optimizer="sgd", activation="sigmoid", gate="sigmoid")
    else:
        raise InvalidSpec(f"unknown mode {mode!r} (expected proposed/baseline)")
    return replace(cfg, **overrides)


ALPHA_SWEEP = (0.1, 0.2, 0.3)


@dataclass
class MetricsReport:
    confusion: np.ndarray  # (5, 5) counts, true stage x predicted stage
    per_stage_accuracy: np.ndarray  # percent, one-vs-rest
    overall_accuracy: float  # percent, trace/total
    macro_f1: float
    cohen_kappa: float
    std_dev: dict[str, float] | None = None
    processing_time_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "confusion": self.confusion.astype(int).tolist(),
            "per_stage_accuracy": {
                s.label: float(self.per_stage_accuracy[s]) for s in STAGES
            },
            "overall_accuracy": float(self.overall_accuracy),
            "macro_f1": float(self.macro_f1),
            "cohen_kappa": float(self.cohen_kappa),
        }
        if self.std_dev is not None:
            out["std_dev"] = {k: float(v) for k, v in self.std_dev.items()}
        if include_timing:
            out["processing_time_s"] = float(self.processing_time_s)
        return out


# --- splits ----------------------------------------------------------------------


def kfold_split(n: int, k: int = 20, seed: int = 0) -> FoldPlan:
    """Random disjoint exhaustive folds whose sizes differ by at most 1."""
    if k < 2:
        raise TooFewItems(f"k must be >= 2, got {k}")
    if n < k:
        raise TooFewItems(f"cannot split {n} items into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % k
    return FoldPlan(k=k, assignment=assignment)


def holdout_split(n: int, test_fraction: float = 0.15, seed: int = 0):
    """(train_indices, test_indices) with |test| = round(n*fraction), >= 1."""
    if not 0.0 < test_fraction < 1.0:
        raise InvalidSpec(f"test_fraction must be in (0, 1), got {test_fraction}")
    if n < 2:
        raise TooFewItems(f"need at least 2 items to split, got {n}")
    n_test = int(round(n * test_fraction))
    n_test = min(max(n_test, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# --- metrics ------------------------------------------------------------------------


def confusion_matrix(labels, preds, n_classes: int = N_STAGES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    return conf


def metrics_from_confusion(conf: np.ndarray) -> dict:
    """Overall accuracy (trace/total), one-vs-rest per-stage accuracy,
    macro F1 and Cohen's kappa, all from the counts."""
    conf = np.asarray(conf, dtype=np.float64)
    total = conf.sum()
    if total <= 0:
        raise EmptyDataset("empty confusion matrix")
    tp = np.diag(conf)
    row = conf.sum(axis=1)
    col = conf.sum(axis=0)
    fn = row - tp
    fp = col - tp
    tn = total - tp - fn - fp
    per_stage = 100.0 * (tp + tn) / total
    f1_den = 2.0 * tp + fp + fn
    f1 = np.divide(2.0 * tp, f1_den, out=np.zeros_like(tp), where=f1_den > 0)
    po = tp.sum() / total
    pe = float((row * col).sum()) / (total * total)
    if pe >= 1.0:
        kappa = 1.0 if po >= 1.0 else 0.0
    else:
        kappa = (po - pe) / (1.0 - pe)
    return {
        "per_stage_accuracy": per_stage,
        "overall_accuracy": 100.0 * po,
        "macro_f1": float(f1.mean()),
        "cohen_kappa": float(kappa),
    }


def std_dev(xs) -> float:
    """Population standard deviation sqrt(sum|x - mean|^2 / n)."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise EmptyInput("std_dev of an empty sequence")
    return float(np.sqrt(np.mean(np.abs(xs - xs.mean()) ** 2)))


# --- training and evaluation -----------------------------------------------------------


def _oversample_dataset(ds: Dataset, seed: int) -> Dataset:
    es = dsp.EpochSet(
        epochs=ds.images.reshape(len(ds), -1).astype(np.float64),
        labels=[SleepStage(int(c)) for c in ds.labels],
    )
    balanced = dsp.oversample_classes(es, seed=seed)
    h, w = ds.image_shape
    return Dataset(
        images=balanced.epochs.reshape(-1, h, w),
        labels=np.array([int(s) for s in balanced.labels], dtype=np.int64),
        provenance=ds.provenance + "+oversampled",
        seed=ds.seed,
    )


def train(dataset: Dataset, cfg: TrainConfig, return_state: bool = False):
    """Train the 7-conv network on a labelled dataset.

    Returns (network, history) where history records mean batch loss and
    training accuracy per epoch; cfg.epochs == 0 returns the freshly
    initialized network with an empty history.  With return_state=True the
    final optimizer state is appended to the tuple (None unless Adam).
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if dataset.labels is None:
        raise EmptyDataset("training requires a labelled dataset")
    if cfg.oversample:
        dataset = _oversample_dataset(dataset, cfg.seed)

    h, w = dataset.image_shape
    net = Network.build((1, h, w), cfg.network_config(), seed=cfg.seed)
    params = net.parameters()
    if cfg.precision == "f32":
        for p in params:
            p[...] = p.astype(np.float32)
    state = (
        AdamState.init(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        if cfg.optimizer == "adam"
        else None
    )

    x_all = dataset.images[:, None, :, :].astype(np.float64)
    y_all = dataset.labels
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for b0 in range(0, len(dataset), cfg.batch_size):
            idx = order[b0 : b0 + cfg.batch_size]
            loss, _ = net.loss_and_grad(x_all[idx], y_all[idx], cfg.ortho_lambda)
            grads = net.gradients()
            if cfg.optimizer == "adam":
                adam_step(params, grads, state)
            elif cfg.optimizer == "sgd":
                sgd_step(params, grads, cfg.lr)
            if cfg.precision == "f32":
                for p in params:
                    p[...] = p.astype(np.float32)
            losses.append(loss)
        acc = float(np.mean(_predict_all(net, x_all) == y_all))
        history.append(
            {"epoch": epoch + 1, "loss": float(np.mean(losses)), "accuracy": 100.0 * acc}
        )
    if return_state:
        return net, history, state
    return net, history


def _predict_all(net: Network, x: np.ndarray, batch: int = 64) -> np.ndarray:
    preds = [net.predict(x[i : i + batch]) for i in range(0, x.shape[0], batch)]
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def evaluate(net: Network, dataset: Dataset) -> MetricsReport:
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    if dataset.labels is None:
        raise EmptyDataset("evaluation requires a labelled dataset")
    t0 = time.monotonic()
    preds = _predict_all(net, dataset.images[:, None, :, :].astype(np.float64))
    conf = confusion_matrix(dataset.labels, preds)
    m = metrics_from_confusion(conf)
    return MetricsReport(
        confusion=conf,
        per_stage_accuracy=m["per_stage_accuracy"],
        overall_accuracy=m["overall_accuracy"],
        macro_f1=m["macro_f1"],
        cohen_kappa=m["cohen_kappa"],
        processing_time_s=time.monotonic() - t0,
    )


# --- preprocessing into datasets ---------------------------------------------------------


@dataclass
class PreprocessConfig:
    channel: int = 0
    target_fs: float = 64.0
    notch_f0: float = 50.0
    notch_q: float = 30.0
    band_lo: float = 0.5
    band_hi: float = 30.0
    band_order: int = 8
    epoch_s: float = 30.0
    t_bins: int = hht.TFI_TIME_BINS
    f_bins: int = hht.TFI_FREQ_BINS
    max_imfs: int = hht.DEFAULT_MAX_IMFS
    sift_tol: float = hht.DEFAULT_SIFT_TOL
    autoencoder: bool = True
    latent_dim: int | None = None
    ae_epochs: int = hht.DEFAULT_AE_EPOCHS
    ae_lr: float = hht.DEFAULT_AE_LR


def recording_to_dataset(
    rec: Recording,
    hyp: Hypnogram | None,
    pp: PreprocessConfig = None,
    seed: int = 0,
) -> tuple[Dataset, Autoencoder | None]:
    """Notch (when representable at the source rate), resample, bandpass,
    segment, HHT-image, and optionally autoencode one EEG channel."""
    pp = pp or PreprocessConfig()
    if not 0 <= pp.channel < len(rec.channels):
        raise InvalidSpec(
            f"channel {pp.channel} out of range, recording has {len(rec.channels)}"
        )
    fs = rec.header.sample_rate(pp.channel)
    ts = dsp.TimeSeries(rec.channels[pp.channel], fs)

    if pp.notch_f0 > 0 and pp.notch_f0 < fs / 2.0:
        # power-line notch runs at the source rate; after resampling to
        # 64 Hz the notch frequency would sit above Nyquist
        ts = dsp.filter_apply(dsp.design_notch(fs, pp.notch_f0, pp.notch_q), ts)
    elif pp.notch_f0 > 0:
        log.info("skipping %g Hz notch, source rate %g Hz is too low", pp.notch_f0, fs)

    ts = dsp.resample(ts, pp.target_fs)
    band = dsp.design_butterworth_bandpass(
        pp.target_fs, pp.band_lo, pp.band_hi, pp.band_order
    )
    ts = dsp.filter_apply(band, ts)
    es = dsp.segment_epochs(ts, hyp, pp.epoch_s)

    tfis = np.stack(
        [
            hht.epoch_to_tfi(
                e, pp.target_fs, pp.t_bins, pp.f_bins, pp.max_imfs, pp.sift_tol
            )
            for e in es.epochs
        ]
    )
    ae = None
    if pp.autoencoder:
        ae = train_autoencoder(
            tfis, pp.latent_dim, epochs=pp.ae_epochs, seed=seed, lr=pp.ae_lr
        )
        images = np.stack([encode_to_image(ae, img) for img in tfis])
    else:
        images = tfis

    labels = None
    if es.labels is not None:
        labels = np.array([int(s) for s in es.labels], dtype=np.int64)
    ds = Dataset(images=images, labels=labels, provenance="recording", seed=seed)
    if labels is not None:
        log.info(
            "dataset: %d epochs, class counts %s",
            len(ds),
            {s.label: c for s, c in ds.class_counts().items()},
        )
    return ds, ae


# --- experiments ----------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    mode: str
    reports: list[MetricsReport]
    aggregate: MetricsReport
    total_time_s: float = 0.0


_AGG_KEYS = ("overall_accuracy", "macro_f1", "cohen_kappa")


def aggregate_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Mean over folds per metric, with the population std_dev of each;
    confusion matrices are summed."""
    if not reports:
        raise EmptyDataset("no fold reports to aggregate")
    conf = np.sum([r.confusion for r in reports], axis=0)
    per_stage = np.mean([r.per_stage_accuracy for r in reports], axis=0)
    stds = {key: std_dev([getattr(r, key) for r in reports]) for key in _AGG_KEYS}
    for s in STAGES:
        stds[f"per_stage_accuracy_{s.label}"] = std_dev(
            [r.per_stage_accuracy[s] for r in reports]
        )
    return MetricsReport(
        confusion=conf,
        per_stage_accuracy=per_stage,
        overall_accuracy=float(np.mean([r.overall_accuracy for r in reports])),
        macro_f1=float(np.mean([r.macro_f1 for r in reports])),
        cohen_kappa=float(np.mean([r.cohen_kappa for r in reports])),
        std_dev=stds,
        processing_time_s=float(np.sum([r.processing_time_s for r in reports])),
    )


def _run_fold(args) -> MetricsReport:
    dataset, train_idx, test_idx, cfg, fold_seed = args
    t0 = time.monotonic()
    net, _ = train(dataset.subset(train_idx), replace(cfg, seed=fold_seed))
    report = evaluate(net, dataset.subset(test_idx))
    report.processing_time_s = time.monotonic() - t0
    return report


def build_dataset(source, pp: PreprocessConfig = None, seed: int = 0) -> Dataset:
    """Accepts a ready Dataset, a (Recording, Hypnogram) pair, or a SynthSpec."""
    if isinstance(source, Dataset):
        return source
    if isinstance(source, SynthSpec):
        rec, hyp = generate_synthetic_recording(source)
        return recording_to_dataset(rec, hyp, pp, seed)[0]
    rec, hyp = source
    return recording_to_dataset(rec, hyp, pp, seed)[0]


def run_experiment(
    source,
    cfg: TrainConfig = None,
    pp: PreprocessConfig = None,
    mode: str = "kfold",
    k: int = 20,
    test_fraction: float = 0.15,
    jobs: int = 1,
) -> ExperimentResult:
    """Full pipeline: preprocess, split, train per fold, evaluate, aggregate."""
    cfg = cfg or TrainConfig()
    t_start = time.monotonic()
    dataset = build_dataset(source, pp, cfg.seed)
    if dataset.labels is None:
        raise EmptyDataset("experiments need a labelled dataset")

    if mode == "kfold":
        plan = kfold_split(len(dataset), k, cfg.seed)
        splits = [plan.fold_indices(f) for f in range(k)]
    elif mode == "holdout":
        splits = [holdout_split(len(dataset), test_fraction, cfg.seed)]
    else:
        raise InvalidSpec(f"unknown experiment mode {mode!r}")

    jobs = max(1, int(jobs))
    tasks = [
        (dataset, tr, te, cfg, cfg.seed ^ fold) for fold, (tr, te) in enumerate(splits)
    ]
    if jobs == 1 or len(tasks) == 1:
        reports = [_run_fold(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_fold, tasks))

    return ExperimentResult(
        mode=mode,
        reports=reports,
        aggregate=aggregate_reports(reports),
        total_time_s=time.monotonic() - t_start,
    )


# --- dataset cache file (magic ESSCDS01) --------------------------------------------------------


def save_dataset(ds: Dataset) -> bytes:
    h, w = ds.image_shape
    labeled = ds.labels is not None
    head = DATASET_MAGIC + struct.pack("<IIII", len(ds), h, w, 1 if labeled else 0)
    body = np.ascontiguousarray(ds.images, dtype="<f4").tobytes()
    tail = ds.labels.astype(np.uint8).tobytes() if labeled else b""
    return head + body + tail


def load_dataset(data: bytes, provenance: str = "cache") -> Dataset:
    if len(data) < len(DATASET_MAGIC) + 16:
        raise TruncatedData(f"dataset cache of {len(data)} bytes is too short")
    if data[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise BadMagic(
            f"expected magic {DATASET_MAGIC!r}, got {data[: len(DATASET_MAGIC)]!r}"
        )
    n, h, w, labeled = struct.unpack_from("<IIII", data, len(DATASET_MAGIC))
    off = len(DATASET_MAGIC) + 16
    need = off + n * h * w * 4 + (n if labeled else 0)
    if len(data) < need:
        raise TruncatedData(f"dataset cache has {len(data)} bytes, needs {need}")
    images = np.frombuffer(data, dtype="<f4", count=n * h * w, offset=off)
    images = images.reshape(n, h, w).copy()
    labels = None
    if labeled:
        labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=off + n * h * w * 4)
        labels = labels.astype(np.int64)
        if labels.size and labels.max() >= N_STAGES:
            raise TruncatedData("dataset cache contains invalid stage codes")
    return Dataset(images=images, labels=labels, provenance=provenance)


# --- report serialization --------------------------------------------------------------------


def reports_to_json(
    reports: list[MetricsReport],
    aggregate: MetricsReport | None = None,
    include_timing: bool = False,
) -> str:
    doc = {"folds": [r.to_dict(include_timing) for r in reports]}
    if aggregate is not None:
        doc["aggregate"] = aggregate.to_dict(include_timing)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def reports_to_csv(
    reports: list[MetricsReport],
    aggregate: MetricsReport | None = None,
    include_timing: bool = False,
) -> str:
    cols = ["fold", "overall_accuracy", "macro_f1", "cohen_kappa"]
    cols += [f"accuracy_{s.label}" for s in STAGES]
    if include_timing:
        cols.append("processing_time_s")
    lines = [",".join(cols)]

    def row(name: str, r: MetricsReport) -> str:
        vals = [name, f"{r.overall_accuracy:.6f}", f"{r.macro_f1:.6f}", f"{r.cohen_kappa:.6f}"]
        vals += [f"{r.per_stage_accuracy[s]:.6f}" for s in STAGES]
        if include_timing:
            vals.append(f"{r.processing_time_s:.6f}")
        return ",".join(vals)

    for i, r in enumerate(reports):
        lines.append(row(str(i), r))
    if aggregate is not None:
        lines.append(row("aggregate", aggregate))
    return "\n".join(lines) + "\n"
