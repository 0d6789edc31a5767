"""EDF (European Data Format) reading/writing, hypnograms, synthetic EEG.

The on-disk layout is the classic EDF one: a 256-byte fixed ASCII header,
256 bytes of per-field arrays for each signal, then interleaved data
records of 16-bit little-endian two's-complement samples.  Digital values
map to physical units through the per-signal affine
``(physical_max - physical_min) / (digital_max - digital_min)`` scale.

EDF+ annotation channels are skipped, never parsed; BDF is out of scope.
"""

from __future__ import annotations

import datetime
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import (
    InvalidSpec,
    MalformedHeader,
    RangeOverflow,
    TruncatedData,
    UnknownLabel,
)

ANNOTATION_LABEL = "EDF Annotations"


class SleepStage(IntEnum):
    """The five R&K classes, with S3/S4 merged into slow-wave sleep."""

    Wake = 0
    S1 = 1
    S2 = 2
    SWS = 3
    REM = 4

    @property
    def label(self) -> str:
        return _STAGE_LABELS[self]


_STAGE_LABELS = {
    SleepStage.Wake: "W",
    SleepStage.S1: "S1",
    SleepStage.S2: "S2",
    SleepStage.SWS: "SWS",
    SleepStage.REM: "REM",
}

_LABEL_TO_STAGE = {
    "W": SleepStage.Wake,
    "S1": SleepStage.S1,
    "S2": SleepStage.S2,
    "S3": SleepStage.SWS,
    "S4": SleepStage.SWS,
    "SWS": SleepStage.SWS,
    "REM": SleepStage.REM,
}

STAGES = tuple(SleepStage)


@dataclass
class SignalSpec:
    label: str = "EEG"
    transducer: str = ""
    physical_dim: str = "uV"
    physical_min: float = -1000.0
    physical_max: float = 1000.0
    digital_min: int = -32768
    digital_max: int = 32767
    prefiltering: str = ""
    samples_per_record: int = 64

    @property
    def scale(self) -> float:
        return (self.physical_max - self.physical_min) / (
            self.digital_max - self.digital_min
        )

    def validate(self):
        if not self.physical_max > self.physical_min:
            raise InvalidSpec("physical_max must exceed physical_min")
        if not self.digital_max > self.digital_min:
            raise InvalidSpec("digital_max must exceed digital_min")
        if not (-32768 <= self.digital_min and self.digital_max <= 32767):
            raise InvalidSpec("digital range must fit in int16")
        if self.samples_per_record < 1:
            raise InvalidSpec("samples_per_record must be >= 1")


@dataclass
class EdfHeader:
    version_tag: str = "0"
    patient_id: str = "X"
    recording_id: str = "X"
    start_datetime: datetime.datetime = datetime.datetime(2000, 1, 1, 0, 0, 0)
    num_data_records: int = 0
    record_duration_s: float = 1.0
    signals: list[SignalSpec] = field(default_factory=list)

    @property
    def header_bytes(self) -> int:
        return 256 * (1 + len(self.signals))

    def sample_rate(self, i: int) -> float:
        return self.signals[i].samples_per_record / self.record_duration_s


@dataclass
class Recording:
    header: EdfHeader
    channels: list[np.ndarray]

    @property
    def sample_rates(self) -> list[float]:
        return [self.header.sample_rate(i) for i in range(len(self.channels))]

    @property
    def duration_s(self) -> float:
        return self.header.num_data_records * self.header.record_duration_s


@dataclass
class Hypnogram:
    epoch_duration_s: float = 30.0
    stages: list[SleepStage] = field(default_factory=list)


def _ascii_field(raw: bytes) -> str:
    return raw.decode("ascii", errors="replace").rstrip()


def _int_field(raw: bytes, name: str) -> int:
    try:
        return int(raw.decode("ascii").strip())
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedHeader(f"non-numeric {name} field: {raw!r}") from exc


def _float_field(raw: bytes, name: str) -> float:
    try:
        return float(raw.decode("ascii").strip())
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedHeader(f"non-numeric {name} field: {raw!r}") from exc


def parse_edf(data: bytes) -> Recording:
    """Decode an EDF byte string into a Recording in physical units."""
    if len(data) < 256:
        raise TruncatedData(f"EDF input is {len(data)} bytes, need at least 256")
    version = _ascii_field(data[0:8])
    patient = _ascii_field(data[8:88])
    recording = _ascii_field(data[88:168])
    startdate = _ascii_field(data[168:176])
    starttime = _ascii_field(data[176:184])
    header_bytes = _int_field(data[184:192], "header-bytes")
    num_records = _int_field(data[236:244], "record-count")
    duration = _float_field(data[244:252], "record-duration")
    ns = _int_field(data[252:256], "signal-count")

    if ns < 1:
        raise MalformedHeader(f"signal count must be >= 1, got {ns}")
    if duration <= 0:
        raise MalformedHeader(f"record duration must be > 0, got {duration}")
    if header_bytes != 256 * (1 + ns):
        raise MalformedHeader(
            f"header-bytes field {header_bytes} != 256*(1+{ns} signals)"
        )
    if len(data) < header_bytes:
        raise TruncatedData(
            f"file has {len(data)} bytes, header alone needs {header_bytes}"
        )

    def sig_fields(offset: int, width: int) -> list[bytes]:
        base = 256 + offset * ns
        return [data[base + i * width : base + (i + 1) * width] for i in range(ns)]

    labels = [_ascii_field(b) for b in sig_fields(0, 16)]
    transducers = [_ascii_field(b) for b in sig_fields(16, 80)]
    dims = [_ascii_field(b) for b in sig_fields(96, 8)]
    pmins = [_float_field(b, "physical-min") for b in sig_fields(104, 8)]
    pmaxs = [_float_field(b, "physical-max") for b in sig_fields(112, 8)]
    dmins = [_int_field(b, "digital-min") for b in sig_fields(120, 8)]
    dmaxs = [_int_field(b, "digital-max") for b in sig_fields(128, 8)]
    prefilters = [_ascii_field(b) for b in sig_fields(136, 80)]
    sprs = [_int_field(b, "samples-per-record") for b in sig_fields(216, 8)]

    specs = []
    for i in range(ns):
        if pmaxs[i] <= pmins[i] or dmaxs[i] <= dmins[i]:
            raise MalformedHeader(f"signal {i}: degenerate physical/digital range")
        if sprs[i] < 1:
            raise MalformedHeader(f"signal {i}: samples-per-record {sprs[i]} < 1")
        specs.append(
            SignalSpec(
                label=labels[i],
                transducer=transducers[i],
                physical_dim=dims[i],
                physical_min=pmins[i],
                physical_max=pmaxs[i],
                digital_min=dmins[i],
                digital_max=dmaxs[i],
                prefiltering=prefilters[i],
                samples_per_record=sprs[i],
            )
        )

    record_words = sum(sprs)
    record_size = record_words * 2
    if num_records == -1:
        num_records = (len(data) - header_bytes) // record_size if record_size else 0
    expected = header_bytes + num_records * record_size
    if len(data) < expected:
        raise TruncatedData(
            f"file has {len(data)} bytes, {num_records} records need {expected}"
        )

    try:
        start = datetime.datetime.strptime(
            startdate + " " + starttime, "%d.%m.%y %H.%M.%S"
        )
    except ValueError as exc:
        raise MalformedHeader(
            f"bad start date/time {startdate!r} {starttime!r}"
        ) from exc

    raw = np.frombuffer(
        data, dtype="<i2", count=num_records * record_words, offset=header_bytes
    ).reshape(num_records, record_words)

    channels = []
    keep_specs = []
    off = 0
    for i, spec in enumerate(specs):
        block = raw[:, off : off + spec.samples_per_record]
        off += spec.samples_per_record
        if spec.label == ANNOTATION_LABEL:
            continue
        digital = block.reshape(-1).astype(np.float64)
        channels.append((digital - spec.digital_min) * spec.scale + spec.physical_min)
        keep_specs.append(spec)

    header = EdfHeader(
        version_tag=version,
        patient_id=patient,
        recording_id=recording,
        start_datetime=start,
        num_data_records=num_records,
        record_duration_s=duration,
        signals=keep_specs,
    )
    return Recording(header=header, channels=channels)


def _pack(text: str, width: int, name: str) -> bytes:
    raw = text.encode("ascii", errors="replace")
    if len(raw) > width:
        raise InvalidSpec(f"{name} {text!r} does not fit in {width} ASCII bytes")
    return raw.ljust(width)


def _num_str(value: float) -> str:
    """8-char-safe decimal text that reparses to exactly `value`.

    The parse side rebuilds the affine sample map from these header
    fields, so a lossy rendering would silently shift every sample.
    """
    if float(value) == int(value):
        text = str(int(value))
    else:
        text = f"{value:.8g}"
    if len(text) > 8 or float(text) != float(value):
        raise InvalidSpec(
            f"value {value!r} is not exactly representable in an 8-char EDF field"
        )
    return text


def write_edf(rec: Recording) -> bytes:
    """Serialize a Recording to bit-exact EDF bytes."""
    hdr = rec.header
    ns = len(hdr.signals)
    if ns != len(rec.channels) or ns < 1:
        raise InvalidSpec("recording needs one SignalSpec per channel")
    for spec in hdr.signals:
        spec.validate()

    parts = [
        _pack(hdr.version_tag, 8, "version"),
        _pack(hdr.patient_id, 80, "patient-id"),
        _pack(hdr.recording_id, 80, "recording-id"),
        _pack(hdr.start_datetime.strftime("%d.%m.%y"), 8, "start-date"),
        _pack(hdr.start_datetime.strftime("%H.%M.%S"), 8, "start-time"),
        _pack(str(hdr.header_bytes), 8, "header-bytes"),
        _pack("", 44, "reserved"),
        _pack(str(hdr.num_data_records), 8, "record-count"),
        _pack(_num_str(hdr.record_duration_s), 8, "record-duration"),
        _pack(str(ns), 4, "signal-count"),
    ]
    for width, name, getter in (
        (16, "label", lambda s: s.label),
        (80, "transducer", lambda s: s.transducer),
        (8, "physical-dim", lambda s: s.physical_dim),
        (8, "physical-min", lambda s: _num_str(s.physical_min)),
        (8, "physical-max", lambda s: _num_str(s.physical_max)),
        (8, "digital-min", lambda s: str(s.digital_min)),
        (8, "digital-max", lambda s: str(s.digital_max)),
        (80, "prefiltering", lambda s: s.prefiltering),
        (8, "samples-per-record", lambda s: str(s.samples_per_record)),
        (32, "signal-reserved", lambda s: ""),
    ):
        for spec in hdr.signals:
            parts.append(_pack(getter(spec), width, name))

    nrec = hdr.num_data_records
    record_words = sum(s.samples_per_record for s in hdr.signals)
    digital = np.empty((nrec, record_words), dtype="<i2")
    off = 0
    for spec, channel in zip(hdr.signals, rec.channels):
        samples = np.asarray(channel, dtype=np.float64)
        if samples.shape[0] != nrec * spec.samples_per_record:
            raise InvalidSpec(
                f"channel {spec.label!r} has {samples.shape[0]} samples, "
                f"expected {nrec * spec.samples_per_record}"
            )
        codes = np.rint((samples - spec.physical_min) / spec.scale + spec.digital_min)
        if codes.size and (codes.min() < spec.digital_min or codes.max() > spec.digital_max):
            raise RangeOverflow(
                f"channel {spec.label!r} has samples outside "
                f"[{spec.physical_min}, {spec.physical_max}]"
            )
        digital[:, off : off + spec.samples_per_record] = codes.reshape(
            nrec, spec.samples_per_record
        )
        off += spec.samples_per_record

    return b"".join(parts) + digital.tobytes()


# --- synthetic EEG -----------------------------------------------------------

EPOCH_SECONDS = 30.0


@dataclass
class SynthSpec:
    stage_sequence: list[SleepStage]
    channels: int = 1
    duration_s: float | None = None
    fs: float = 128.0
    noise_level: float = 0.05
    seed: int = 0


def _stage_epoch(stage: SleepStage, fs: float, rng: np.random.Generator) -> np.ndarray:
    """One 30 s epoch of the stage template, before additive noise."""
    n = int(round(EPOCH_SECONDS * fs))
    t = np.arange(n) / fs
    two_pi = 2.0 * np.pi

    def tone(lo, hi, amp):
        f = rng.uniform(lo, hi)
        phase = rng.uniform(0.0, two_pi)
        return amp * np.sin(two_pi * f * t + phase)

    if stage == SleepStage.Wake:
        # alpha-dominant plus broadband activity
        return tone(8.5, 11.5, 30.0) + 8.0 * rng.standard_normal(n)
    if stage == SleepStage.S1:
        return tone(4.5, 6.5, 40.0)
    if stage == SleepStage.S2:
        x = tone(4.5, 6.5, 40.0)
        for _ in range(2):
            start = rng.uniform(2.0, EPOCH_SECONDS - 3.0)
            f = rng.uniform(12.5, 13.5)
            phase = rng.uniform(0.0, two_pi)
            env = np.clip(1.0 - np.abs((t - start - 0.5) / 0.5), 0.0, 1.0)
            x = x + 30.0 * env * np.sin(two_pi * f * t + phase)
        return x
    if stage == SleepStage.SWS:
        return tone(0.8, 1.6, 150.0)
    # REM: mixed-frequency, low amplitude
    return tone(4.0, 6.0, 12.0) + tone(8.0, 10.0, 12.0)


_STAGE_BASE_AMP = {
    SleepStage.Wake: 30.0,
    SleepStage.S1: 40.0,
    SleepStage.S2: 40.0,
    SleepStage.SWS: 150.0,
    SleepStage.REM: 12.0,
}


def generate_synthetic_recording(spec: SynthSpec) -> tuple[Recording, Hypnogram]:
    """Labelled synthetic EEG, a pure function of (spec, seed)."""
    if spec.fs < 64:
        raise InvalidSpec(f"fs must be >= 64 Hz, got {spec.fs}")
    if spec.fs != int(spec.fs):
        raise InvalidSpec("fs must be an integer number of samples per second")
    if not spec.stage_sequence:
        raise InvalidSpec("stage_sequence must be non-empty")
    if spec.channels < 1:
        raise InvalidSpec("channels must be >= 1")
    if spec.duration_s is None:
        n_epochs = len(spec.stage_sequence)
    else:
        if spec.duration_s <= 0:
            raise InvalidSpec(f"duration_s must be positive, got {spec.duration_s}")
        n_epochs = int(spec.duration_s // EPOCH_SECONDS)
        if n_epochs < 1:
            raise InvalidSpec("duration_s shorter than one 30 s epoch")

    fs = int(spec.fs)
    stages = [spec.stage_sequence[i % len(spec.stage_sequence)] for i in range(n_epochs)]
    rng = np.random.default_rng(spec.seed)

    channels = []
    for _ in range(spec.channels):
        parts = []
        for stage in stages:
            epoch = _stage_epoch(stage, fs, rng)
            if spec.noise_level > 0:
                epoch = epoch + spec.noise_level * _STAGE_BASE_AMP[stage] * (
                    rng.standard_normal(epoch.shape[0])
                )
            parts.append(epoch)
        channels.append(np.clip(np.concatenate(parts), -1000.0, 1000.0))

    signals = [
        SignalSpec(label=f"EEG ch{i+1}", samples_per_record=fs)
        for i in range(spec.channels)
    ]
    header = EdfHeader(
        patient_id="X synthetic",
        recording_id="Startdate 01.01.00 synthetic",
        num_data_records=int(n_epochs * EPOCH_SECONDS),
        record_duration_s=1.0,
        signals=signals,
    )
    return Recording(header=header, channels=channels), Hypnogram(
        epoch_duration_s=EPOCH_SECONDS, stages=stages
    )


# --- hypnogram text format ----------------------------------------------------


def load_hypnogram(text: str) -> Hypnogram:
    """Parse one stage label per line; '#' comments and blanks are ignored.

    S3 and S4 both map to SWS.  Raises UnknownLabel with the 1-based line
    number of the first offending label.
    """
    stages = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        token = line.strip()
        if not token or token.startswith("#"):
            continue
        stage = _LABEL_TO_STAGE.get(token.upper())
        if stage is None:
            raise UnknownLabel(token, lineno)
        stages.append(stage)
    return Hypnogram(stages=stages)


def format_hypnogram(hyp: Hypnogram) -> str:
    return "".join(stage.label + "\n" for stage in hyp.stages)


def parse_stage(token: str) -> SleepStage:
    stage = _LABEL_TO_STAGE.get(token.strip().upper())
    if stage is None:
        raise UnknownLabel(token, 0)
    return stage
