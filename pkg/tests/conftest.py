import numpy as np
import pytest

from sleepstage import pipeline
from sleepstage.edf import SleepStage, SynthSpec, generate_synthetic_recording


@pytest.fixture(scope="session")
def desk_dataset():
    """5 balanced classes x 40 epochs at 128 Hz, seed 42, full preprocess."""
    stages = [s for s in SleepStage for _ in range(40)]
    spec = SynthSpec(stage_sequence=stages, fs=128, seed=42)
    rec, hyp = generate_synthetic_recording(spec)
    ds, _ = pipeline.recording_to_dataset(rec, hyp, pipeline.PreprocessConfig(), seed=42)
    return ds


@pytest.fixture(scope="session")
def small_dataset():
    """3 well-separated classes x 10 epochs; quick to train on."""
    stages = [s for s in (SleepStage.Wake, SleepStage.S2, SleepStage.SWS) for _ in range(10)]
    spec = SynthSpec(stage_sequence=stages, fs=128, seed=5)
    rec, hyp = generate_synthetic_recording(spec)
    pp = pipeline.PreprocessConfig(ae_epochs=30)
    ds, _ = pipeline.recording_to_dataset(rec, hyp, pp, seed=5)
    return ds
