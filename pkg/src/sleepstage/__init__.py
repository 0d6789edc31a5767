"""Sleep stage classification from EEG.

EDF ingestion, DSP preprocessing, Hilbert-Huang time-frequency imaging,
and a small orthogonally-initialized convolutional network with channel
squeeze-and-excitation, trained with Adam.
"""

__version__ = "0.1.0"

from .edf import (  # noqa: F401
    EdfHeader,
    Hypnogram,
    Recording,
    SignalSpec,
    SleepStage,
    SynthSpec,
    generate_synthetic_recording,
    load_hypnogram,
    parse_edf,
    write_edf,
)
from .kernels import BACKEND  # noqa: F401
