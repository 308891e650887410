"""Predictive-coding next-frame models of mel spectrograms and their error analyses."""

from .analysis import analyze, context_effect, error_by_timelapse, interval_regression, musicality_regression
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dsp import AudioClip, DspConfig, FrameSequence, MelSpectrogram, extract_frames, load_audio, mel_spectrogram
from .errors import (
    AudioFormatError,
    CheckpointError,
    DataError,
    DegenerateRegressionError,
    DivergenceError,
    PredNetMusicError,
    ShapeMismatchError,
    UsageError,
)
from .model import ModelConfig, PredNetModel, forward_sequence
from .stats import ols_regress, t_cdf
from .stimuli import PitchSequence, StimulusSet, generate_set, synthesize
from .training import TrainConfig, train

__version__ = "0.1.0"
