"""Transducer loss, a toy transducer and multi-hypothesis pseudo-label training."""

from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import Condition, CorpusSpec, Dataset, generate, generate_with_labels
from .decode import ScoredHypothesis, beam_decode, greedy_decode
from .estimator import TransducerASR
from .exceptions import (
    ContractViolation,
    DataFormatError,
    DivergenceError,
    MHRNNTError,
    PairingError,
    ValidationError,
)
from .loss import brute_force_loss, multi_hypothesis_loss, rnnt_loss, rnnt_loss_grad
from .model import ModelConfig, TransducerModel, init_model
from .scoring import edit_distance, score_set

__version__ = "0.1.0"
