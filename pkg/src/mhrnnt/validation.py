"""Input checks for variable-length sequence data."""

from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ContractViolation
from .loss import as_transcript
from .model import is_multi_target

Target = Union[Tuple[int, ...], List[Tuple[int, ...]]]


def check_sequences(X, feat_dim: Optional[int] = None) -> List[np.ndarray]:
    """Coerce ``X`` to a list of finite (T_i, d) float64 arrays with T_i >= 1."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    seqs = []
    for i, x in enumerate(X):
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ContractViolation(f"sequence {i} must be 2-D with at least one frame, got {arr.shape}")
        if feat_dim is not None and arr.shape[1] != feat_dim:
            raise ContractViolation(f"sequence {i} has {arr.shape[1]} features, expected {feat_dim}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolation(f"sequence {i} contains non-finite values")
        seqs.append(arr)
    if not seqs:
        raise ContractViolation("no sequences given")
    return seqs


def check_target(y, vocab_size: Optional[int] = None) -> Target:
    """One transcript becomes a tuple; a hypothesis list becomes a list of tuples."""
    if is_multi_target(y):
        hyps = getattr(y, "transcripts", y)
        return [tuple(as_transcript(h, vocab_size).tolist()) for h in hyps]
    return tuple(as_transcript(y, vocab_size).tolist())


def check_targets(y: Sequence, n: int, vocab_size: Optional[int] = None) -> List[Target]:
    if y is None or len(y) != n:
        raise ContractViolation(f"expected {n} targets, got {None if y is None else len(y)}")
    return [check_target(t, vocab_size) for t in y]
