"""Transducer negative log-likelihood over the (time x label) lattice.

Lattice convention (blank is index 0):

* ``logits[t, u, k]`` is the log-probability of emitting symbol ``k`` at frame
  ``t`` after ``u`` labels have been emitted.
* blank moves ``(t, u) -> (t + 1, u)``; label ``target[u]`` moves
  ``(t, u) -> (t, u + 1)``.
* a path terminates with a blank emitted from ``(T - 1, L)``.

Every quantity is kept in log space and double precision.
"""

import itertools
import math
from typing import Optional, Sequence, TextIO, Tuple

import numpy as np
from scipy.special import logsumexp

from .exceptions import ContractViolation, LatticeTooLarge, ValidationError

BLANK = 0
NORMALIZATION_TOL = 1e-9
BRUTE_FORCE_LIMIT = 12


def as_transcript(labels, vocab_size: Optional[int] = None) -> np.ndarray:
    """Return ``labels`` as a 1-D int64 array, checking the label range.

    Labels live in ``[1, vocab_size]``; the blank index never appears in a
    transcript.
    """
    arr = np.asarray(labels, dtype=np.int64).reshape(-1)
    if arr.size and arr.min() < 1:
        raise ValidationError(f"transcript contains label < 1: {arr.tolist()}")
    if vocab_size is not None and arr.size and arr.max() > vocab_size:
        raise ValidationError(
            f"transcript contains label > {vocab_size}: {arr.tolist()}"
        )
    return arr


def check_lattice(logits, target, strict: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Validate a (logits, target) pair and return them as arrays.

    Shape problems raise :class:`ContractViolation`. With ``strict`` set,
    rows that are not log-softmax normalized raise :class:`ValidationError`.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3:
        raise ContractViolation(f"logits must be 3-D (T, L+1, V+1), got {logits.shape}")
    T, U, K = logits.shape
    if T < 1 or K < 2:
        raise ContractViolation(f"degenerate lattice shape {logits.shape}")
    target = as_transcript(target, vocab_size=K - 1)
    if U != target.size + 1:
        raise ContractViolation(
            f"lattice has {U} label positions but target length is {target.size}"
        )
    if not np.all(np.isfinite(logits)):
        raise ValidationError("logits contain non-finite values")
    if strict:
        err = np.abs(logsumexp(logits, axis=-1)).max()
        if err > NORMALIZATION_TOL:
            raise ValidationError(f"logits are not log-normalized (max |lse| = {err:.3g})")
    return logits, target


def _blank_and_emit(logits, target):
    blank = logits[:, :, BLANK]
    # emit[t, u] = log P(target[u] | t, u) for u < L
    emit = logits[:, np.arange(target.size), target]
    return blank, emit


def forward_variables(logits, target) -> Tuple[np.ndarray, float]:
    """Forward (alpha) recursion. Returns ``(alpha, log_likelihood)``.

    Within a frame the label recursion is a linear recurrence, solved with a
    cumulative log-add instead of an inner Python loop.
    """
    blank, emit = _blank_and_emit(logits, target)
    T, U = blank.shape
    alpha = np.empty((T, U))
    base = np.full(U, -np.inf)
    base[0] = 0.0
    for t in range(T):
        if t > 0:
            base = alpha[t - 1] + blank[t - 1]
        cum = np.zeros(U)
        np.cumsum(emit[t], out=cum[1:])
        alpha[t] = np.logaddexp.accumulate(base - cum) + cum
    return alpha, float(alpha[T - 1, U - 1] + blank[T - 1, U - 1])


def backward_variables(logits, target) -> Tuple[np.ndarray, float]:
    """Backward (beta) recursion. Returns ``(beta, log_likelihood)``."""
    blank, emit = _blank_and_emit(logits, target)
    T, U = blank.shape
    beta = np.empty((T, U))
    base = np.full(U, -np.inf)
    base[U - 1] = blank[T - 1, U - 1]
    for t in range(T - 1, -1, -1):
        if t < T - 1:
            base = beta[t + 1] + blank[t]
        cum = np.zeros(U)
        np.cumsum(emit[t], out=cum[1:])
        beta[t] = np.logaddexp.accumulate((base + cum)[::-1])[::-1] - cum
    return beta, float(beta[0, 0])


def rnnt_loss(logits, target, strict: bool = False) -> float:
    """Negative log-likelihood of ``target`` summed over all alignments."""
    logits, target = check_lattice(logits, target, strict=strict)
    _, loglik = forward_variables(logits, target)
    return -loglik


def _occupancies(logits, target, alpha, beta, loglik):
    blank, emit = _blank_and_emit(logits, target)
    T, U = blank.shape
    next_beta = np.full((T, U), -np.inf)
    next_beta[:-1] = beta[1:]
    next_beta[T - 1, U - 1] = 0.0
    blank_occ = np.exp(alpha + blank + next_beta - loglik)
    emit_occ = np.exp(alpha[:, :-1] + emit + beta[:, 1:] - loglik)
    return blank_occ, emit_occ


def rnnt_loss_grad(
    logits, target, strict: bool = False, debug: Optional[TextIO] = None
) -> Tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the pre-softmax activations.

    The activations are any tensor whose log-softmax equals ``logits``;
    the gradient is ``p * node_occupancy - transition_occupancy``.
    Pass a text stream as ``debug`` to get a per-node dump of alpha, beta
    and occupancy.
    """
    logits, target = check_lattice(logits, target, strict=strict)
    alpha, loglik = forward_variables(logits, target)
    beta, _ = backward_variables(logits, target)
    blank_occ, emit_occ = _occupancies(logits, target, alpha, beta, loglik)
    node_occ = np.exp(alpha + beta - loglik)

    grad = np.exp(logits) * node_occ[:, :, None]
    grad[:, :, BLANK] -= blank_occ
    if target.size:
        u = np.arange(target.size)
        grad[:, u, target] -= emit_occ
    if debug is not None:
        write_lattice_dump(debug, alpha, beta, node_occ, loglik)
    return -loglik, grad


def write_lattice_dump(stream: TextIO, alpha, beta, occupancy, loglik) -> None:
    stream.write(f"# loglik {loglik!r}\n# t u alpha beta occupancy\n")
    T, U = alpha.shape
    for t in range(T):
        for u in range(U):
            stream.write(
                f"{t} {u} {alpha[t, u]!r} {beta[t, u]!r} {occupancy[t, u]!r}\n"
            )


def _check_pairs(pairs):
    pairs = list(pairs)
    if not pairs:
        raise ContractViolation("multi-hypothesis loss needs at least one hypothesis")
    frames = {np.shape(logits)[0] for logits, _ in pairs}
    if len(frames) != 1:
        raise ValidationError(f"hypotheses disagree on frame count: {sorted(frames)}")
    return pairs


def multi_hypothesis_loss(pairs: Sequence[Tuple[np.ndarray, Sequence[int]]]) -> float:
    """Unweighted sum of per-hypothesis transducer losses for one utterance."""
    return float(sum(rnnt_loss(logits, target) for logits, target in _check_pairs(pairs)))


def multi_hypothesis_loss_grad(pairs):
    """Like :func:`multi_hypothesis_loss`, plus one gradient per pair."""
    total = 0.0
    grads = []
    for logits, target in _check_pairs(pairs):
        loss, grad = rnnt_loss_grad(logits, target)
        total += loss
        grads.append(grad)
    return total, grads


def count_alignments(T: int, L: int) -> int:
    """Number of lattice paths for T frames and L labels."""
    return math.comb(T + L - 1, L)


def iter_alignments(T: int, target: Sequence[int]):
    """Yield every blank-augmented symbol sequence that collapses to ``target``.

    The final symbol is always a blank, so labels are placed among the first
    ``T + L - 1`` slots.
    """
    target = list(target)
    L = len(target)
    for positions in itertools.combinations(range(T + L - 1), L):
        symbols = [BLANK] * (T + L)
        for pos, label in zip(positions, target):
            symbols[pos] = label
        yield tuple(symbols)


def alignment_logprob(logits, alignment) -> float:
    t = u = 0
    total = 0.0
    for sym in alignment:
        total += logits[t, u, sym]
        if sym == BLANK:
            t += 1
        else:
            u += 1
    return total


def brute_force_loss(logits, target, limit: int = BRUTE_FORCE_LIMIT) -> float:
    """Loss by explicit enumeration of every alignment. Verification only."""
    logits = np.asarray(logits, dtype=np.float64)
    target = as_transcript(target)
    if logits.ndim != 3 or logits.shape[1] != target.size + 1:
        raise ContractViolation(f"logits shape {logits.shape} does not fit target")
    T = logits.shape[0]
    if T + target.size > limit:
        raise LatticeTooLarge(f"T + L = {T + target.size} exceeds enumeration limit {limit}")
    scores = [alignment_logprob(logits, a) for a in iter_alignments(T, target)]
    return -float(logsumexp(scores))
