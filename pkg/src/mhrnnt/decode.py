"""Greedy and beam-search decoding for :class:`~mhrnnt.model.TransducerModel`.

Both decoders are frame synchronous and cap the number of labels emitted
within one frame (``max_symbols_per_frame``); once the cap is reached the
only continuation is blank.
"""

import heapq
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .exceptions import DataFormatError, ValidationError
from .loss import BLANK, rnnt_loss
from .model import SOS, forward_lattice

DEFAULT_BEAM = 20
MAX_SYMBOLS_PER_FRAME = 4


@dataclass(frozen=True)
class ScoredHypothesis:
    transcript: Tuple[int, ...]
    score: float
    producer_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "transcript", tuple(int(x) for x in self.transcript))
        if any(x < 1 for x in self.transcript):
            raise ValidationError(f"hypothesis contains blank or negative label: {self.transcript}")
        if self.score > 0:
            raise ValidationError(f"log-probability score must be <= 0, got {self.score}")


def greedy_decode(model, features, max_symbols_per_frame=MAX_SYMBOLS_PER_FRAME, producer_id=""):
    """Follow the argmax symbol at every lattice node."""
    enc = model.encode(features)
    g = model.predict_step(SOS, model.initial_pred_state())
    labels: List[int] = []
    score = 0.0
    for t in range(enc.shape[0]):
        emitted = 0
        while True:
            lp = model.joint_logprobs(enc[t], g[None, :])[0]
            k = int(np.argmax(lp))
            if k == BLANK or emitted >= max_symbols_per_frame:
                score += lp[BLANK]
                break
            score += lp[k]
            labels.append(k)
            g = model.predict_step(k, g)
            emitted += 1
    return ScoredHypothesis(tuple(labels), min(float(score), 0.0), producer_id)


def sequence_score(model, features, transcript) -> float:
    """Exact log-probability of ``transcript`` summed over all alignments."""
    return -rnnt_loss(forward_lattice(model, features, transcript), transcript)


def beam_decode(
    model,
    features,
    beam_size: int = DEFAULT_BEAM,
    n_best: int = 1,
    max_symbols_per_frame: int = MAX_SYMBOLS_PER_FRAME,
    max_length: Optional[int] = None,
    rescore: bool = True,
    producer_id: str = "",
) -> List[ScoredHypothesis]:
    """Breadth-synchronous beam search with prefix merging.

    Within each frame, hypotheses are expanded in rounds: every active
    prefix either ends the frame with a blank or emits one more label, so
    all paths into a prefix arrive before it is expanded and are merged by
    log-add. Finished prefixes keep the best ``beam_size``; a still-emitting
    prefix survives only while it could still beat the worst kept finished
    one. With ``rescore`` the final candidates are re-scored by the exact
    transducer likelihood before ranking. ``beam_size == 1`` is greedy search.
    """
    if beam_size < 1:
        raise ValidationError(f"beam_size must be >= 1, got {beam_size}")
    if not 1 <= n_best <= beam_size:
        raise ValidationError(f"n_best must lie in [1, beam_size], got {n_best}")
    if beam_size == 1:
        hyp = greedy_decode(model, features, max_symbols_per_frame, producer_id)
        if rescore:
            hyp = ScoredHypothesis(hyp.transcript, min(sequence_score(model, features, hyp.transcript), 0.0), producer_id)
        return [hyp]
    enc = model.encode(features)
    pred_cache: Dict[Tuple[int, ...], np.ndarray] = {
        (): model.predict_step(SOS, model.initial_pred_state())
    }
    hyps: Dict[Tuple[int, ...], float] = {(): 0.0}
    for t in range(enc.shape[0]):
        active = hyps
        done: Dict[Tuple[int, ...], float] = {}
        for rnd in range(max_symbols_per_frame + 1):
            if not active:
                break
            prefixes = list(active)
            for p in prefixes:
                if p not in pred_cache:
                    pred_cache[p] = model.predict_step(p[-1], pred_cache[p[:-1]])
            lp = model.joint_logprobs(enc[t], np.stack([pred_cache[p] for p in prefixes]))
            grown: Dict[Tuple[int, ...], float] = {}
            can_emit = rnd < max_symbols_per_frame
            for i, p in enumerate(prefixes):
                s = active[p]
                done[p] = np.logaddexp(done.get(p, -math.inf), s + lp[i, BLANK])
                if not can_emit or (max_length is not None and len(p) >= max_length):
                    continue
                # only the best beam_size labels of a prefix can survive pruning
                for k in np.argsort(-lp[i, 1:], kind="stable")[:beam_size] + 1:
                    q = p + (int(k),)
                    grown[q] = np.logaddexp(grown.get(q, -math.inf), s + lp[i, k])
            done = _top(done, beam_size)
            floor = min(done.values()) if len(done) >= beam_size else -math.inf
            active = {q: sc for q, sc in _top(grown, beam_size).items() if sc > floor}
        hyps = done

    candidates = [(p, float(sc)) for p, sc in hyps.items()]
    if rescore:
        candidates = [(p, sequence_score(model, features, p)) for p, _ in candidates]
    candidates.sort(key=lambda c: (-c[1], c[0]))
    return [ScoredHypothesis(p, min(sc, 0.0), producer_id) for p, sc in candidates[:n_best]]


def _top(scores: Dict[Tuple[int, ...], float], n: int) -> Dict[Tuple[int, ...], float]:
    if len(scores) <= n:
        return scores
    best = heapq.nsmallest(n, scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return dict(best)


def decode(model, features, beam_size=DEFAULT_BEAM, producer_id="") -> ScoredHypothesis:
    """1-best hypothesis."""
    return beam_decode(model, features, beam_size=beam_size, producer_id=producer_id)[0]


# -- hypothesis files --------------------------------------------------------

HYP_HEADER = "#utt_id\tproducer_id\tscore\tlabels"


def write_hypotheses(path, hypotheses: Mapping[str, ScoredHypothesis]) -> Path:
    """One tab-separated record per utterance, sorted by utterance id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(HYP_HEADER + "\n")
        for uid in sorted(hypotheses):
            h = hypotheses[uid]
            f.write(f"{uid}\t{h.producer_id}\t{h.score!r}\t{' '.join(map(str, h.transcript))}\n")
    return path


def read_hypotheses(path) -> Dict[str, ScoredHypothesis]:
    out: Dict[str, ScoredHypothesis] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
            uid, producer, score, labels = fields
            out[uid] = ScoredHypothesis(tuple(int(x) for x in labels.split()), float(score), producer)
    return out
