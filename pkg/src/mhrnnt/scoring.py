"""Token error rate scoring and report tables.

The synthetic corpora have no word boundaries, so each label is a "word"
and WER is a token error rate.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .exceptions import DataFormatError, PairingError


def edit_distance(reference: Sequence, hypothesis: Sequence) -> Tuple[int, int, int]:
    """Minimal unit-cost alignment as ``(substitutions, insertions, deletions)``.

    Among equal-cost alignments the backtrace prefers substitution, then
    insertion, then deletion.
    """
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(diag, cost[i, j - 1] + 1, cost[i - 1, j] + 1)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and cost[i, j] == cost[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return int(subs), ins, dels


def wer(errors: int, ref_len: int) -> float:
    if ref_len == 0:
        return 0.0 if errors == 0 else float("inf")
    return 100.0 * errors / ref_len


@dataclass(frozen=True)
class UtteranceScore:
    utt_id: str
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


@dataclass
class ScoreReport:
    utterances: List[UtteranceScore]
    condition: str = ""
    model_id: str = ""
    stage: str = ""
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def errors(self) -> int:
        return sum(u.errors for u in self.utterances)

    @property
    def ref_len(self) -> int:
        return sum(u.ref_len for u in self.utterances)

    @property
    def wer(self) -> float:
        """Pooled WER in percent: total edits over total reference tokens."""
        return wer(self.errors, self.ref_len)

    def totals(self) -> Tuple[int, int, int, int]:
        return (
            sum(u.substitutions for u in self.utterances),
            sum(u.insertions for u in self.utterances),
            sum(u.deletions for u in self.utterances),
            self.ref_len,
        )


def score_set(
    references: Mapping[str, Sequence[int]],
    hypotheses: Mapping[str, Sequence[int]],
    condition: str = "",
    model_id: str = "",
    stage: str = "",
) -> ScoreReport:
    """Score hypotheses against references paired by utterance id.

    Hypothesis values may be label sequences or objects with a
    ``transcript`` attribute.
    """
    missing = sorted(set(hypotheses) - set(references))
    if missing:
        raise PairingError(f"{len(missing)} hypotheses have no reference, e.g. {missing[0]!r}")
    unscored = sorted(set(references) - set(hypotheses))
    if unscored:
        raise PairingError(f"{len(unscored)} references have no hypothesis, e.g. {unscored[0]!r}")
    rows = []
    for uid in sorted(hypotheses):
        hyp = getattr(hypotheses[uid], "transcript", hypotheses[uid])
        ref = references[uid]
        s, i, d = edit_distance(ref, hyp)
        rows.append(UtteranceScore(uid, s, i, d, len(ref)))
    return ScoreReport(rows, condition, model_id, stage)


REPORT_COLUMNS = ("utt_id", "sub", "ins", "del", "ref_len", "wer")


def format_report(report: ScoreReport) -> str:
    """Tab-delimited table; ``#`` header lines carry the metadata."""
    lines = [f"# condition={report.condition}\tmodel={report.model_id}\tstage={report.stage}"]
    for k, v in sorted(report.meta.items()):
        lines.append(f"# {k}={v}")
    lines.append("\t".join(REPORT_COLUMNS))
    for u in report.utterances:
        lines.append(f"{u.utt_id}\t{u.substitutions}\t{u.insertions}\t{u.deletions}\t{u.ref_len}\t{wer(u.errors, u.ref_len):.2f}")
    s, i, d, n = report.totals()
    lines.append(f"ALL\t{s}\t{i}\t{d}\t{n}\t{report.wer:.2f}")
    return "\n".join(lines) + "\n"


def write_report(report: ScoreReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_report(report))
    return path


def read_report(path) -> ScoreReport:
    meta = {}
    rows = []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#"):
                for item in line[1:].strip().split("\t"):
                    key, _, value = item.partition("=")
                    meta[key.strip()] = value
                continue
            fields = line.split("\t")
            if fields[0] in ("utt_id", "ALL") or not line:
                continue
            if len(fields) != len(REPORT_COLUMNS):
                raise DataFormatError(f"malformed report row: {line!r}")
            rows.append(UtteranceScore(fields[0], *map(int, fields[1:5])))
    condition = meta.pop("condition", "")
    model = meta.pop("model", "")
    stage = meta.pop("stage", "")
    return ScoreReport(rows, condition, model, stage, meta)
