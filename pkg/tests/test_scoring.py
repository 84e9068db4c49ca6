import pytest
from hypothesis import given, strategies as st

from mhrnnt.exceptions import DataFormatError, PairingError
from mhrnnt.scoring import ScoreReport, edit_distance, format_report, read_report, score_set, wer, write_report


def test_identical_is_zero():
    assert edit_distance("a b c".split(), "a b c".split()) == (0, 0, 0)
    assert score_set({"u": "a b c".split()}, {"u": "a b c".split()}).wer == 0.0


def test_hand_case():
    s, i, d = edit_distance("a b c".split(), "a x c d".split())
    assert (s, i, d) == (1, 1, 0)
    assert round(score_set({"u": "a b c".split()}, {"u": "a x c d".split()}).wer, 2) == 66.67


@pytest.mark.parametrize("ref,hyp,expected", [
    ("", "", (0, 0, 0)),
    ("", "a b", (0, 2, 0)),
    ("a b", "", (0, 0, 2)),
    ("a b c d", "b c d", (0, 0, 1)),
    ("a b", "b a", (2, 0, 0)),
    ("k i t t e n", "s i t t i n g", (2, 1, 0)),
])
def test_edit_distance_cases(ref, hyp, expected):
    assert edit_distance(ref.split(), hyp.split()) == expected


@given(st.lists(st.integers(0, 3), max_size=7), st.lists(st.integers(0, 3), max_size=7))
def test_edit_distance_properties(ref, hyp):
    s, i, d = edit_distance(ref, hyp)
    assert len(ref) - d + i == len(hyp)
    assert max(len(ref), len(hyp)) >= s + i + d >= abs(len(ref) - len(hyp))
    assert sum(edit_distance(hyp, ref)) == s + i + d


def test_pooled_wer_is_not_mean_of_utterances():
    refs = {"a": [1], "b": [1, 2, 3, 4]}
    hyps = {"a": [], "b": [1, 2, 3, 4]}
    report = score_set(refs, hyps)
    assert report.wer == pytest.approx(20.0)
    assert report.totals() == (0, 0, 1, 5)


def test_pairing_errors():
    with pytest.raises(PairingError):
        score_set({"a": [1]}, {"a": [1], "b": [2]})
    with pytest.raises(PairingError):
        score_set({"a": [1], "b": [2]}, {"a": [1]})


def test_empty_reference():
    assert wer(0, 0) == 0.0
    assert wer(2, 0) == float("inf")


def test_report_file_round_trip(tmp_path):
    report = score_set({"u1": [1, 2], "u2": [3]}, {"u1": [1], "u2": [3, 3]}, "noisy", "base1", "base")
    report.meta["beam"] = "4"
    path = write_report(report, tmp_path / "r.tsv")
    back = read_report(path)
    assert back.utterances == report.utterances
    assert (back.condition, back.model_id, back.stage, back.meta) == ("noisy", "base1", "base", {"beam": "4"})
    text = format_report(report).splitlines()
    assert text[0] == "# condition=noisy\tmodel=base1\tstage=base"
    assert text[2] == "utt_id\tsub\tins\tdel\tref_len\twer"
    assert text[-1] == "ALL\t0\t1\t1\t3\t66.67"


def test_malformed_report(tmp_path):
    (tmp_path / "r.tsv").write_text("utt_id\tsub\n" "u1\t1\t2\n")
    with pytest.raises(DataFormatError):
        read_report(tmp_path / "r.tsv")
