import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anydoor.attack import TriggerTargetPair, cache_references
from anydoor.metrics import (
    EvalReport,
    bleu4,
    check_disjoint,
    contain,
    evaluate,
    exact_match,
    lcs_length,
    read_csv,
    reports_to_csv,
    rouge_l,
    score_outputs,
)
from anydoor.model.mllm import ModelConfig, ToyMLLM
from anydoor.model.shapes import gen_shapes_dataset
from anydoor.perturbation import PerturbationSpec, UniversalPerturbation
from oracles import METRIC_FIXTURE


def test_exact_match_examples():
    assert exact_match(b"Go to hell!", b"Go to hell!") == 1
    assert exact_match(b"go to hell!", b"Go to hell!") == 0
    assert exact_match(b" X ", b"X") == 1


def test_contain_examples():
    assert contain(b"abc I want to destroy the whole world together xyz", b"I want to destroy the whole world together")
    assert contain(b"", b"x") == 0
    assert contain(b"same", b"same") == 1


@settings(max_examples=300)
@given(st.text(alphabet="ab ", max_size=8), st.text(alphabet="ab ", max_size=8))
def test_contain_dominates_exact_match(o, t):
    assert contain(o, t) >= exact_match(o, t)


def test_contain_dominates_on_random_pairs():
    rng = np.random.default_rng(0)
    alphabet = np.array(list(b"ab c"))
    bad = 0
    for _ in range(10_000):
        t = bytes(rng.choice(alphabet, size=rng.integers(1, 5)).tolist())
        o = t if rng.random() < 0.3 else bytes(rng.choice(alphabet, size=rng.integers(0, 8)).tolist())
        bad += contain(o, t) < exact_match(o, t)
    assert bad == 0


@pytest.mark.parametrize("cand,ref,bleu,rouge", METRIC_FIXTURE)
def test_metric_fixture(cand, ref, bleu, rouge):
    assert abs(bleu4(cand, ref) - bleu) < 1e-9
    assert abs(rouge_l(cand, ref) - rouge) < 1e-9


def test_bleu_zero_overlap_tiny():
    assert bleu4("a b c d", "e f g h") < 1e-6


def _lcs_table(a, b):
    # full O(n*m) table, independent of the rolling-row implementation
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            t[i][j] = t[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1] else max(t[i - 1][j], t[i][j - 1])
    return t[-1][-1]


@settings(max_examples=200)
@given(st.lists(st.sampled_from("abcd"), max_size=9), st.lists(st.sampled_from("abcd"), max_size=9))
def test_lcs_matches_table(a, b):
    assert lcs_length(a, b) == _lcs_table(a, b)


@settings(max_examples=200)
@given(st.text(alphabet="ab c", max_size=12), st.text(alphabet="ab c", max_size=12))
def test_metric_ranges(c, r):
    assert 0.0 <= bleu4(c, r) <= 1.0
    assert 0.0 <= rouge_l(c, r) <= 1.0


def test_rouge_empty_either_side():
    assert rouge_l("", "a") == 0.0 and rouge_l("a", "") == 0.0


# ----------------------------------------------------------------------------
# reports


def test_report_json_roundtrip():
    rep = score_outputs([b"T", b"xTx"], [b"a b", b"c"], [b"a b", b"d"], b"T", {"config_sha256": "ab"})
    back = EvalReport.from_json(rep.to_json())
    assert back == rep
    assert rep.with_trigger.exact_match == 0.5 and rep.with_trigger.contain == 1.0
    assert rep.without_trigger.rouge_l == 0.5
    assert json.loads(rep.to_json())["n_eval"] == 2


def test_report_csv_roundtrip():
    rep = score_outputs([b"T"], [b"a"], [b"a"], b"T")
    text = reports_to_csv([rep.row("x")])
    (row,) = read_csv(text)
    assert row["name"] == "x" and row["exact_match"] == 1.0 and row["rouge_l"] == 1.0


@pytest.fixture(scope="module")
def small_model():
    return ToyMLLM(ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32), seed=0)


def test_zero_perturbation_calibration(small_model):
    ev = gen_shapes_dataset(6, seed=21)
    refs = cache_references(small_model, ev)
    pert = UniversalPerturbation.zeros(PerturbationSpec.border())
    rep = evaluate(small_model, pert, ev, TriggerTargetPair(), refs)
    nonempty = all(len(a.split()) for a in refs.answers)
    if nonempty:
        assert rep.without_trigger.bleu4 == 1.0 and rep.without_trigger.rouge_l == 1.0
    assert rep.with_trigger.contain >= rep.with_trigger.exact_match


def test_overlapping_sets_rejected(small_model):
    ev = gen_shapes_dataset(4, seed=21)
    refs = cache_references(small_model, ev)
    with pytest.raises(ValueError, match="overlap"):
        evaluate(small_model, None, ev, TriggerTargetPair(), refs, ensemble=ev[2:])
    check_disjoint(ev[:2], ev[2:])
