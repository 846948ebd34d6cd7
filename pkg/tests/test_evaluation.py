import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neutralvoice.adversary import checksum, proxy_classifier_train
from neutralvoice.evaluation import (
    AttackReport,
    NeutralityReport,
    TemplateRecognizer,
    compute_eer,
    compute_wer,
    corpus_wer,
    ignorant_attack,
    neutrality_report,
    rows_from_jsonl,
    semi_informed_attack,
    summary_table,
)
from neutralvoice.signal import (
    FormantMoments,
    SynthCorpusConfig,
    compute_mel,
    estimate_f0,
    extract_formants,
    formant_statistics,
    synth_corpus,
)
from oracles import brute_force_eer, levenshtein


class ConstantClassifier:
    def classify(self, mels):
        return np.full(len(mels), 0.5)


# -- EER -------------------------------------------------------------------


def test_eer_perfect_separation():
    assert compute_eer([(0.9, 1), (0.8, 1), (0.1, 0), (0.2, 0)]) == 0.0


def test_eer_all_equal():
    assert compute_eer([0.3] * 6, [1, 1, 1, 0, 0, 0]) == 50.0


def test_eer_worked_example():
    eer = compute_eer([0.9, 0.6, 0.4, 0.5, 0.2, 0.1], [1, 1, 1, 0, 0, 0])
    assert eer == pytest.approx(100 / 3, abs=0.01)


def test_eer_single_label_rejected():
    with pytest.raises(ValueError):
        compute_eer([0.1, 0.2], [1, 1])


def test_eer_nonfinite_rejected():
    with pytest.raises(ValueError):
        compute_eer([np.nan, 0.2], [1, 0])


def test_eer_matches_brute_force_on_1000_sets():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 101))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        # coarse rounding forces ties, which is where conventions diverge
        scores = np.round(rng.normal(labels * rng.uniform(0, 2), 1.0), int(rng.integers(0, 3)))
        assert compute_eer(scores, labels) == brute_force_eer(scores, labels)


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(-10_000, 10_000), st.integers(0, 1)), min_size=2, max_size=60))
def test_eer_monotone_invariance(trials):
    labels = [l for _, l in trials]
    if len(set(labels)) < 2:
        return
    # a 0.1 grid keeps distinct scores distinct after the float maps below
    scores = np.array([s / 10 for s, _ in trials])
    base = compute_eer(scores, labels)
    assert compute_eer(np.arctan(scores / 100), labels) == pytest.approx(base, abs=1e-9)
    assert compute_eer(3 * scores - 7, labels) == pytest.approx(base, abs=1e-9)


# -- WER -------------------------------------------------------------------


def test_wer_examples():
    assert compute_wer("a b c", "a b c") == 0.0
    assert compute_wer("a b c", "a x c") == pytest.approx(100 / 3)
    assert compute_wer("a b c", "") == 100.0


def test_wer_empty_reference():
    with pytest.raises(ValueError):
        compute_wer("", "a")


words = st.lists(st.sampled_from("abcde"), max_size=12)


@given(words, words)
def test_wer_matches_edit_distance_oracle(ref, hyp):
    if not ref:
        return
    assert compute_wer(ref, hyp) == pytest.approx(100 * levenshtein(ref, hyp) / len(ref))


@given(words.filter(bool))
def test_wer_self_zero(x):
    assert compute_wer(x, x) == 0.0


@given(words.filter(bool), words.filter(bool))
def test_edit_distance_symmetric(a, b):
    assert compute_wer(a, b) * len(a) == pytest.approx(compute_wer(b, a) * len(b))


def test_corpus_wer_pools_words():
    assert corpus_wer(["a b", "c d e f"], ["a b", "c x e"]) == pytest.approx(100 * 2 / 6)


# -- recognizer ------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus():
    utts = synth_corpus(SynthCorpusConfig(n_clips=160, seed=21))
    mels = np.stack([compute_mel(u.clip).values for u in utts])
    return utts, mels, np.array([u.sex for u in utts])


def test_template_recognizer_on_raw_speech(corpus):
    utts, mels, _ = corpus
    rec = TemplateRecognizer(n_tokens=4).fit(mels[:100], [u.tokens for u in utts[:100]])
    hyps = [rec.recognize(m) for m in mels[100:]]
    assert corpus_wer([u.tokens for u in utts[100:]], hyps) <= 15.0


# -- attacks ---------------------------------------------------------------


def test_attack_report_validation():
    with pytest.raises(ValueError):
        AttackReport("informed", 10.0, 4, "x")
    with pytest.raises(ValueError):
        AttackReport("ignorant", 120.0, 4, "x")


@pytest.fixture(scope="module")
def classifier(corpus):
    _, mels, labels = corpus
    return proxy_classifier_train(mels[:100], labels[:100], epochs=6, seed=0).freeze()


def test_ignorant_attack_raw_speech(corpus, classifier):
    _, mels, labels = corpus
    rep = ignorant_attack(classifier, mels[100:], labels[100:])
    assert rep.attack_mode == "ignorant"
    assert rep.n_trials == 60
    assert rep.eer_percent <= 10.0


def test_ignorant_attack_constant_stub(corpus):
    _, mels, labels = corpus
    assert ignorant_attack(ConstantClassifier(), mels, labels).eer_percent == 50.0


def test_semi_informed_on_raw_speech_and_isolation(corpus, classifier):
    _, mels, labels = corpus
    ids = [f"c{i}" for i in range(len(labels))]
    before = checksum(classifier)
    rep = semi_informed_attack(classifier, mels[:100], labels[:100], ids[:100],
                               mels[100:], labels[100:], ids[100:], finetune_epochs=2)
    again = semi_informed_attack(classifier, mels[:100], labels[:100], ids[:100],
                                 mels[100:], labels[100:], ids[100:], finetune_epochs=2)
    assert checksum(classifier) == before
    assert rep.attack_mode == "semi_informed"
    assert rep.eer_percent <= 10.0
    assert rep == again


def test_semi_informed_rejects_overlap(corpus, classifier):
    _, mels, labels = corpus
    with pytest.raises(ValueError):
        semi_informed_attack(classifier, mels[:10], labels[:10], ["a"] * 10, mels[10:20], labels[10:20], ["a"] * 10)


# -- neutrality ------------------------------------------------------------


def test_neutrality_identity_path_equals_raw_statistics(corpus, classifier):
    utts, mels, _ = corpus
    clips = [u.clip for u in utts[:20]]
    neutral = FormantMoments(np.array([600.0, 1300.0, 2500.0]), np.array([100.0, 300.0, 200.0]))
    rep = neutrality_report(clips, 150.0, neutral, classifier)
    pitch_means = [estimate_f0(c).mean_f0() for c in clips]
    stats = formant_statistics([extract_formants(c) for c in clips])
    p = classifier.classify(mels[:20])
    assert rep.mean_f0_hz == pytest.approx(np.mean(pitch_means))
    assert rep.f0_gap_hz == pytest.approx(abs(np.mean(pitch_means) - 150.0))
    np.testing.assert_allclose(rep.formant_mean_gap_hz, np.abs(stats.mean - neutral.mean))
    np.testing.assert_allclose(rep.formant_std_gap_hz, np.abs(stats.std - neutral.std))
    assert rep.mean_abs_p_male_offset == pytest.approx(np.mean(np.abs(p - 0.5)))
    assert rep == neutrality_report(clips, 150.0, neutral, classifier)


def test_neutrality_empty_corpus(classifier):
    with pytest.raises(ValueError):
        neutrality_report([], 150.0, FormantMoments(np.zeros(3), np.zeros(3)), classifier)


def test_neutrality_report_rejects_nonfinite():
    with pytest.raises(ValueError):
        NeutralityReport(np.nan, 150.0, 0.0, (0, 0, 0), (0, 0, 0), 0.1)


# -- reporting -------------------------------------------------------------


def test_jsonl_and_table_round_trip():
    lines = [
        AttackReport("ignorant", 4.0, 10, "x").to_json(condition="raw"),
        AttackReport("ignorant", 48.0, 10, "x").to_json(condition="obfuscated"),
        AttackReport("semi_informed", 30.0, 10, "x").to_json(condition="obfuscated"),
        json.dumps({"record": "wer", "raw": 2.5, "obfuscated": 7.5}),
    ]
    rows = rows_from_jsonl("\n".join(lines))
    assert rows[1] == {"model": "Obfuscated", "ignorant_eer": 48.0, "wer": 7.5, "semi_informed_eer": 30.0}
    table = summary_table(rows)
    assert "Raw speech" in table and "48.00" in table and "--" in table


def test_rows_from_incomplete_report():
    with pytest.raises(ValueError):
        rows_from_jsonl(json.dumps({"record": "wer", "raw": 1, "obfuscated": 2}))
