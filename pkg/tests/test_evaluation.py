import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlchain.data import Dataset, LabeledExample
from xlchain.errors import CompatibilityError, InputError
from xlchain.evaluation import (
    ConfusionMatrix,
    ZeroShotError,
    confusion,
    evaluate,
    majority_macro_f1,
    metrics,
    metrics_report,
    zero_shot,
)
from xlchain.model import ModelConfig, init_model, predict
from xlchain.tokenizer import encode, train_bpe

from oracles import brute_metrics, tally

labels = st.lists(st.integers(0, 1), min_size=1, max_size=60)


class TestConfusion:
    def test_identical(self):
        assert confusion([1, 0], [1, 0]) == ConfusionMatrix(tp=1, fp=0, fn=0, tn=1)

    def test_all_zero_predictions(self):
        assert confusion([0, 0, 0], [1, 1, 0]) == ConfusionMatrix(tp=0, fp=0, fn=2, tn=1)

    def test_matches_tally_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            p, g = rng.integers(0, 2, n).tolist(), rng.integers(0, 2, n).tolist()
            cm = confusion(p, g)
            assert {"tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn} == tally(p, g)

    @pytest.mark.parametrize("p, g", [([1], [1, 0]), ([], []), ([2], [1])])
    def test_bad_input(self, p, g):
        with pytest.raises(InputError):
            confusion(p, g)


class TestMetrics:
    def test_hand_case(self):
        m = metrics(ConfusionMatrix(tp=2, fp=1, fn=1, tn=6))
        assert m.accuracy == 0.8
        assert m.precision_pos == pytest.approx(2 / 3, abs=1e-15)
        assert m.recall_pos == pytest.approx(2 / 3, abs=1e-15)
        assert m.f1_pos == pytest.approx(2 / 3, abs=1e-15)
        # NOT class: 6 / 7 both ways
        assert m.f1_neg == pytest.approx(6 / 7, abs=1e-15)

    def test_perfect(self):
        m = metrics(confusion([1, 0, 1], [1, 0, 1]))
        assert all(v == 1.0 for v in m.rounded(10).values())

    def test_zero_division(self):
        m = metrics(confusion([0, 0, 0, 0], [1, 0, 0, 0]))
        assert (m.precision_pos, m.recall_pos, m.f1_pos) == (0.0, 0.0, 0.0)
        assert m.macro_f1 == pytest.approx((0 + 2 * 0.75 / 1.75) / 2)

    def test_empty_matrix(self):
        with pytest.raises(InputError):
            metrics(ConfusionMatrix(0, 0, 0, 0))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            p, g = rng.integers(0, 2, n).tolist(), rng.integers(0, 2, n).tolist()
            m, ref = metrics(confusion(p, g)), brute_metrics(p, g)
            assert (m.precision_pos, m.recall_pos, m.f1_pos) == ref["pos"]
            assert (m.precision_neg, m.recall_neg, m.f1_neg) == ref["neg"]
            assert m.accuracy == ref["accuracy"] and m.macro_f1 == ref["macro_f1"]

    @settings(max_examples=200)
    @given(st.data())
    def test_label_swap_duality(self, data):
        g = data.draw(labels)
        p = data.draw(st.lists(st.integers(0, 1), min_size=len(g), max_size=len(g)))
        cm = confusion(p, g)
        a, b = metrics(cm), metrics(cm.swapped())
        assert (a.precision_pos, a.recall_pos, a.f1_pos) == (b.precision_neg, b.recall_neg, b.f1_neg)
        assert (a.precision_neg, a.recall_neg, a.f1_neg) == (b.precision_pos, b.recall_pos, b.f1_pos)
        assert a.accuracy == b.accuracy and a.macro_f1 == pytest.approx(b.macro_f1, abs=1e-15)
        assert cm.swapped() == confusion([1 - x for x in p], [1 - x for x in g])

    @settings(max_examples=200)
    @given(st.data())
    def test_permutation_invariant_and_bounded(self, data):
        g = data.draw(labels)
        p = data.draw(st.lists(st.integers(0, 1), min_size=len(g), max_size=len(g)))
        order = data.draw(st.permutations(range(len(g))))
        cm = confusion(p, g)
        assert metrics(cm) == metrics(confusion([p[i] for i in order], [g[i] for i in order]))
        m = metrics(cm)
        assert cm.total == len(g)
        assert m.accuracy == (cm.tp + cm.tn) / cm.total
        assert all(0.0 <= v <= 1.0 for v in m.rounded(17).values())

    def test_majority_baseline(self):
        # always-NOT at 25% positives: f1_neg = 2*0.75/1.75, f1_pos = 0
        assert majority_macro_f1(0.25) == pytest.approx(3 / 7)
        golds = [1] * 25 + [0] * 75
        assert metrics(confusion([0] * 100, golds)).macro_f1 == pytest.approx(majority_macro_f1(0.25))

    def test_report_schema(self):
        report = metrics_report(metrics(ConfusionMatrix(2, 1, 1, 6)), "en", "val")
        assert list(report) == ["language", "partition", "n", "confusion", "accuracy", "pos", "neg", "macro_f1"]
        assert report["pos"] == {"p": 0.667, "r": 0.667, "f1": 0.667}
        assert report["n"] == 10


@pytest.fixture(scope="module")
def small_model():
    texts = ["ab cd ef", "cd ab gh", "ef gh ab ab", "gh cd", "ab", "ef ef cd"]
    vocab = train_bpe(texts, 30)
    cfg = ModelConfig(vocab_size=vocab.size, max_positions=16, d_model=8, n_heads=2, n_layers=1, d_ff=8)
    data = Dataset("aa", "val", [LabeledExample(str(i), t, i % 2, "aa") for i, t in enumerate(texts)])
    return init_model(cfg, 0), vocab, data


class TestEvaluate:
    def test_matches_composition(self, small_model):
        params, vocab, data = small_model
        preds = predict(params, [encode(vocab, t, 50, pad=False) for t in data.texts])
        assert evaluate(params, vocab, data) == metrics(confusion(preds, data.labels))

    def test_idempotent_and_pure(self, small_model):
        params, vocab, data = small_model
        before = {n: t.data.copy() for n, t in params.items()}
        assert evaluate(params, vocab, data) == evaluate(params, vocab, data)
        for n, t in params.items():
            np.testing.assert_array_equal(before[n], t.data)

    def test_single_correct_example(self, small_model):
        params, vocab, data = small_model
        pred = predict(params, [encode(vocab, "ab", 50)])[0]
        one = Dataset("aa", "val", [LabeledExample("x", "ab", int(pred), "aa")])
        assert evaluate(params, vocab, one).accuracy == 1.0

    def test_unlabeled_rejected(self, small_model):
        params, vocab, _ = small_model
        with pytest.raises(InputError):
            evaluate(params, vocab, Dataset("aa", "test", [LabeledExample("x", "ab", None, "aa")]))

    def test_vocab_mismatch(self, small_model):
        params, _, data = small_model
        with pytest.raises(CompatibilityError):
            evaluate(params, train_bpe(["something else entirely here"], 40), data)

    def test_zero_shot_guard(self, small_model):
        params, vocab, data = small_model
        with pytest.raises(ZeroShotError, match="aa"):
            zero_shot(params, vocab, data, ["bb", "aa"])
        assert zero_shot(params, vocab, data, ["bb"]) == evaluate(params, vocab, data)


def test_zero_shot_on_held_out_synthetic_language():
    from xlchain.data import gen_synthetic
    from xlchain.training import TrainConfig, finetune_chain, pretrain

    datasets = gen_synthetic(3, 2000, 1.0, seed=0)
    texts = [t for d in datasets for t in d.texts]
    vocab = train_bpe(texts, 1000)
    params = init_model(ModelConfig(vocab_size=vocab.size, d_model=16, n_heads=2, n_layers=1, d_ff=32), 0)
    pretrain(params, texts, vocab, TrainConfig())
    finetune_chain(params, datasets[:2], vocab, TrainConfig(learning_rate=1e-3))
    m = zero_shot(params, vocab, datasets[2], ["syn0", "syn1"])
    assert m.macro_f1 > 0.55 > majority_macro_f1(0.25)
