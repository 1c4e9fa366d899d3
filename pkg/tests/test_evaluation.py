"""Inference and evaluation tests: argmax linking, abstention, micro
precision/recall/F1 against a brute-force reference, per-type error
rates, and the noise-detector accuracy curve.
"""

import numpy as np
import pytest

from milink.candidates import DataPoint, Mention
from milink.evaluation import (
    EvalReport,
    Prediction,
    evaluate,
    format_report,
    link,
    link_batch,
    link_by_prominence,
    link_with_abstain,
    nd_accuracy_curve,
    per_type_errors,
    report_records,
)
from milink.kb import load_kb
from milink.model import EntityTypeTable, LinkingModel, ModelConfig, WordVectors


ENTITY_LINES = [
    "e1\talpha beta one\tt_person",
    "e2\talpha beta two\tt_place",
    "e3\tgamma delta\tt_song",
]


@pytest.fixture(scope="module")
def model():
    kb = load_kb(ENTITY_LINES, [])
    rng = np.random.default_rng(5)
    vocab = ["alpha", "beta", "gamma", "delta", "saw", "the"]
    wv = WordVectors(6, {w: rng.normal(0, 0.5, 6) for w in vocab})
    config = ModelConfig(word_dim=6, pos_dim=2, type_dim=4, entity_dim=5, lstm_hidden=4,
                         ffn_g_hidden=6, ffn_f_hidden=6, max_offset=5)
    return LinkingModel(config, wv, EntityTypeTable.from_kb(kb), seed=2, kb=kb)


def _dp(gold="e1", positive=("e1", "e2"), ne_type="PER", sid="s1"):
    mention = Mention(sid, (2, 3), ne_type=ne_type, gold=gold)
    return DataPoint(mention, ("saw", "alpha", "beta", "the"), tuple(positive))


class TestLink:
    def test_singleton_always_chosen(self, model):
        pred = link(model, _dp(positive=("e3",)))
        assert pred.predicted == "e3"
        assert pred.best_score is not None
        assert 0.0 < pred.p_noise < 1.0

    def test_argmax_over_candidates(self, model):
        dp = _dp(positive=("e1", "e2", "e3"))
        pred = link(model, dp)
        from milink.model import forward_batch
        fb = forward_batch(model, [dp])
        best = int(np.argmax(fb.pos_scores.value[:, 0]))
        assert pred.predicted == dp.positive[best]

    def test_empty_positive_abstains(self, model):
        pred = link(model, _dp(positive=()))
        assert pred.predicted is None
        assert pred.p_noise is None

    def test_abstain_above_threshold(self, model):
        dp = _dp(positive=("e1", "e2"))
        p = link(model, dp).p_noise
        assert link_with_abstain(model, dp, tau=p - 1e-9).predicted is None
        assert link_with_abstain(model, dp, tau=p + 1e-9).predicted is not None

    def test_tau_one_never_abstains(self, model):
        points = [_dp(positive=("e1",)), _dp(positive=("e1", "e2", "e3"))]
        with_abstain = link_batch(model, points, tau=1.0)
        plain = link_batch(model, points)
        assert [p.predicted for p in with_abstain] == [p.predicted for p in plain]

    def test_prominence_baseline(self):
        assert link_by_prominence(_dp(positive=("e2", "e1"))).predicted == "e2"
        assert link_by_prominence(_dp(positive=())).predicted is None


class TestEvaluate:
    def _preds(self, spec):
        """spec: list of (gold, predicted, ne_type, positive)."""
        points, preds = [], []
        for i, (gold, predicted, ne_type, positive) in enumerate(spec):
            dp = DataPoint(Mention(f"s{i}", (1, 1), ne_type=ne_type, gold=gold),
                           ("tok",), tuple(positive))
            points.append(dp)
            preds.append(Prediction(dp.mention, predicted))
        return preds, points

    def test_hand_micro_values(self):
        # 4 mentions, 3 emitted, 2 correct: P=2/3, R=1/2, F1=0.5714
        preds, points = self._preds([
            ("a", "a", "PER", ["a"]),
            ("b", "b", "PER", ["b"]),
            ("c", "x", "PER", ["x", "c"]),
            ("d", None, "PER", ["d"]),
        ])
        rep = evaluate(preds, points, "all")
        assert rep.precision == pytest.approx(2 / 3)
        assert rep.recall == pytest.approx(0.5)
        assert rep.f1 == pytest.approx(0.5714, abs=1e-4)

    def test_no_abstention_precision_equals_recall(self):
        preds, points = self._preds([
            ("a", "a", "PER", ["a"]),
            ("b", "z", "PER", ["b"]),
            ("c", "c", "PER", ["c"]),
        ])
        rep = evaluate(preds, points, "all")
        assert rep.precision == rep.recall == rep.f1

    def test_all_correct(self):
        preds, points = self._preds([("a", "a", "PER", ["a"]), ("b", "b", "LOC", ["b"])])
        rep = evaluate(preds, points, "all")
        assert rep.precision == rep.recall == rep.f1 == 1.0

    def test_in_positive_setting_restricts_universe(self):
        preds, points = self._preds([
            ("a", "a", "PER", ["a"]),      # answerable, correct
            ("b", "x", "PER", ["x"]),      # gold not in candidates
            ("c", None, "PER", []),        # empty candidates
        ])
        rep = evaluate(preds, points, "in-e-plus")
        assert rep.n_mentions == 1
        assert rep.recall == 1.0

    def test_empty_candidates_count_in_all_recall_only(self):
        preds, points = self._preds([
            ("a", "a", "PER", ["a"]),
            ("b", None, "PER", []),
        ])
        rep = evaluate(preds, points, "all")
        assert rep.n_mentions == 2
        assert rep.n_emitted == 1
        assert rep.precision == 1.0
        assert rep.recall == 0.5

    def test_zero_cases_define_zero(self):
        preds, points = self._preds([("a", None, "PER", [])])
        rep = evaluate(preds, points, "all")
        assert rep.precision == rep.recall == rep.f1 == 0.0

    def test_missing_gold_rejected(self):
        dp = DataPoint(Mention("s", (1, 1)), ("t",), ("a",))
        with pytest.raises(ValueError, match="gold"):
            evaluate([Prediction(dp.mention, "a")], [dp], "all")

    def test_unknown_setting_rejected(self):
        preds, points = self._preds([("a", "a", "PER", ["a"])])
        with pytest.raises(ValueError, match="setting"):
            evaluate(preds, points, "everything")

    def test_matches_brute_force_reference(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            n = int(rng.integers(1, 100))
            spec = []
            for _i in range(n):
                gold = f"g{rng.integers(0, 10)}"
                pool = [f"g{j}" for j in rng.choice(12, size=rng.integers(0, 5), replace=False)]
                if rng.random() < 0.6 and pool:
                    predicted = pool[rng.integers(0, len(pool))]
                elif rng.random() < 0.5:
                    predicted = gold
                else:
                    predicted = None
                spec.append((gold, predicted, "PER", pool))
            preds, points = self._preds(spec)
            for setting in ("all", "in-e-plus"):
                rep = evaluate(preds, points, setting)
                universe = [(p, d) for p, d in zip(preds, points)
                            if setting == "all" or d.mention.gold in d.positive]
                emitted = [(p, d) for p, d in universe if p.predicted is not None]
                correct = [(p, d) for p, d in emitted if p.predicted == d.mention.gold]
                P = len(correct) / len(emitted) if emitted else 0.0
                R = len(correct) / len(universe) if universe else 0.0
                F = 2 * P * R / (P + R) if P + R else 0.0
                assert rep.precision == pytest.approx(P)
                assert rep.recall == pytest.approx(R)
                assert rep.f1 == pytest.approx(F)
                assert min(P, R) - 1e-12 <= rep.f1 <= max(P, R) + 1e-12


class TestPerTypeErrors:
    def test_single_correct_person(self):
        dp = DataPoint(Mention("s", (1, 1), ne_type="PER", gold="a"), ("t",), ("a",))
        errors = per_type_errors([Prediction(dp.mention, "a")], [dp], "all")
        assert errors == {"PER": 0.0}

    def test_counts_match_manual_tally(self):
        rng = np.random.default_rng(4)
        points, preds = [], []
        for i in range(300):
            ne = ["PER", "ORG", "LOC", "MISC"][rng.integers(0, 4)]
            gold = f"e{rng.integers(0, 6)}"
            predicted = gold if rng.random() < 0.5 else (f"e{rng.integers(0, 6)}"
                                                         if rng.random() < 0.7 else None)
            dp = DataPoint(Mention(f"s{i}", (1, 1), ne_type=ne, gold=gold), ("t",), (gold,))
            points.append(dp)
            preds.append(Prediction(dp.mention, predicted))
        errors = per_type_errors(preds, points, "all")
        for ne in ("PER", "ORG", "LOC", "MISC"):
            subset = [(p, d) for p, d in zip(preds, points) if d.mention.ne_type == ne]
            wrong = sum(1 for p, d in subset if p.predicted != d.mention.gold)
            assert errors[ne] == pytest.approx(wrong / len(subset))

    def test_abstention_counts_as_error(self):
        dp = DataPoint(Mention("s", (1, 1), ne_type="LOC", gold="a"), ("t",), ("a",))
        errors = per_type_errors([Prediction(dp.mention, None)], [dp], "all")
        assert errors == {"LOC": 1.0}


class TestNdAccuracyCurve:
    def test_all_valid_gives_one(self):
        pairs = [(0.2, True), (0.5, True), (0.8, True)]
        curve = nd_accuracy_curve(pairs, [0.3, 0.6, 0.9])
        assert [acc for _, acc in curve] == [1.0, 1.0, 1.0]

    def test_empty_denominator_reported_absent(self):
        pairs = [(0.9, False)]
        curve = nd_accuracy_curve(pairs, [0.5, 0.95])
        assert curve[0][1] is None
        assert curve[1][1] == 0.0

    def test_hand_counted_ratios(self):
        pairs = [(0.1, True), (0.4, False), (0.6, True), (0.95, False)]
        curve = dict(nd_accuracy_curve(pairs, [0.2, 0.5, 0.7, 1.0]))
        assert curve[0.2] == 1.0          # {0.1}
        assert curve[0.5] == 0.5          # {0.1, 0.4}
        assert curve[0.7] == pytest.approx(2 / 3)
        assert curve[1.0] == 0.5

    def test_strict_inequality_at_threshold(self):
        pairs = [(0.5, True)]
        assert nd_accuracy_curve(pairs, [0.5])[0][1] is None


class TestAbstentionMonotonicity:
    def test_emitted_set_shrinks_with_threshold(self, model):
        rng = np.random.default_rng(1)
        points = [_dp(positive=tuple(np.random.default_rng(i).permutation(["e1", "e2", "e3"])),
                      sid=f"s{i}") for i in range(12)]
        taus = [0.2, 0.5, 0.8, 1.0]
        emitted = []
        for tau in taus:
            preds = link_batch(model, points, tau=tau)
            emitted.append({p.mention.point_id for p in preds if p.predicted is not None})
        for small, big in zip(emitted, emitted[1:]):
            assert small <= big

    def test_abstention_never_increases_recall(self, model):
        points = [_dp(positive=("e1", "e2"), sid=f"s{i}") for i in range(8)]
        base = evaluate(link_batch(model, points), points, "all")
        for tau in (0.3, 0.6, 0.9):
            rep = evaluate(link_batch(model, points, tau=tau), points, "all")
            assert rep.recall <= base.recall + 1e-12


class TestReportOutput:
    def test_format_and_records(self):
        rep = EvalReport(setting="all", precision=0.5, recall=0.25, f1=1 / 3,
                         n_mentions=8, n_emitted=4, n_correct=2,
                         per_type_error={"PER": 0.5})
        text = format_report([rep])
        assert "all" in text and "0.5000" in text and "PER" in text
        records = report_records([rep])
        kinds = [r["kind"] for r in records]
        assert kinds == ["metrics", "type_error"]
