"""Model-layer tests: entity embeddings, context encoding, scoring,
attention pooling, the noise head, and checkpoint round trips.

Several tests re-derive the forward computations with plain numpy
arithmetic on the raw parameter arrays, independently of the autodiff
operations used by the module.
"""

import numpy as np
import pytest

from milink import autodiff as ad
from milink.candidates import DataPoint, Mention
from milink.kb import load_kb
from milink.model import (
    EntityTypeTable,
    LinkingModel,
    ModelConfig,
    WordVectors,
    attend_positive,
    embed_entity,
    encode_context,
    forward_batch,
    noise_prob,
    score,
)

ENTITY_LINES = [
    "e_pres\talpha beta north\tperson,leader",
    "e_place\talpha beta south\tplace",
    "e_song\tgamma delta\tsong",
    "e_band\tgamma delta east\tband",
    "e_untyped\tomega psi\t",
]


@pytest.fixture(scope="module")
def kb():
    return load_kb(ENTITY_LINES, ["e_pres\tassoc\te_song"])


def tiny_config(**kw):
    base = dict(word_dim=8, pos_dim=2, type_dim=4, entity_dim=6, lstm_hidden=5,
                ffn_g_hidden=7, ffn_f_hidden=7, max_offset=6)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def model(kb):
    rng = np.random.default_rng(0)
    vocab = ["alpha", "beta", "gamma", "delta", "omega", "psi", "met", "saw", "near", "the"]
    wv = WordVectors(8, {w: rng.normal(0, 0.5, 8) for w in vocab})
    return LinkingModel(tiny_config(), wv, EntityTypeTable.from_kb(kb), seed=3, kb=kb)


class TestWordVectors:
    def test_load_and_oov_zero(self, tmp_path):
        path = tmp_path / "vec.txt"
        path.write_text("hello 1.0 2.0 3.0\nworld -1.0 0.5 0.25\n")
        wv = WordVectors.load(path)
        assert wv.dim == 3
        np.testing.assert_array_equal(wv.lookup(["hello"]), [[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(wv.lookup(["unknown"]), [[0.0, 0.0, 0.0]])

    def test_inconsistent_dimension_rejected(self, tmp_path):
        path = tmp_path / "vec.txt"
        path.write_text("a 1.0 2.0\nb 1.0\n")
        with pytest.raises(ValueError, match="line 2"):
            WordVectors.load(path)

    def test_dim_mismatch_with_config(self, kb):
        wv = WordVectors(4, {"x": np.zeros(4)})
        with pytest.raises(ValueError, match="dimension"):
            LinkingModel(tiny_config(), wv, EntityTypeTable.from_kb(kb))


class TestEntityTypeTable:
    def test_known_types_sorted_rows(self, kb):
        table = EntityTypeTable.from_kb(kb)
        rows = table.rows_for({"person", "leader"})
        assert len(rows) == 2
        assert all(r >= table.RESERVED for r in rows)

    def test_unknown_type_maps_to_unk(self, kb):
        table = EntityTypeTable.from_kb(kb)
        assert table.rows_for({"never_seen"}) == (table.UNK_TYPE,)

    def test_empty_set_maps_to_no_type(self, kb):
        table = EntityTypeTable.from_kb(kb)
        assert table.rows_for(set()) == (table.NO_TYPE,)


class TestEmbedEntity:
    def test_matches_direct_formula(self, model):
        rows = model.type_table.rows_for({"person", "leader"})
        got = embed_entity(model, {"person", "leader"}).value[0]
        mean_t = model.params.type_emb.value[list(rows)].mean(axis=0)
        expected = np.maximum(
            model.params.w_entity.value @ mean_t + model.params.b_entity.value[0], 0.0)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_single_type_is_affine_of_its_vector(self, model):
        row = model.type_table.rows_for({"song"})[0]
        got = embed_entity(model, {"song"}).value[0]
        expected = np.maximum(
            model.params.w_entity.value @ model.params.type_emb.value[row]
            + model.params.b_entity.value[0], 0.0)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_zero_weights_give_zero_vector(self, kb):
        wv = WordVectors(8, {"x": np.zeros(8)})
        m = LinkingModel(tiny_config(), wv, EntityTypeTable.from_kb(kb), seed=0, kb=kb)
        m.params.w_entity.value[:] = 0.0
        m.params.b_entity.value[:] = 0.0
        np.testing.assert_array_equal(embed_entity(m, {"person"}).value, np.zeros((1, 6)))

    def test_output_nonnegative(self, model):
        for types in ({"person"}, {"song", "band"}, set(), {"unknown_type"}):
            assert np.all(embed_entity(model, types).value >= 0.0)


class TestEncodeContext:
    def test_state_dimensions(self, model):
        ctx = encode_context(model, ("met", "alpha", "beta", "near"), (2, 3))
        for part in (ctx.f_pre, ctx.b_pre, ctx.f_post, ctx.b_post):
            assert part.value.shape == (1, 5)

    def test_deterministic(self, model):
        toks = ("met", "alpha", "beta", "near")
        a = encode_context(model, toks, (2, 3)).features().value
        b = encode_context(model, toks, (2, 3)).features().value
        np.testing.assert_array_equal(a, b)

    def test_sequence_sensitive_outside_span(self, model):
        a = encode_context(model, ("met", "saw", "alpha", "beta"), (3, 4)).features().value
        b = encode_context(model, ("saw", "met", "alpha", "beta"), (3, 4)).features().value
        assert not np.allclose(a, b)

    def test_span_at_sentence_start_uses_boundary(self, model):
        ctx = encode_context(model, ("alpha", "beta", "near"), (1, 2))
        np.testing.assert_array_equal(ctx.f_pre.value, model.params.boundary_fwd.value)
        np.testing.assert_array_equal(ctx.b_pre.value, model.params.boundary_bwd.value)

    def test_invalid_span_rejected(self, model):
        with pytest.raises(ValueError, match="span"):
            encode_context(model, ("a", "b"), (2, 1))

    def test_batched_matches_single(self, model, kb):
        """The grouped batch encoder must agree with one-at-a-time encoding."""
        items = [
            (("met", "alpha", "beta", "near"), (2, 3)),
            (("gamma", "delta", "saw", "the", "omega"), (1, 2)),
            (("the", "omega", "psi", "saw", "near"), (2, 3)),
            (("saw", "gamma", "delta"), (2, 3)),
        ]
        from milink.model import _encode_many
        batched = _encode_many(model, items, tape=None).value
        for i, (tokens, span) in enumerate(items):
            single = encode_context(model, tokens, span).features().value
            np.testing.assert_allclose(batched[i], single[0], atol=1e-12)


class TestScore:
    def test_matches_hand_rolled_ffn(self, model):
        ctx = encode_context(model, ("met", "alpha", "beta", "near"), (2, 3))
        evec = embed_entity(model, {"person"})
        got = score(model, evec, ctx).item()
        x = np.concatenate([evec.value[0], ctx.f_pre.value[0], ctx.b_pre.value[0],
                            ctx.f_post.value[0], ctx.b_post.value[0]])
        p = model.params
        hidden = np.maximum(x @ p.ffn_g_w1.value + p.ffn_g_b1.value[0], 0.0)
        expected = float(hidden @ p.ffn_g_w2.value[:, 0] + p.ffn_g_b2.value[0, 0])
        assert got == pytest.approx(expected, abs=1e-12)

    def test_constant_network_outputs_bias(self, kb):
        wv = WordVectors(8, {"x": np.zeros(8)})
        m = LinkingModel(tiny_config(), wv, EntityTypeTable.from_kb(kb), seed=0, kb=kb)
        m.params.ffn_g_w2.value[:] = 0.0
        m.params.ffn_g_b2.value[:] = 0.125
        ctx = encode_context(m, ("x", "x", "x"), (2, 2))
        for types in ({"person"}, {"song"}):
            assert score(m, embed_entity(m, types), ctx).item() == pytest.approx(0.125)

    def test_identical_type_sets_identical_scores(self, model):
        """Scores may depend on an entity only through its types; surface
        names never reach the model."""
        ctx = encode_context(model, ("met", "gamma", "delta", "near"), (2, 3))
        a = score(model, embed_entity(model, {"song"}), ctx).item()
        b = score(model, embed_entity(model, {"song"}), ctx).item()
        assert a == b


class TestAttendPositive:
    def test_singleton_weight_one(self, model):
        ctx = encode_context(model, ("met", "alpha", "beta", "near"), (2, 3))
        pooled, alpha = attend_positive(model, [embed_entity(model, {"person"})], ctx)
        np.testing.assert_allclose(alpha.value, [[1.0]])
        np.testing.assert_allclose(pooled.value, embed_entity(model, {"person"}).value)

    def test_weights_sum_to_one(self, model):
        ctx = encode_context(model, ("met", "alpha", "beta", "near"), (2, 3))
        vecs = [embed_entity(model, t) for t in ({"person"}, {"song"}, {"place", "band"})]
        pooled, alpha = attend_positive(model, vecs, ctx)
        assert np.all(alpha.value > 0)
        assert alpha.value.sum() == pytest.approx(1.0, abs=1e-6)
        manual = sum(a * v.value[0] for a, v in zip(alpha.value[:, 0], vecs))
        np.testing.assert_allclose(pooled.value[0], manual, atol=1e-12)

    def test_hand_softmax_value(self, model):
        # two candidates whose scores are forced to 1 and 0
        scores = np.array([[1.0], [0.0]])
        alpha = ad.segment_softmax(scores, np.array([0, 2]), 1.0 / 3.0).value
        np.testing.assert_allclose(alpha[:, 0], [0.9526, 0.0474], atol=1e-3)

    def test_empty_set_rejected(self, model):
        ctx = encode_context(model, ("met", "alpha", "beta", "near"), (2, 3))
        with pytest.raises(ValueError, match="empty"):
            attend_positive(model, [], ctx)


class TestNoiseProb:
    def test_zero_logit_gives_half(self, kb, model):
        m = LinkingModel(tiny_config(), model.word_vectors, model.type_table, seed=0, kb=kb)
        m.params.ffn_f_w2.value[:] = 0.0
        m.params.ffn_f_b2.value[:] = 0.0
        ctx = encode_context(m, ("met", "alpha", "beta", "near"), (2, 3))
        assert noise_prob(m, embed_entity(m, {"person"}), ctx).item() == pytest.approx(0.5)

    def test_temperature_scaled_logit(self, kb, model):
        m = LinkingModel(tiny_config(), model.word_vectors, model.type_table, seed=0, kb=kb)
        m.params.ffn_f_w2.value[:] = 0.0
        m.params.ffn_f_b2.value[:] = 0.5
        ctx = encode_context(m, ("met", "alpha", "beta", "near"), (2, 3))
        got = noise_prob(m, embed_entity(m, {"person"}), ctx, temperature=1.0 / 3.0).item()
        assert got == pytest.approx(0.8176, abs=1e-3)

    def test_open_interval(self, model):
        ctx = encode_context(model, ("met", "alpha", "beta", "near"), (2, 3))
        p = noise_prob(model, embed_entity(model, {"person"}), ctx).item()
        assert 0.0 < p < 1.0


class TestForwardBatch:
    def _points(self):
        toks1 = ("met", "alpha", "beta", "near", "gamma", "delta")
        toks2 = ("gamma", "delta", "saw", "omega", "psi")
        return [
            DataPoint(Mention("s1", (2, 3), "PER", "e_pres"), toks1,
                      ("e_pres", "e_place"), ("e_song", "e_untyped")),
            DataPoint(Mention("s2", (1, 2), "ORG", "e_song"), toks2,
                      ("e_song", "e_band", "e_untyped"), ("e_pres",)),
        ]

    def test_scores_match_per_point_ops(self, model):
        points = self._points()
        fb = forward_batch(model, points, with_negatives=True, with_noise=True)
        at = 0
        for dp in points:
            ctx = encode_context(model, dp.tokens, dp.mention.span)
            for eid in dp.positive:
                types = {t for t in model.type_table.type_names
                         if t in _entity_types(model, eid)}
                expected = score(model, embed_entity(model, _entity_types(model, eid)), ctx).item()
                assert fb.pos_scores.value[at, 0] == pytest.approx(expected, abs=1e-10)
                at += 1

    def test_noise_path_matches_per_point_ops(self, model):
        points = self._points()
        fb = forward_batch(model, points, with_noise=True)
        for i, dp in enumerate(points):
            ctx = encode_context(model, dp.tokens, dp.mention.span)
            vecs = [embed_entity(model, _entity_types(model, e)) for e in dp.positive]
            pooled, _alpha = attend_positive(model, vecs, ctx)
            expected = noise_prob(model, pooled, ctx).item()
            assert fb.p_noise.value[i, 0] == pytest.approx(expected, abs=1e-10)

    def test_empty_positive_rejected(self, model):
        dp = DataPoint(Mention("s", (1, 1)), ("met",), (), ())
        with pytest.raises(ValueError, match="empty positive"):
            forward_batch(model, [dp])


def _entity_types(model, entity_id):
    rows = model.entity_type_rows(entity_id)
    names = {}
    for name in model.type_table.type_names:
        names[model.type_table.rows_for({name})[0]] = name
    return {names[r] for r in rows if r in names}


class TestPersistence:
    def test_save_load_roundtrip(self, tmp_path, model, kb):
        model.save(tmp_path / "m")
        loaded = LinkingModel.load(tmp_path / "m", kb=kb)
        toks = ("met", "alpha", "beta", "near")
        a = encode_context(model, toks, (2, 3)).features().value
        b = encode_context(loaded, toks, (2, 3)).features().value
        np.testing.assert_array_equal(a, b)
        ea = embed_entity(model, {"person"}).value
        eb = embed_entity(loaded, {"person"}).value
        np.testing.assert_array_equal(ea, eb)

    def test_load_rejects_corrupted_shapes(self, tmp_path, model, kb):
        model.save(tmp_path / "m")
        ck = tmp_path / "m" / "checkpoint.bin"
        tensors = ad.load_checkpoint(ck)
        tensors["pos_emb"] = tensors["pos_emb"][:3]
        ad.save_checkpoint(ck, tensors)
        with pytest.raises(ValueError, match="pos_emb"):
            LinkingModel.load(tmp_path / "m", kb=kb)


class TestGradients:
    def test_score_and_noise_prob_gradients(self, model):
        """End-to-end gradients of the scoring and noise heads against
        finite differences."""
        dp_tokens = ("met", "alpha", "beta", "near")

        def builder(tape):
            ctx = encode_context(model, dp_tokens, (2, 3), tape)
            evec = embed_entity(model, {"person", "leader"}, tape)
            s = score(model, evec, ctx, tape)
            pooled, _ = attend_positive(
                model, [evec, embed_entity(model, {"song"}, tape)], ctx, tape=tape)
            p = noise_prob(model, pooled, ctx, tape=tape)
            return ad.sum_all(ad.concat_cols([s, p]))

        report = ad.gradient_check(builder, model.params.trainables(),
                                   max_coords_per_param=12, seed=0)
        assert report.max_rel_error < 1e-4
