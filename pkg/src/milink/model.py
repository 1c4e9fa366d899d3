"""Neural linking model: type-based entity embeddings, a BiLSTM context
encoder with position features, a feed-forward candidate scorer, attention
pooling over the positive candidate set, and a noise-probability head.

Entity surface names never enter any model input; candidates are
represented purely through their knowledge-base types, so the scorer
cannot exploit how many words a candidate shares with the mention.

All forward paths run through one batched implementation.  The public
per-mention operations are thin single-row wrappers around it, so tests of
the small operations also exercise the code the trainer uses.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor

__all__ = [
    "ModelConfig",
    "WordVectors",
    "EntityTypeTable",
    "ModelParams",
    "LinkingModel",
    "EncodedContext",
    "BatchForward",
    "embed_entity",
    "encode_context",
    "score",
    "attend_positive",
    "noise_prob",
    "forward_batch",
]

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    """Model and optimization hyperparameters (defaults are the full-scale
    settings; shrink the dimensions for quick experiments)."""
    word_dim: int = 300
    pos_dim: int = 5
    type_dim: int = 50
    entity_dim: int = 100
    lstm_hidden: int = 100
    ffn_g_hidden: int = 300
    ffn_f_hidden: int = 300
    margin: float = 0.1
    temperature: float = 1.0 / 3.0
    eta: float = 5.0
    prior_noise: float = 0.9
    tau: float = 0.75
    lr: float = 0.001
    batch_size: int = 50
    epochs: int = 20
    max_offset: int = 40
    patience: int = 3

    def __post_init__(self):
        for name in ("word_dim", "pos_dim", "type_dim", "entity_dim", "lstm_hidden",
                     "ffn_g_hidden", "ffn_f_hidden", "batch_size", "epochs", "max_offset"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if not (0.0 < self.prior_noise < 1.0):
            raise ValueError("prior_noise must lie in (0, 1)")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must lie in (0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


class WordVectors:
    """Frozen word-embedding table read from a whitespace-delimited text
    file (one token followed by its vector per line).  Unknown tokens map
    to the zero vector."""

    def __init__(self, dim: int, table: dict[str, np.ndarray]):
        self.dim = dim
        self.table = table
        self._zero = np.zeros(dim)

    @classmethod
    def load(cls, path) -> "WordVectors":
        table: dict[str, np.ndarray] = {}
        dim = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split()
                if not parts:
                    continue
                word, values = parts[0], parts[1:]
                if dim is None:
                    dim = len(values)
                    if dim == 0:
                        raise ValueError(f"{path}: line {lineno}: no vector values")
                elif len(values) != dim:
                    raise ValueError(
                        f"{path}: line {lineno}: expected {dim} values, got {len(values)}")
                if word in table:
                    log.warning("%s: duplicate vector for '%s' ignored", path, word)
                    continue
                table[word] = np.array([float(v) for v in values])
        if dim is None:
            raise ValueError(f"{path}: empty vector file")
        return cls(dim, table)

    def lookup(self, tokens) -> np.ndarray:
        return np.stack([self.table.get(t, self._zero) for t in tokens]) if tokens \
            else np.zeros((0, self.dim))


class EntityTypeTable:
    """Maps knowledge-base type names to rows of the type-embedding matrix.

    Row 0 embeds entities that declare no types at all; row 1 stands in for
    type names unseen when the table was built.
    """

    NO_TYPE = 0
    UNK_TYPE = 1
    RESERVED = 2

    def __init__(self, type_names):
        self.type_names = sorted(set(type_names))
        self._rows = {name: i + self.RESERVED for i, name in enumerate(self.type_names)}

    @classmethod
    def from_kb(cls, kb) -> "EntityTypeTable":
        names: set[str] = set()
        for e in kb.entities:
            names.update(e.types)
        return cls(names)

    @property
    def n_rows(self) -> int:
        return len(self.type_names) + self.RESERVED

    def rows_for(self, types) -> tuple[int, ...]:
        """Type-embedding rows for a type set; sorted for determinism."""
        if not types:
            return (self.NO_TYPE,)
        return tuple(self._rows.get(t, self.UNK_TYPE) for t in sorted(set(types)))


class ModelParams:
    """Every learnable tensor.

    Weight matrices use fan-scaled uniform initialization, embedding tables
    use dimension-scaled uniform rows, and biases start at zero, so the
    initial signal scale is healthy for both full-size and miniature
    configurations.
    """

    def __init__(self, config: ModelConfig, n_type_rows: int, rng: np.random.Generator):
        c = config
        d_in = c.word_dim + c.pos_dim
        h = c.lstm_hidden
        feat = 4 * h

        def mat(name, n_in, n_out):
            limit = np.sqrt(6.0 / (n_in + n_out))
            return Parameter(name, rng.uniform(-limit, limit, size=(n_in, n_out)))

        def emb(name, rows, dim):
            limit = np.sqrt(3.0 / dim)
            return Parameter(name, rng.uniform(-limit, limit, size=(rows, dim)))

        def zeros(name, dim):
            return Parameter(name, np.zeros((1, dim)))

        self.pos_emb = emb("pos_emb", 2 * c.max_offset + 1, c.pos_dim)
        self.type_emb = emb("type_emb", n_type_rows, c.type_dim)
        ent_limit = np.sqrt(6.0 / (c.type_dim + c.entity_dim))
        self.w_entity = Parameter(
            "w_entity", rng.uniform(-ent_limit, ent_limit, size=(c.entity_dim, c.type_dim)))
        self.b_entity = zeros("b_entity", c.entity_dim)
        self.lstm_fwd_w = mat("lstm_fwd_w", d_in + h, 4 * h)
        self.lstm_fwd_b = zeros("lstm_fwd_b", 4 * h)
        self.lstm_bwd_w = mat("lstm_bwd_w", d_in + h, 4 * h)
        self.lstm_bwd_b = zeros("lstm_bwd_b", 4 * h)
        self.boundary_fwd = emb("boundary_fwd", 1, h)
        self.boundary_bwd = emb("boundary_bwd", 1, h)
        self.ffn_g_w1 = mat("ffn_g_w1", c.entity_dim + feat, c.ffn_g_hidden)
        self.ffn_g_b1 = zeros("ffn_g_b1", c.ffn_g_hidden)
        self.ffn_g_w2 = mat("ffn_g_w2", c.ffn_g_hidden, 1)
        self.ffn_g_b2 = zeros("ffn_g_b2", 1)
        self.ffn_f_w1 = mat("ffn_f_w1", c.entity_dim + feat, c.ffn_f_hidden)
        self.ffn_f_b1 = zeros("ffn_f_b1", c.ffn_f_hidden)
        self.ffn_f_w2 = mat("ffn_f_w2", c.ffn_f_hidden, 1)
        # start the noise head at the prior so the KL regularizer exerts no
        # shock on the shared scorer during the first updates
        prior_logit = c.temperature * np.log(c.prior_noise / (1.0 - c.prior_noise))
        self.ffn_f_b2 = Parameter("ffn_f_b2", np.full((1, 1), prior_logit))

    def trainables(self) -> list[Parameter]:
        return [
            self.pos_emb, self.type_emb, self.w_entity, self.b_entity,
            self.lstm_fwd_w, self.lstm_fwd_b, self.lstm_bwd_w, self.lstm_bwd_b,
            self.boundary_fwd, self.boundary_bwd,
            self.ffn_g_w1, self.ffn_g_b1, self.ffn_g_w2, self.ffn_g_b2,
            self.ffn_f_w1, self.ffn_f_b1, self.ffn_f_w2, self.ffn_f_b2,
        ]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.trainables()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for p in self.trainables():
            np.copyto(p.value, values[p.name])


def _leaf(tape: Tape | None, param: Parameter) -> Tensor:
    return tape.watch(param) if tape is not None else ad.constant(param.value)


def _ffn(x: Tensor, tape, w1, b1, w2, b2) -> Tensor:
    hidden = ad.relu(ad.add_bias(ad.matmul(x, _leaf(tape, w1)), _leaf(tape, b1)))
    return ad.add_bias(ad.matmul(hidden, _leaf(tape, w2)), _leaf(tape, b2))


@dataclass
class EncodedContext:
    """BiLSTM summary of a mention in its sentence: forward and backward
    states at the token just before the span and at the span's last token."""
    f_pre: Tensor
    b_pre: Tensor
    f_post: Tensor
    b_post: Tensor

    def features(self) -> Tensor:
        return ad.concat_cols([self.f_pre, self.b_pre, self.f_post, self.b_post])


class LinkingModel:
    """Bundle of config, parameters, frozen word vectors, and the
    entity-to-type-row mapping for the knowledge base in use."""

    def __init__(self, config: ModelConfig, word_vectors: WordVectors,
                 type_table: EntityTypeTable, seed: int = 0, kb=None):
        if word_vectors.dim != config.word_dim:
            raise ValueError(
                f"word vector file has dimension {word_vectors.dim}, config says {config.word_dim}")
        self.config = config
        self.word_vectors = word_vectors
        self.type_table = type_table
        self.params = ModelParams(config, type_table.n_rows, np.random.default_rng(seed))
        self._entity_rows: dict[str, tuple[int, ...]] = {}
        if kb is not None:
            self.bind_entities(kb)

    def bind_entities(self, kb) -> None:
        """Precompute type rows for every entity of the knowledge base."""
        self._entity_rows = {e.id: self.type_table.rows_for(e.types) for e in kb.entities}

    def entity_type_rows(self, entity_id: str) -> tuple[int, ...]:
        try:
            return self._entity_rows[entity_id]
        except KeyError:
            raise KeyError(
                f"entity '{entity_id}' is not bound; call bind_entities(kb) first") from None

    # -- persistence --------------------------------------------------------

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        tensors = {p.name: p.value for p in self.params.trainables()}
        ad.save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), tensors)
        words = list(self.word_vectors.table)
        meta = {
            "config": asdict(self.config),
            "type_names": self.type_table.type_names,
            "words": words,
        }
        with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh)
        word_matrix = np.stack([self.word_vectors.table[w] for w in words]) if words \
            else np.zeros((0, self.word_vectors.dim))
        ad.save_checkpoint(os.path.join(out_dir, "word_vectors.bin"), {"word_emb": word_matrix})

    @classmethod
    def load(cls, model_dir, kb=None) -> "LinkingModel":
        with open(os.path.join(model_dir, "meta.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        config = ModelConfig(**meta["config"])
        words = meta["words"]
        wv_arrays = ad.load_checkpoint(
            os.path.join(model_dir, "word_vectors.bin"),
            expected_shapes={"word_emb": (len(words), config.word_dim)})
        table = {w: wv_arrays["word_emb"][i] for i, w in enumerate(words)}
        word_vectors = WordVectors(config.word_dim, table)
        type_table = EntityTypeTable(meta["type_names"])
        model = cls(config, word_vectors, type_table, kb=kb)
        expected = {p.name: p.value.shape for p in model.params.trainables()}
        tensors = ad.load_checkpoint(os.path.join(model_dir, "checkpoint.bin"), expected_shapes=expected)
        for p in model.params.trainables():
            np.copyto(p.value, tensors[p.name])
        return model


# ---------------------------------------------------------------------------
# context encoding


def _position_rows(span: tuple[int, int], length: int, max_offset: int) -> np.ndarray:
    """Position-embedding row per token: signed offset to the nearest span
    boundary (0 inside the span), clamped to +-max_offset, shifted to >= 0."""
    h, k = span
    pos = np.arange(1, length + 1)
    off = np.where(pos < h, pos - h, np.where(pos > k, pos - k, 0))
    return np.clip(off, -max_offset, max_offset) + max_offset


def _lstm_run(tape, w: Parameter, b: Parameter, inputs: list[Tensor], hidden: int) -> list[Tensor]:
    """One LSTM direction over a list of (B, d_in) steps; returns the hidden
    state after each step, in input order."""
    n_rows = inputs[0].value.shape[0]
    h = ad.constant(np.zeros((n_rows, hidden)))
    c = ad.constant(np.zeros((n_rows, hidden)))
    w_leaf, b_leaf = _leaf(tape, w), _leaf(tape, b)
    states = []
    for x in inputs:
        z = ad.add_bias(ad.matmul(ad.concat_cols([x, h]), w_leaf), b_leaf)
        gi = ad.sigmoid(ad.slice_cols(z, 0, hidden))
        gf = ad.sigmoid(ad.slice_cols(z, hidden, 2 * hidden))
        gg = ad.tanh(ad.slice_cols(z, 2 * hidden, 3 * hidden))
        go = ad.sigmoid(ad.slice_cols(z, 3 * hidden, 4 * hidden))
        c = ad.add(ad.mul(gf, c), ad.mul(gi, gg))
        h = ad.mul(go, ad.tanh(c))
        states.append(h)
    return states


def _encode_group(model: LinkingModel, tape, tokens_list, spans) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Encode a group of mentions whose sentences share one length.

    Returns (f_pre, b_pre, f_post, b_post), each (B, hidden).  State queries
    at position 0 (mentions starting at the first token) resolve to the
    learned boundary vectors.
    """
    cfg = model.config
    p = model.params
    n_rows = len(tokens_list)
    length = len(tokens_list[0])
    word_block = np.stack([model.word_vectors.lookup(toks) for toks in tokens_list])
    pos_block = np.stack([_position_rows(span, length, cfg.max_offset) for span in spans])
    pos_leaf = _leaf(tape, p.pos_emb)
    inputs = [
        ad.concat_cols([ad.constant(word_block[:, t]), ad.gather_rows(pos_leaf, pos_block[:, t])])
        for t in range(length)
    ]
    fwd = _lstm_run(tape, p.lstm_fwd_w, p.lstm_fwd_b, inputs, cfg.lstm_hidden)
    bwd_rev = _lstm_run(tape, p.lstm_bwd_w, p.lstm_bwd_b, inputs[::-1], cfg.lstm_hidden)
    bwd = bwd_rev[::-1]
    zeros = np.zeros(n_rows, dtype=np.intp)
    f_states = [ad.gather_rows(_leaf(tape, p.boundary_fwd), zeros)] + fwd
    b_states = [ad.gather_rows(_leaf(tape, p.boundary_bwd), zeros)] + bwd
    pre = np.array([span[0] - 1 for span in spans], dtype=np.intp)
    post = np.array([span[1] for span in spans], dtype=np.intp)
    return (
        ad.select_timestep(f_states, pre),
        ad.select_timestep(b_states, pre),
        ad.select_timestep(f_states, post),
        ad.select_timestep(b_states, post),
    )


def _encode_many(model: LinkingModel, items, tape) -> Tensor:
    """Context feature matrix (P, 4*hidden) for (tokens, span) pairs,
    grouping same-length sentences into shared BiLSTM runs."""
    groups: dict[int, list[int]] = {}
    for i, (tokens, _span) in enumerate(items):
        groups.setdefault(len(tokens), []).append(i)
    blocks, order = [], []
    for _length, idxs in groups.items():
        f_pre, b_pre, f_post, b_post = _encode_group(
            model, tape,
            [items[i][0] for i in idxs],
            [items[i][1] for i in idxs])
        blocks.append(ad.concat_cols([f_pre, b_pre, f_post, b_post]))
        order.extend(idxs)
    feats = blocks[0] if len(blocks) == 1 else ad.concat_rows(blocks)
    if order == sorted(order):
        return feats
    inverse = np.empty(len(order), dtype=np.intp)
    inverse[np.array(order)] = np.arange(len(order))
    return ad.gather_rows(feats, inverse)


# ---------------------------------------------------------------------------
# entity embedding and scoring


def _embed_entity_block(model: LinkingModel, tape, type_rows_flat: np.ndarray,
                        starts: np.ndarray) -> Tensor:
    """Embed candidates given their flattened type rows and per-candidate
    segment boundaries: ReLU(W (mean of type vectors) + b)."""
    t_rows = ad.gather_rows(_leaf(tape, model.params.type_emb), type_rows_flat)
    mean_t = ad.segment_mean(t_rows, starts)
    w = ad.transpose(_leaf(tape, model.params.w_entity))
    return ad.relu(ad.add_bias(ad.matmul(mean_t, w), _leaf(tape, model.params.b_entity)))


def _flatten_type_rows(model: LinkingModel, entity_ids) -> tuple[np.ndarray, np.ndarray]:
    flat: list[int] = []
    starts = [0]
    for eid in entity_ids:
        flat.extend(model.entity_type_rows(eid))
        starts.append(len(flat))
    return np.array(flat, dtype=np.intp), np.array(starts, dtype=np.intp)


def _score_block(model: LinkingModel, tape, entity_vecs: Tensor, ctx_rep: Tensor) -> Tensor:
    p = model.params
    x = ad.concat_cols([entity_vecs, ctx_rep])
    return _ffn(x, tape, p.ffn_g_w1, p.ffn_g_b1, p.ffn_g_w2, p.ffn_g_b2)


@dataclass
class BatchForward:
    """All tensors produced by one batched forward pass."""
    ctx: Tensor
    pos_entity_vecs: Tensor
    pos_scores: Tensor
    pos_starts: np.ndarray
    neg_scores: Tensor | None = None
    neg_starts: np.ndarray | None = None
    alpha: Tensor | None = None
    pooled: Tensor | None = None
    p_noise: Tensor | None = None


def forward_batch(model: LinkingModel, points, tape: Tape | None = None, *,
                  with_negatives: bool = False, with_noise: bool = False) -> BatchForward:
    """Score all candidates of a batch of data points in one pass.

    Every point must have a nonempty positive set (and nonempty negative
    set when ``with_negatives``); callers filter or special-case empty ones.
    """
    points = list(points)
    if not points:
        raise ValueError("forward_batch: empty batch")
    for dp in points:
        if not dp.positive:
            raise ValueError(f"forward_batch: point {dp.point_id} has an empty positive set")
        if with_negatives and not dp.negative:
            raise ValueError(f"forward_batch: point {dp.point_id} has an empty negative set")
    cfg = model.config
    ctx = _encode_many(model, [(dp.tokens, dp.mention.span) for dp in points], tape)

    def candidate_block(id_lists):
        ids = [eid for ids in id_lists for eid in ids]
        counts = np.array([len(ids_) for ids_ in id_lists], dtype=np.intp)
        starts = np.concatenate([[0], np.cumsum(counts)])
        rep = np.repeat(np.arange(len(points), dtype=np.intp), counts)
        flat_types, type_starts = _flatten_type_rows(model, ids)
        vecs = _embed_entity_block(model, tape, flat_types, type_starts)
        scores = _score_block(model, tape, vecs, ad.gather_rows(ctx, rep))
        return vecs, scores, starts

    pos_vecs, pos_scores, pos_starts = candidate_block([dp.positive for dp in points])
    out = BatchForward(ctx=ctx, pos_entity_vecs=pos_vecs,
                       pos_scores=pos_scores, pos_starts=pos_starts)
    if with_negatives:
        _vecs, out.neg_scores, out.neg_starts = candidate_block([dp.negative for dp in points])
    if with_noise:
        out.alpha = ad.segment_softmax(pos_scores, pos_starts, cfg.temperature)
        out.pooled = ad.segment_sum(ad.scale_rows(pos_vecs, out.alpha), pos_starts)
        p = model.params
        logit = _ffn(ad.concat_cols([out.pooled, ctx]), tape,
                     p.ffn_f_w1, p.ffn_f_b1, p.ffn_f_w2, p.ffn_f_b2)
        out.p_noise = ad.sigmoid(ad.scale(logit, 1.0 / cfg.temperature))
    return out


# ---------------------------------------------------------------------------
# per-mention operations (single-row wrappers over the batched path)


def embed_entity(model: LinkingModel, types, tape: Tape | None = None) -> Tensor:
    """Entity vector (1, entity_dim) from a set of type names.

    Unknown type names fall back to the learned unknown-type vector; an
    empty set uses the learned no-type vector.
    """
    rows = np.array(model.type_table.rows_for(types), dtype=np.intp)
    starts = np.array([0, rows.size], dtype=np.intp)
    return _embed_entity_block(model, tape, rows, starts)


def encode_context(model: LinkingModel, tokens, span: tuple[int, int],
                   tape: Tape | None = None) -> EncodedContext:
    """Encode one mention in its sentence."""
    h, k = span
    if not (1 <= h <= k <= len(tokens)):
        raise ValueError(f"span ({h}, {k}) outside 1..{len(tokens)}")
    f_pre, b_pre, f_post, b_post = _encode_group(model, tape, [tuple(tokens)], [span])
    return EncodedContext(f_pre, b_pre, f_post, b_post)


def score(model: LinkingModel, entity_vec: Tensor, ctx: EncodedContext,
          tape: Tape | None = None) -> Tensor:
    """Compatibility score (1, 1) of an entity vector with a context."""
    return _score_block(model, tape, entity_vec, ctx.features())


def attend_positive(model: LinkingModel, entity_vecs, ctx: EncodedContext,
                    temperature: float | None = None, tape: Tape | None = None
                    ) -> tuple[Tensor, Tensor]:
    """Attention-pool candidate vectors with weights from the shared scorer.

    Returns (pooled vector (1, entity_dim), weights (n, 1)).
    """
    entity_vecs = list(entity_vecs)
    if not entity_vecs:
        raise ValueError("attend_positive: empty candidate set")
    t = model.config.temperature if temperature is None else temperature
    stacked = entity_vecs[0] if len(entity_vecs) == 1 else ad.concat_rows(entity_vecs)
    n = stacked.value.shape[0]
    rep = np.zeros(n, dtype=np.intp)
    scores = _score_block(model, tape, stacked, ad.gather_rows(ctx.features(), rep))
    starts = np.array([0, n], dtype=np.intp)
    alpha = ad.segment_softmax(scores, starts, t)
    pooled = ad.segment_sum(ad.scale_rows(stacked, alpha), starts)
    return pooled, alpha


def noise_prob(model: LinkingModel, pooled: Tensor, ctx: EncodedContext,
               temperature: float | None = None, tape: Tape | None = None) -> Tensor:
    """Probability (1, 1) that the candidate set lacks the correct entity."""
    t = model.config.temperature if temperature is None else temperature
    p = model.params
    logit = _ffn(ad.concat_cols([pooled, ctx.features()]), tape,
                 p.ffn_f_w1, p.ffn_f_b1, p.ffn_f_w2, p.ffn_f_b2)
    return ad.sigmoid(ad.scale(logit, 1.0 / t))
