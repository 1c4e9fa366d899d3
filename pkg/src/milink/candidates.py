"""Data-point construction: turn a corpus plus a knowledge base into
training/evaluation tuples of (mention, context, positive candidates,
negative candidates).

Positive candidates are produced in three steps: surface-name matching,
an optional relation filter against candidates of co-occurring mentions
(training only), and truncation to a prominence-ordered cap.  Negatives
are sampled uniformly from the rest of the knowledge base.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .kb import KnowledgeBase, match_by_name

__all__ = [
    "Mention",
    "Sentence",
    "DataPoint",
    "select_training_sentences",
    "generate_positive_set",
    "sample_negatives",
    "build_dataset",
    "oracle_recall",
    "read_corpus",
    "write_corpus",
    "read_datapoints",
    "write_datapoints",
    "read_noise_labels",
    "write_noise_labels",
]

log = logging.getLogger(__name__)

NE_TYPES = ("PER", "ORG", "LOC", "MISC")

CORPUS_SCHEMA = {"schema": "corpus", "version": 1}
DATAPOINT_SCHEMA = {"schema": "datapoints", "version": 1}


@dataclass(frozen=True)
class Mention:
    """A token span (1-based, inclusive) inside a sentence."""
    sentence_id: str
    span: tuple[int, int]
    ne_type: str | None = None
    gold: str | None = None

    @property
    def point_id(self) -> str:
        h, k = self.span
        return f"{self.sentence_id}:{h}-{k}"


@dataclass(frozen=True)
class Sentence:
    id: str
    tokens: tuple[str, ...]
    mentions: tuple[Mention, ...] = ()

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"sentence '{self.id}': empty token list")
        for m in self.mentions:
            h, k = m.span
            if not (1 <= h <= k <= len(self.tokens)):
                raise ValueError(
                    f"sentence '{self.id}': span ({h}, {k}) outside 1..{len(self.tokens)}")

    def mention_tokens(self, mention: Mention) -> tuple[str, ...]:
        h, k = mention.span
        return self.tokens[h - 1:k]


@dataclass
class DataPoint:
    """One linking instance: a mention in context with its candidate sets.

    ``noise_label`` is the ground truth "positive set lacks the gold
    entity" flag; it is only filled when gold annotations exist.
    """
    mention: Mention
    tokens: tuple[str, ...]
    positive: tuple[str, ...]
    negative: tuple[str, ...] = ()
    noise_label: bool | None = None

    @property
    def point_id(self) -> str:
        return self.mention.point_id

    def gold_in_positive(self) -> bool:
        return self.mention.gold is not None and self.mention.gold in self.positive


def select_training_sentences(corpus):
    """Keep only sentences with at least two entity mentions."""
    for sentence in corpus:
        if len(sentence.mentions) >= 2:
            yield sentence


def generate_positive_set(kb: KnowledgeBase, sentence: Sentence, mention: Mention,
                          cap: int, relation_filter: bool) -> list[str]:
    """Candidate ids for one mention, ordered by prominence.

    Step 1 matches the mention's surface tokens against entity names.
    Step 2 (training only) keeps candidates related to at least one
    surface-match candidate of some other mention in the same sentence;
    partner candidate sets are the uncapped step-1 lists.  Step 3 truncates
    to the first ``cap`` candidates.
    """
    if not any(m is mention for m in sentence.mentions):
        raise ValueError(f"mention {mention.point_id} does not belong to sentence '{sentence.id}'")
    if cap < 0:
        raise ValueError(f"cap must be nonnegative, got {cap}")
    step1 = match_by_name(kb, sentence.mention_tokens(mention))
    if relation_filter:
        partners: set[str] = set()
        for other in sentence.mentions:
            if other is mention:
                continue
            partners.update(match_by_name(kb, sentence.mention_tokens(other)))
        kept = [e for e in step1 if kb.adjacency.get(e, frozenset()) & partners]
    else:
        kept = step1
    return kept[:cap]


def sample_negatives(kb: KnowledgeBase, positive, n: int, rng: np.random.Generator) -> list[str]:
    """Sample ``n`` distinct entities uniformly from the KB minus ``positive``."""
    if n < 0:
        raise ValueError(f"negative sample size must be nonnegative, got {n}")
    if n == 0:
        return []
    excluded = set(positive)
    eligible = [e.id for e in kb.entities if e.id not in excluded]
    if n > len(eligible):
        raise ValueError(f"cannot sample {n} negatives from {len(eligible)} eligible entities")
    picks = rng.choice(len(eligible), size=n, replace=False)
    return [eligible[i] for i in picks]


def build_dataset(kb: KnowledgeBase, corpus, cap: int, n_neg: int, mode: str,
                  rng: np.random.Generator | None = None):
    """Yield one :class:`DataPoint` per mention, in corpus order.

    ``mode`` selects the pipeline: ``"train"`` filters to sentences with two
    or more mentions, applies the relation filter, and samples negatives;
    ``"test"`` applies neither filter and leaves negatives empty;
    ``"supervised"`` uses the singleton gold entity as the positive set and
    samples negatives (every mention must carry a gold annotation).
    """
    if mode not in ("train", "test", "supervised"):
        raise ValueError(f"unknown dataset mode '{mode}'")
    if mode in ("train", "supervised") and rng is None:
        raise ValueError(f"mode '{mode}' samples negatives and needs an rng")
    sentences = select_training_sentences(corpus) if mode == "train" else corpus
    for sentence in sentences:
        for mention in sentence.mentions:
            if mode == "supervised":
                if mention.gold is None:
                    raise ValueError(f"supervised mode: mention {mention.point_id} lacks a gold entity")
                positive = [mention.gold]
            else:
                positive = generate_positive_set(
                    kb, sentence, mention, cap, relation_filter=(mode == "train"))
            negative = sample_negatives(kb, positive, n_neg, rng) if mode != "test" else []
            noise = None
            if mention.gold is not None:
                noise = mention.gold not in positive
            yield DataPoint(
                mention=mention,
                tokens=sentence.tokens,
                positive=tuple(positive),
                negative=tuple(negative),
                noise_label=noise,
            )


def oracle_recall(datapoints, cap: int | None = None) -> float:
    """Fraction of mentions whose positive set (truncated to ``cap``)
    contains the gold entity.  Every point must carry a gold annotation."""
    points = list(datapoints)
    if not points:
        return 0.0
    hits = 0
    for dp in points:
        if dp.mention.gold is None:
            raise ValueError(f"oracle_recall: point {dp.point_id} lacks a gold entity")
        positive = dp.positive if cap is None else dp.positive[:cap]
        hits += dp.mention.gold in positive
    return hits / len(points)


# ---------------------------------------------------------------------------
# file formats (JSON Lines with a leading version header)


def _check_header(line: str, expected: dict, path, what: str) -> None:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line 1 is not a valid {what} header: {exc}") from None
    if header.get("schema") != expected["schema"]:
        raise ValueError(f"{path}: expected schema '{expected['schema']}', got {header.get('schema')!r}")
    if header.get("version") != expected["version"]:
        raise ValueError(f"{path}: unsupported {what} version {header.get('version')!r}")


def write_corpus(path, sentences) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(CORPUS_SCHEMA) + "\n")
        for s in sentences:
            rec = {
                "id": s.id,
                "tokens": list(s.tokens),
                "mentions": [
                    {"span": list(m.span), "ne_type": m.ne_type, "gold": m.gold}
                    for m in s.mentions
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def read_corpus(path) -> list[Sentence]:
    sentences = []
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise ValueError(f"{path}: empty corpus file")
        _check_header(first, CORPUS_SCHEMA, path, "corpus")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            try:
                sid = rec["id"]
                mentions = tuple(
                    Mention(sentence_id=sid, span=tuple(m["span"]),
                            ne_type=m.get("ne_type"), gold=m.get("gold"))
                    for m in rec.get("mentions", ())
                )
                sentences.append(Sentence(id=sid, tokens=tuple(rec["tokens"]), mentions=mentions))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return sentences


def write_datapoints(path, points) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(DATAPOINT_SCHEMA) + "\n")
        for dp in points:
            rec = {
                "sentence_id": dp.mention.sentence_id,
                "span": list(dp.mention.span),
                "positive": list(dp.positive),
                "negative": list(dp.negative),
                "noise": dp.noise_label,
            }
            fh.write(json.dumps(rec) + "\n")


def read_datapoints(path, corpus) -> list[DataPoint]:
    """Load data points, joining sentence tokens and mention annotations
    from the corpus on (sentence id, span)."""
    by_id = {s.id: s for s in corpus}
    points = []
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise ValueError(f"{path}: empty data point file")
        _check_header(first, DATAPOINT_SCHEMA, path, "data point")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            sid = rec["sentence_id"]
            sentence = by_id.get(sid)
            if sentence is None:
                raise ValueError(f"{path}: line {lineno}: sentence '{sid}' not in corpus")
            span = tuple(rec["span"])
            mention = next((m for m in sentence.mentions if m.span == span), None)
            if mention is None:
                mention = Mention(sentence_id=sid, span=span)
            points.append(DataPoint(
                mention=mention,
                tokens=sentence.tokens,
                positive=tuple(rec["positive"]),
                negative=tuple(rec.get("negative", ())),
                noise_label=rec.get("noise"),
            ))
    return points


def write_noise_labels(path, labels: dict[str, bool]) -> None:
    """Sidecar of ground-truth noise flags: ``point_id<TAB>0|1`` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for point_id, noisy in labels.items():
            fh.write(f"{point_id}\t{int(noisy)}\n")


def read_noise_labels(path) -> dict[str, bool]:
    labels: dict[str, bool] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in ("0", "1"):
                raise ValueError(f"{path}: line {lineno}: expected 'point_id<TAB>0|1'")
            labels[parts[0]] = parts[1] == "1"
    return labels
