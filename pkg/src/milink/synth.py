"""Deterministic generator of small synthetic knowledge bases and corpora
with known gold links and a controllable injected-noise rate.

Construction scheme:

* Entities come in "name groups".  Every member of a group shares a
  two-token name core and adds one distinguishing suffix token, so a
  mention written as the bare core surface-matches the whole group.
  Members of one group carry different primary types.
* Sentences mention two (or more) entities whose gold links are connected
  by knowledge-base triples, so the relation filter keeps the gold
  candidates in training mode.  Each mention is flanked by cue tokens
  drawn from the gold entity's primary type, which makes the linking task
  learnable from context.
* Noise is injected by rewriting a mention's surface to the name core of
  a different group (chosen adjacent to a co-mention, so the wrong
  candidates also survive the relation filter).  Surface matching then
  cannot recover the gold entity, which is exactly how noisy points arise
  in the real pipeline.

Everything is a pure function of the config and seed.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .candidates import NE_TYPES, Mention, Sentence, generate_positive_set, write_corpus, write_noise_labels
from .kb import KnowledgeBase, load_kb_files

__all__ = ["SynthConfig", "generate_kb", "generate_corpus", "generate_splits"]

log = logging.getLogger(__name__)


@dataclass
class SynthConfig:
    n_entities: int = 500
    n_types: int = 8
    types_per_entity: int = 1
    n_relations: int = 1500
    n_sentences: int = 2000
    mentions_per_sentence: int = 2
    vocab_size: int = 400
    noise_rate: float = 0.4
    seed: int = 0
    min_group_size: int = 2
    max_group_size: int = 6
    cue_tokens_per_type: int = 2
    word_vec_dim: int = 16

    def __post_init__(self):
        for name in ("n_entities", "n_types", "types_per_entity", "n_sentences",
                     "mentions_per_sentence", "vocab_size", "min_group_size",
                     "max_group_size", "cue_tokens_per_type", "word_vec_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_relations < 0:
            raise ValueError("n_relations must be nonnegative")
        if not (0.0 <= self.noise_rate <= 1.0):
            raise ValueError("noise_rate must lie in [0, 1]")
        if self.min_group_size > self.max_group_size:
            raise ValueError("min_group_size exceeds max_group_size")
        if self.n_types < self.max_group_size:
            raise ValueError("need n_types >= max_group_size so group members get distinct primary types")


def _rng(config: SynthConfig, key: int, seed: int | None = None) -> np.random.Generator:
    entropy = config.seed if seed is None else seed
    return np.random.default_rng(np.random.SeedSequence(entropy=entropy, spawn_key=(key,)))


def _group_sizes(config: SynthConfig, rng: np.random.Generator) -> list[int]:
    sizes: list[int] = []
    remaining = config.n_entities
    while remaining > 0:
        s = int(rng.integers(config.min_group_size, config.max_group_size + 1))
        s = min(s, remaining)
        sizes.append(s)
        remaining -= s
    return sizes


def _pools(config: SynthConfig, n_groups: int) -> dict[str, list[str]]:
    """Partition the token budget into name cores, suffixes, cues, fillers."""
    n_core = 2 * n_groups
    n_suffix = config.max_group_size
    n_cue = config.n_types * config.cue_tokens_per_type
    fixed = n_core + n_suffix + n_cue
    n_filler = config.vocab_size - fixed
    if n_filler < 3:
        raise ValueError(
            f"vocab_size {config.vocab_size} too small: {n_groups} name groups need "
            f"{fixed} name/cue tokens plus at least 3 fillers")
    return {
        "core": [f"nm{i:04d}" for i in range(n_core)],
        "suffix": [f"sx{i:02d}" for i in range(n_suffix)],
        "cue": [f"cue{t:02d}_{j}" for t in range(config.n_types)
                for j in range(config.cue_tokens_per_type)],
        "filler": [f"fl{i:03d}" for i in range(n_filler)],
    }


def _type_name(i: int) -> str:
    return f"t{i:02d}"


def _cue_pool(config: SynthConfig, type_index: int) -> list[str]:
    return [f"cue{type_index:02d}_{j}" for j in range(config.cue_tokens_per_type)]


def generate_kb(config: SynthConfig, out_dir) -> KnowledgeBase:
    """Write entities.tsv, relations.tsv, and vectors.txt; return the KB
    loaded back from the written files."""
    os.makedirs(out_dir, exist_ok=True)
    rng = _rng(config, key=3)
    sizes = _group_sizes(config, rng)
    pools = _pools(config, len(sizes))

    records = []
    for g, size in enumerate(sizes):
        core = (pools["core"][2 * g], pools["core"][2 * g + 1])
        primaries = rng.choice(config.n_types, size=size, replace=False)
        for j in range(size):
            primary = int(primaries[j])
            # extra types must sort after the primary so that
            # sorted(types)[0] recovers the primary from the type set
            extras_avail = list(range(primary + 1, config.n_types))
            n_extra = min(config.types_per_entity - 1, len(extras_avail))
            extras = [int(x) for x in rng.choice(extras_avail, size=n_extra, replace=False)] \
                if n_extra else []
            types = [_type_name(primary)] + [_type_name(x) for x in sorted(extras)]
            name = " ".join(core + (pools["suffix"][j],))
            records.append((name, types))
    order = rng.permutation(len(records))
    entity_path = os.path.join(out_dir, "entities.tsv")
    with open(entity_path, "w", encoding="utf-8") as fh:
        ids = []
        for rank, idx in enumerate(order):
            name, types = records[idx]
            eid = f"e{rank:05d}"
            ids.append(eid)
            fh.write(f"{eid}\t{name}\t{','.join(types)}\n")

    # triples are sampled between name groups, several member pairs per
    # group pair, so that siblings of a gold entity also tend to survive
    # the relation filter and training candidate sets stay genuine bags
    by_group: dict[int, list[str]] = {}
    for row, idx in enumerate(order):
        g = int(np.searchsorted(np.cumsum(sizes), idx, side="right"))
        by_group.setdefault(g, []).append(ids[row])
    group_list = [by_group[g] for g in sorted(by_group)]
    pairs: set[tuple[str, str]] = set()
    relation_path = os.path.join(out_dir, "relations.tsv")
    with open(relation_path, "w", encoding="utf-8") as fh:
        attempts = 0
        while len(pairs) < config.n_relations and attempts < 50 * max(config.n_relations, 1):
            attempts += 1
            ga, gb = rng.integers(0, len(group_list), size=2)
            if ga == gb:
                continue
            members_a, members_b = group_list[int(ga)], group_list[int(gb)]
            n_links = int(rng.integers(1, 4))
            for _ in range(n_links):
                if len(pairs) >= config.n_relations:
                    break
                a = members_a[int(rng.integers(0, len(members_a)))]
                b = members_b[int(rng.integers(0, len(members_b)))]
                if (a, b) in pairs or (b, a) in pairs:
                    continue
                pairs.add((a, b))
                fh.write(f"{a}\tassoc\t{b}\n")
    if len(pairs) < config.n_relations:
        log.warning("only %d of %d requested relations are distinct", len(pairs), config.n_relations)

    vec_rng = _rng(config, key=4)
    with open(os.path.join(out_dir, "vectors.txt"), "w", encoding="utf-8") as fh:
        for pool in ("core", "suffix", "cue", "filler"):
            for token in pools[pool]:
                values = vec_rng.normal(0.0, 0.5, size=config.word_vec_dim)
                fh.write(token + " " + " ".join(f"{v:.6f}" for v in values) + "\n")

    return load_kb_files(entity_path, relation_path)


def _group_key(kb: KnowledgeBase, entity_id: str) -> tuple[str, str]:
    return kb.entity(entity_id).name_tokens[:2]


def _primary_type_index(kb: KnowledgeBase, entity_id: str) -> int:
    types = sorted(kb.entity(entity_id).types)
    if not types:
        return 0
    return int(types[0][1:])


def _chain_golds(kb: KnowledgeBase, k: int, ids: list[str], rng: np.random.Generator) -> list[str]:
    """Pick k gold entities, consecutive ones related when triples exist."""
    linkable = [e for e in ids if kb.adjacency.get(e)]
    for _attempt in range(20):
        if not linkable:
            picks = rng.choice(len(ids), size=min(k, len(ids)), replace=False)
            golds = [ids[int(i)] for i in picks]
        else:
            golds = [linkable[int(rng.integers(0, len(linkable)))]]
            for _ in range(k - 1):
                nbrs = sorted(kb.adjacency.get(golds[-1], frozenset()))
                if not nbrs:
                    break
                golds.append(nbrs[int(rng.integers(0, len(nbrs)))])
        if len(golds) == k and len(set(golds)) == k:
            return golds
    while len(golds) < k:
        golds.append(ids[int(rng.integers(0, len(ids)))])
    return golds[:k]


def generate_corpus(kb: KnowledgeBase, config: SynthConfig, corpus_path, labels_path,
                    n_sentences: int | None = None, seed: int | None = None,
                    for_training: bool = True) -> tuple[list[Sentence], dict[str, bool]]:
    """Write a corpus file plus the ground-truth noise-label sidecar.

    Labels follow the data-point definition for the pipeline the corpus is
    meant for: with ``for_training`` the relation filter applies, otherwise
    plain surface matching.  Labels are computed with an uncapped positive
    set, so they are valid for any cap at least as large as the biggest
    name group.
    """
    n = config.n_sentences if n_sentences is None else n_sentences
    rng = _rng(config, key=7, seed=seed)
    ids = [e.id for e in kb.entities]
    groups: dict[tuple[str, str], list[str]] = {}
    for e in kb.entities:
        groups.setdefault(e.name_tokens[:2], []).append(e.id)
    group_keys = list(groups)

    def adjacent_groups(anchor_ids) -> list[tuple[str, str]]:
        seen: list[tuple[str, str]] = []
        for aid in anchor_ids:
            for nbr in sorted(kb.adjacency.get(aid, frozenset())):
                gk = _group_key(kb, nbr)
                if gk not in seen:
                    seen.append(gk)
        return seen

    sentences: list[Sentence] = []
    labels: dict[str, bool] = {}
    k = config.mentions_per_sentence
    for s_idx in range(n):
        golds = _chain_golds(kb, k, ids, rng)
        noisy = [bool(rng.random() < config.noise_rate) for _ in range(k)]
        surfaces: list[tuple[str, str] | None] = [
            None if noisy[i] else _group_key(kb, golds[i]) for i in range(k)
        ]
        # anchor sets for perturbation targets: gold entities of valid
        # mentions, whole groups of already-perturbed ones
        for i in range(k):
            if not noisy[i]:
                continue
            anchors: list[str] = []
            for j in range(k):
                if j == i:
                    continue
                if surfaces[j] is None:
                    anchors.extend([golds[j]])  # not yet perturbed: current gold
                elif noisy[j]:
                    anchors.extend(groups[surfaces[j]])
                else:
                    anchors.append(golds[j])
            own = _group_key(kb, golds[i])
            targets = [g for g in adjacent_groups(anchors) if g != own]
            if not targets:
                others = [g for g in group_keys if g != own]
                targets = [others[int(rng.integers(0, len(others)))]] if others else [own]
            surfaces[i] = targets[int(rng.integers(0, len(targets)))]

        tokens: list[str] = []
        mentions: list[Mention] = []
        fillers = _pools(config, len(group_keys))["filler"]
        sid = f"s{s_idx:06d}"
        tokens.append(fillers[int(rng.integers(0, len(fillers)))])
        for i in range(k):
            cue_pool = _cue_pool(config, _primary_type_index(kb, golds[i]))
            left = cue_pool[int(rng.integers(0, len(cue_pool)))]
            right = cue_pool[int(rng.integers(0, len(cue_pool)))]
            h = len(tokens) + 2
            tokens.extend([left, surfaces[i][0], surfaces[i][1], right])
            tokens.append(fillers[int(rng.integers(0, len(fillers)))])
            mentions.append(Mention(
                sentence_id=sid, span=(h, h + 1),
                ne_type=NE_TYPES[_primary_type_index(kb, golds[i]) % len(NE_TYPES)],
                gold=golds[i]))
        sentences.append(Sentence(id=sid, tokens=tuple(tokens), mentions=tuple(mentions)))

    for sentence in sentences:
        for mention in sentence.mentions:
            positive = generate_positive_set(kb, sentence, mention, cap=len(kb),
                                             relation_filter=for_training)
            labels[mention.point_id] = mention.gold not in positive

    write_corpus(corpus_path, sentences)
    write_noise_labels(labels_path, labels)
    return sentences, labels


def generate_splits(config: SynthConfig, out_dir, n_dev: int = 300, n_test: int = 300
                    ) -> dict[str, str]:
    """Generate a knowledge base plus train/dev/test corpora and label
    sidecars under ``out_dir``; returns the path of every written file."""
    os.makedirs(out_dir, exist_ok=True)
    generate_kb(config, out_dir)
    paths = {
        "kb": str(out_dir),
        "entities": os.path.join(out_dir, "entities.tsv"),
        "relations": os.path.join(out_dir, "relations.tsv"),
        "vectors": os.path.join(out_dir, "vectors.txt"),
    }
    kb = load_kb_files(paths["entities"], paths["relations"])
    splits = [("train", config.n_sentences, True, 0)]
    if n_dev:
        splits.append(("dev", n_dev, False, 1))
    if n_test:
        splits.append(("test", n_test, False, 2))
    for name, count, for_training, offset in splits:
        corpus_path = os.path.join(out_dir, f"corpus_{name}.jsonl")
        labels_path = os.path.join(out_dir, f"noise_labels_{name}.tsv")
        generate_corpus(kb, config, corpus_path, labels_path, n_sentences=count,
                        seed=config.seed * 1000 + offset, for_training=for_training)
        paths[f"corpus_{name}"] = corpus_path
        paths[f"labels_{name}"] = labels_path
    return paths
