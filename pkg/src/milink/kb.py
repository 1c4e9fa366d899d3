"""Knowledge-base store: entity names, types, relation triples, and the
inverted token index used for surface-name candidate lookup.

A knowledge base is immutable once built, so all query operations are safe
under unlimited concurrent readers.
"""

from __future__ import annotations

import logging
import string
from dataclasses import dataclass

__all__ = [
    "Entity",
    "RelationTriple",
    "KnowledgeBase",
    "normalize_tokens",
    "load_kb",
    "load_kb_files",
    "match_by_name",
    "related",
]

log = logging.getLogger(__name__)

_PUNCT = set(string.punctuation)


def normalize_tokens(tokens) -> list[str]:
    """Lowercase tokens and drop the ones made of punctuation only."""
    out = []
    for t in tokens:
        t = t.lower()
        if t and not all(ch in _PUNCT for ch in t):
            out.append(t)
    return out


@dataclass(frozen=True)
class Entity:
    """One knowledge-base record.

    ``prominence`` is the zero-based position in the entity file; file order
    is the prominence ranking used everywhere candidates are sorted or
    truncated.
    """
    id: str
    name_tokens: tuple[str, ...]
    types: frozenset[str]
    prominence: int


@dataclass(frozen=True)
class RelationTriple:
    subject: str
    predicate: str
    object: str


class KnowledgeBase:
    """Indexed, immutable store of entities and relation triples."""

    def __init__(self, entities: list[Entity], triples: list[RelationTriple]):
        self.entities: tuple[Entity, ...] = tuple(entities)
        self.triples: tuple[RelationTriple, ...] = tuple(triples)
        self._by_id: dict[str, Entity] = {}
        for e in self.entities:
            if e.id in self._by_id:
                raise ValueError(f"duplicate entity id '{e.id}'")
            self._by_id[e.id] = e
        # token -> ascending row (= prominence) indices of entities whose
        # name contains the token
        self.token_index: dict[str, tuple[int, ...]] = {}
        index: dict[str, list[int]] = {}
        for row, e in enumerate(self.entities):
            for tok in set(e.name_tokens):
                index.setdefault(tok, []).append(row)
        self.token_index = {tok: tuple(rows) for tok, rows in index.items()}
        # undirected, predicate-agnostic adjacency over entity ids
        adj: dict[str, set[str]] = {}
        for t in self.triples:
            adj.setdefault(t.subject, set()).add(t.object)
            adj.setdefault(t.object, set()).add(t.subject)
        self.adjacency: dict[str, frozenset[str]] = {
            eid: frozenset(nbrs) for eid, nbrs in adj.items()
        }

    def __len__(self) -> int:
        return len(self.entities)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self._by_id

    def entity(self, entity_id: str) -> Entity:
        try:
            return self._by_id[entity_id]
        except KeyError:
            raise KeyError(f"unknown entity id '{entity_id}'") from None

    def neighbors(self, entity_id: str) -> frozenset[str]:
        self.entity(entity_id)
        return self.adjacency.get(entity_id, frozenset())


def _parse_entity_line(line: str, lineno: int) -> tuple[str, tuple[str, ...], frozenset[str]]:
    parts = line.split("\t")
    if len(parts) != 3:
        raise ValueError(f"entity file line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
    eid, name, types_field = parts
    eid = eid.strip()
    if not eid:
        raise ValueError(f"entity file line {lineno}: empty entity id")
    name_tokens = tuple(normalize_tokens(name.split()))
    if not name_tokens:
        raise ValueError(f"entity file line {lineno}: name '{name}' has no usable tokens")
    types = frozenset(t.strip() for t in types_field.split(",") if t.strip())
    return eid, name_tokens, types


def load_kb(entity_stream, relation_stream, on_dangling: str = "skip") -> KnowledgeBase:
    """Build an indexed knowledge base from line-oriented record streams.

    Entity records: ``id<TAB>surface name<TAB>type1,type2,...`` (the type
    list may be empty); line order defines prominence.  Relation records:
    ``subject<TAB>predicate<TAB>object``.  ``on_dangling`` controls triples
    whose endpoints are unknown: ``"skip"`` drops them with a warning,
    ``"error"`` raises.
    """
    if on_dangling not in ("skip", "error"):
        raise ValueError(f"on_dangling must be 'skip' or 'error', got {on_dangling!r}")
    entities: list[Entity] = []
    for lineno, line in enumerate(entity_stream, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        eid, name_tokens, types = _parse_entity_line(line, lineno)
        entities.append(Entity(eid, name_tokens, types, prominence=len(entities)))
    known = {e.id for e in entities}

    triples: list[RelationTriple] = []
    n_dropped = 0
    for lineno, line in enumerate(relation_stream, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"relation file line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
        subj, pred, obj = (p.strip() for p in parts)
        missing = [x for x in (subj, obj) if x not in known]
        if missing:
            if on_dangling == "error":
                raise ValueError(f"relation file line {lineno}: unknown entity id '{missing[0]}'")
            n_dropped += 1
            continue
        triples.append(RelationTriple(subj, pred, obj))
    if n_dropped:
        log.warning("dropped %d relation triples with unknown endpoints", n_dropped)
    return KnowledgeBase(entities, triples)


def load_kb_files(entity_path, relation_path, on_dangling: str = "skip") -> KnowledgeBase:
    with open(entity_path, encoding="utf-8") as ef, open(relation_path, encoding="utf-8") as rf:
        return load_kb(ef, rf, on_dangling=on_dangling)


def match_by_name(kb: KnowledgeBase, mention_tokens) -> list[str]:
    """All entities whose name tokens contain every mention token.

    Matching is set-based over normalized tokens; the result is ordered by
    ascending prominence.  A mention with no usable tokens matches nothing
    (it is not treated as an empty constraint).
    """
    tokens = set(normalize_tokens(mention_tokens))
    if not tokens:
        return []
    postings = []
    for tok in tokens:
        rows = kb.token_index.get(tok)
        if not rows:
            return []
        postings.append(rows)
    postings.sort(key=len)
    hits = set(postings[0])
    for rows in postings[1:]:
        hits &= set(rows)
        if not hits:
            return []
    return [kb.entities[row].id for row in sorted(hits)]


def related(kb: KnowledgeBase, a: str, b: str) -> bool:
    """True when some triple links ``a`` and ``b`` in either direction."""
    kb.entity(a)
    kb.entity(b)
    return b in kb.adjacency.get(a, frozenset())
