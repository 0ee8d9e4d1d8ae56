"""Knowledge-triple store: TSV ingestion and related-fact extraction.

A fact scores against a (question, passage) pair by three additive rules:
+4 when its subject occurs in the question and its object in the passage,
+2 when subject and object both occur in the passage, and +1 when the
subject occurs in either text. "Occurs" means a contiguous run of
lowercased tokens. Facts that only match through their object score 0 and
are dropped.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from .errors import DataError
from .text import tokenize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Fact:
    subject: tuple[str, ...]
    relation: int
    object: tuple[str, ...]
    fact_id: int


@dataclass
class KnowledgeBase:
    facts: list[Fact] = field(default_factory=list)
    relation_names: list[str] = field(default_factory=list)
    surface_index: dict[str, list[int]] = field(default_factory=dict)
    skipped_lines: int = 0

    def relation_name(self, fact: Fact) -> str:
        return self.relation_names[fact.relation]


@dataclass(frozen=True)
class ScoredFact:
    fact_id: int
    score: int


def ingest_triples(path) -> KnowledgeBase:
    """Load tab-separated (subject, relation, object) lines in file order.

    Malformed lines are skipped with a warning count rather than aborting
    the load; real dumps always contain a few.
    """
    kb = KnowledgeBase()
    relation_ids: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                log.warning("kb line %d: expected 3 tab-separated fields, got %d",
                            lineno, len(parts))
                kb.skipped_lines += 1
                continue
            subject = tuple(tokenize(parts[0]))
            relation = parts[1].strip()
            obj = tuple(tokenize(parts[2]))
            if not subject or not relation or not obj:
                log.warning("kb line %d: empty subject, relation or object", lineno)
                kb.skipped_lines += 1
                continue
            if relation not in relation_ids:
                relation_ids[relation] = len(kb.relation_names)
                kb.relation_names.append(relation)
            fact = Fact(subject, relation_ids[relation], obj, fact_id=len(kb.facts))
            kb.facts.append(fact)
            for token in set(subject) | set(obj):
                kb.surface_index.setdefault(token, []).append(fact.fact_id)
    return kb


def occurs(needle: Sequence[str], hay: Sequence[str]) -> bool:
    """Contiguous token-subsequence containment."""
    n = len(needle)
    if n == 0 or n > len(hay):
        return False
    first = needle[0]
    for i in range(len(hay) - n + 1):
        if hay[i] == first and tuple(hay[i:i + n]) == tuple(needle):
            return True
    return False


def score_fact(fact: Fact, q_tokens: Sequence[str], p_tokens: Sequence[str]) -> int:
    subj_in_q = occurs(fact.subject, q_tokens)
    subj_in_p = occurs(fact.subject, p_tokens)
    obj_in_p = occurs(fact.object, p_tokens)
    score = 0
    if subj_in_q and obj_in_p:
        score += 4
    if subj_in_p and obj_in_p:
        score += 2
    if subj_in_q or subj_in_p:
        score += 1
    return score


def extract_related_facts(kb: KnowledgeBase, q_tokens: Sequence[str],
                          p_tokens: Sequence[str], n_facts: int) -> list[ScoredFact]:
    """Top-n_facts facts by score, descending, ties broken by ascending id."""
    if n_facts < 1:
        raise DataError(f"n_facts must be >= 1, got {n_facts}")
    candidate_ids: set[int] = set()
    for token in set(q_tokens) | set(p_tokens):
        candidate_ids.update(kb.surface_index.get(token, ()))
    scored = []
    for fact_id in candidate_ids:
        score = score_fact(kb.facts[fact_id], q_tokens, p_tokens)
        if score > 0:
            scored.append(ScoredFact(fact_id, score))
    scored.sort(key=lambda sf: (-sf.score, sf.fact_id))
    return scored[:n_facts]


def resolve_facts(kb: KnowledgeBase, scored: Sequence[ScoredFact]) -> list[Fact]:
    return [kb.facts[sf.fact_id] for sf in scored]
