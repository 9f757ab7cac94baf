"""Metrics: pair recall, BLEU, tag accuracy, diversity, category tables.

All functions are pure; reports serialize deterministically. Generated
captions are scored on their stripped word sequences; dependency arcs on
generated text come from the same pattern matcher used for split building.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, asdict

from . import grammar
from .splits import pair_occurs

TTR_SEGMENT = 100  # tokens per segment for type/token ratios


class UndefinedRecall(ValueError):
    pass


class NotApplicable(ValueError):
    pass


@dataclass
class Generated:
    """One decoded caption after stripping."""

    tokens: list
    tags: list | None = None
    wellformed: bool = True
    logprob: float = 0.0
    rerank_score: float | None = None


# ---------------------------------------------------------------------------
# pair recall
# ---------------------------------------------------------------------------

def recall_at_k(gens, pair, k, lexicon=None):
    """Fraction of scenes whose top-k captions realize the pair.

    `gens` maps scene id -> ranked list of Generated; the caller restricts
    it to the pair's evaluation subset beforehand.
    """
    if not gens:
        raise UndefinedRecall(f"no scenes to evaluate for pair '{pair.name}'")
    hit = 0
    for captions in gens.values():
        hit += any(pair_occurs(c.tokens, pair, lexicon) for c in captions[:k])
    return hit / len(gens)


def category_breakdown(per_pair_recalls):
    """Unweighted mean recall per category cell; empty cells stay absent."""
    cells = {}
    for pair, recall in per_pair_recalls.items():
        cells.setdefault(pair.category(), []).append(recall)
    return {cat: sum(v) / len(v) for cat, v in sorted(cells.items())}


def min_importance_curve(gens, references, pair, k, lexicon=None):
    """Recall restricted to scenes where >= j references realize the pair.

    Importance of a scene is the number of its references containing the
    pair; the curve runs j = 1 .. max reference count. Levels with no
    qualifying scene are omitted.
    """
    importance = {}
    for sid in gens:
        refs = references[sid]
        importance[sid] = sum(pair_occurs(r, pair, lexicon) for r in refs)
    n_refs = max((len(references[sid]) for sid in gens), default=0)
    curve = []
    for j in range(1, n_refs + 1):
        subset = {sid: caps for sid, caps in gens.items() if importance[sid] >= j}
        if not subset:
            continue
        curve.append((j, recall_at_k(subset, pair, k, lexicon)))
    return curve


# ---------------------------------------------------------------------------
# tag accuracy
# ---------------------------------------------------------------------------

def tag_accuracy(gens, tagset, approach, lexicon=None):
    """Fraction of captions whose tag sequence equals the oracle tags.

    Sequence-level and exact: the generated tags must match the rule
    tagger's output on the caption's own stripped tokens.
    """
    if approach not in ("sequential", "interleave"):
        raise NotApplicable(f"tag accuracy undefined for {approach!r}")
    total = correct = 0
    for captions in gens.values():
        for cap in captions:
            total += 1
            gold = grammar.oracle_tags(cap.tokens, tagset, lexicon)
            correct += cap.tags == gold
    if total == 0:
        raise UndefinedRecall("no generated captions")
    return correct / total


def wellformed_fraction(gens):
    flags = [c.wellformed for caps in gens.values() for c in caps]
    return sum(flags) / len(flags) if flags else 0.0


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu(candidates, references, max_n=4):
    """Corpus BLEU-4 in [0, 100] with brevity penalty.

    Precisions for n > 1 are add-one smoothed on both numerator and
    denominator, which leaves perfect matches at exactly 1.0 (so a corpus
    identical to its references scores 100).
    """
    if len(candidates) != len(references):
        raise ValueError("one reference list per candidate required")
    cand_len = ref_len = 0
    matches = [0] * max_n
    totals = [0] * max_n
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        if refs:
            ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = Counter(_ngrams(cand, n))
            best = Counter()
            for ref in refs:
                rc = Counter(_ngrams(ref, n))
                for g in counts:
                    best[g] = max(best[g], rc[g])
            matches[n - 1] += sum(min(c, best[g]) for g, c in counts.items())
            totals[n - 1] += sum(counts.values())
    if cand_len == 0 or totals[0] == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        m, t = matches[n - 1], totals[n - 1]
        if n > 1:
            m, t = m + 1, t + 1
        if m == 0:
            return 0.0
        log_sum += math.log(m / t) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_sum)


# ---------------------------------------------------------------------------
# diversity
# ---------------------------------------------------------------------------

def _segment_ttr(tokens, n):
    grams = _ngrams(tokens, n)
    if not grams:
        return None
    seg_len = TTR_SEGMENT
    segments = [grams[i:i + seg_len] for i in range(0, len(grams), seg_len)]
    if len(segments) > 1 and len(segments[-1]) < seg_len:
        segments = segments[:-1]  # drop the trailing partial segment
    ratios = [len(set(s)) / len(s) for s in segments]
    return sum(ratios) / len(ratios)


CONTENT_POS = ("NOUN", "VERB", "ADJ")


def diversity_metrics(gen_captions, train_captions, references, lexicon=None):
    """Diversity block over one caption per scene.

    gen_captions: list of token lists, aligned with `references` (list of
    per-scene reference token lists). train_captions: all training caption
    token lists, for novelty and coverage.
    """
    all_tokens = [t for cap in gen_captions for t in cap]
    types = set(all_tokens)
    train_strings = {" ".join(c) for c in train_captions}
    train_types = {t for c in train_captions for t in c}
    novel = [" ".join(c) not in train_strings for c in gen_captions]

    def content(tokens):
        pos = grammar.pos_tags(tokens, lexicon)
        return {t for t, p in zip(tokens, pos) if p in CONTENT_POS}

    local = []
    for cap, refs in zip(gen_captions, references):
        ref_content = set()
        for r in refs:
            ref_content |= content(r)
        if ref_content:
            local.append(len(content(cap) & ref_content) / len(ref_content))
    return {
        "asl": sum(len(c) for c in gen_captions) / max(len(gen_captions), 1),
        "types": len(types),
        "ttr1": _segment_ttr(all_tokens, 1),
        "ttr2": _segment_ttr(all_tokens, 2),
        "pct_novel": 100.0 * sum(novel) / max(len(novel), 1),
        "coverage": len(types & train_types) / max(len(train_types), 1),
        "local5": sum(local) / max(len(local), 1),
    }


# ---------------------------------------------------------------------------
# report container
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    approach: str
    tagset: str
    backend: str
    seed: int
    heldout_set: int
    split: str
    recall_k: int
    per_pair_recall: dict = field(default_factory=dict)   # pair name -> recall
    mean_recall: float | None = None
    category_table: dict = field(default_factory=dict)
    importance_curve: dict = field(default_factory=dict)  # pair name -> [(j, r)]
    bleu: float = 0.0
    tag_accuracy: float | None = None
    wellformed: float | None = None
    diversity: dict = field(default_factory=dict)
    retrieval: dict | None = None

    def to_dict(self):
        return asdict(self)

    def validate(self):
        for name, r in self.per_pair_recall.items():
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"recall for {name} outside [0, 1]")
        if self.mean_recall is not None and not math.isfinite(self.mean_recall):
            raise ValueError("non-finite mean recall")
        return self
