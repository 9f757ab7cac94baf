"""Train/val/test partitions with paradigmatic gaps over held-out pairs.

A concept pair is an (adjective, noun) or (verb, noun) combination. A pair
occurs in a caption when both lemmas are present and linked by the required
dependency pattern: `amod` for adjectives; `acl` (participial / relative) or
an inverted finite `nsubj` for verbs. Scenes whose references realize any
active pair are banished to val/test, leaving a gap in the training set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import grammar
from .grammar import DEFAULT_LEXICON, TRANSITIVE, lemma_of
from .world import Reference


@dataclass(frozen=True)
class ConceptPair:
    dependent: str  # adjective or verb lemma
    noun: str
    kind: str       # "adj" or "verb"

    def category(self, lexicon=DEFAULT_LEXICON):
        """Evaluation cell: color/size x animate/inanimate, or transitivity."""
        if self.kind == "adj":
            attr = "color" if self.dependent in lexicon.colors else "size"
            return f"{attr}-{lexicon.animacy(self.noun)}"
        kind = lexicon.transitivity(self.dependent)
        return f"verb-{kind}"

    @property
    def name(self):
        return f"{self.dependent} {self.noun}"


def make_pair(dependent, noun, lexicon=DEFAULT_LEXICON):
    if dependent in lexicon.colors or dependent in lexicon.sizes:
        kind = "adj"
    elif dependent in lexicon.verb_lemmas:
        kind = "verb"
    else:
        raise ValueError(f"{dependent!r} is neither adjective nor verb")
    if noun not in lexicon.noun_lemmas:
        raise ValueError(f"{noun!r} is not a lexicon noun")
    return ConceptPair(dependent, noun, kind)


def _pairs(*names):
    return tuple(make_pair(*n.split()) for n in names)


# the four six-pair held-out sets used throughout
DEFAULT_HELDOUT_SETS = (
    _pairs("black cat", "big bird", "red bus", "small plane", "eat man",
           "lie woman"),
    _pairs("brown dog", "small cat", "white truck", "big plane", "ride woman",
           "fly bird"),
    _pairs("white horse", "big cat", "blue bus", "small table", "hold child",
           "stand bird"),
    _pairs("black bird", "small dog", "white boat", "big truck", "eat horse",
           "stand child"),
)


@dataclass(frozen=True)
class SplitSpec:
    heldout_sets: tuple = DEFAULT_HELDOUT_SETS
    active_set: int = 0

    def __post_init__(self):
        seen = set()
        for pairs in self.heldout_sets:
            for p in pairs:
                if p in seen:
                    raise ValueError(f"pair {p.name!r} in two held-out sets")
                seen.add(p)
        if not 0 <= self.active_set < len(self.heldout_sets):
            raise ValueError("active_set out of range")

    @property
    def active_pairs(self):
        return self.heldout_sets[self.active_set]


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    spec: SplitSpec
    warnings: list
    seed: int = 0
    ratios: tuple = (0.7, 0.15, 0.15)


# ---------------------------------------------------------------------------
# pair occurrence
# ---------------------------------------------------------------------------

def _occurs_in_arcs(tokens, arcs, pair):
    for head, dep, label in arcs:
        if head < 0:
            continue
        if pair.kind == "adj":
            if label == "amod" and tokens[dep] == pair.dependent \
                    and tokens[head] == pair.noun:
                return True
        else:
            if label == "acl" and tokens[head] == pair.noun \
                    and lemma_of(tokens[dep]) == pair.dependent:
                return True
            if label == "nsubj" and tokens[dep] == pair.noun \
                    and lemma_of(tokens[head]) == pair.dependent:
                return True
    return False


def pair_occurs(reference, pair, lexicon=None):
    """True when the pair's dependency pattern is realized in the caption.

    Accepts a Reference (gold arcs) or a raw token list (arcs re-derived by
    the pattern matcher). Verb forms are lemmatized before comparison.
    """
    if isinstance(reference, Reference):
        tokens, arcs = reference.tokens, reference.dep_arcs
    else:
        tokens = list(reference)
        arcs = grammar.match_arcs(tokens, lexicon)
    if pair.noun not in tokens:
        return False
    if pair.kind == "adj" and pair.dependent not in tokens:
        return False
    return _occurs_in_arcs(tokens, arcs, pair)


def scene_pair_mask(references, pairs, lexicon=None):
    """Per-pair flags: does any reference of the scene realize the pair?"""
    return [any(pair_occurs(r, p, lexicon) for r in references) for p in pairs]


# ---------------------------------------------------------------------------
# split construction
# ---------------------------------------------------------------------------

def build_splits(corpus, spec=SplitSpec(), ratios=(0.7, 0.15, 0.15), seed=0,
                 lexicon=None):
    """Partition a corpus so the training side never realizes an active pair.

    Scenes with at least one reference realizing any active pair go to
    val/test, split by the val:test ratio renormalized over those scenes;
    everything else trains. With an empty active list the corpus is split
    at random by the raw ratios instead.
    """
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three nonnegative numbers summing to 1")
    if not corpus:
        raise ValueError("corpus is empty")
    rng = np.random.default_rng(seed)
    pairs = list(spec.active_pairs)
    warnings = []

    if not pairs:
        ids = [item.scene.id for item in corpus]
        perm = rng.permutation(len(ids))
        n_val = int(round(ratios[1] * len(ids)))
        n_test = int(round(ratios[2] * len(ids)))
        val = sorted(ids[i] for i in perm[:n_val])
        test = sorted(ids[i] for i in perm[n_val:n_val + n_test])
        chosen = set(val) | set(test)
        train = [i for i in ids if i not in chosen]
        return DatasetSplit(train, val, test, spec, warnings, seed, tuple(ratios))

    gap_ids = []
    train_ids = []
    train_tokens = set()
    hits = {p: 0 for p in pairs}
    for item in corpus:
        mask = scene_pair_mask(item.references, pairs, lexicon)
        if any(mask):
            gap_ids.append(item.scene.id)
            for p, hit in zip(pairs, mask):
                hits[p] += hit
        else:
            train_ids.append(item.scene.id)
            for r in item.references:
                train_tokens.update(lemma_of(t) for t in r.tokens)
    for p, n in hits.items():
        if n == 0:
            warnings.append(f"held-out pair '{p.name}' never occurs in the corpus")

    # each held-out lemma must stay learnable from other combinations
    for p in pairs:
        for lemma in (p.dependent, p.noun):
            if lemma not in train_tokens:
                warnings.append(
                    f"held-out lemma '{lemma}' unseen in training references")

    perm = rng.permutation(len(gap_ids))
    val_frac = ratios[1] / (ratios[1] + ratios[2])
    n_val = int(round(val_frac * len(gap_ids)))
    val = sorted(gap_ids[i] for i in perm[:n_val])
    test = sorted(gap_ids[i] for i in perm[n_val:])
    return DatasetSplit(train_ids, val, test, spec, warnings, seed, tuple(ratios))


# ---------------------------------------------------------------------------
# manifest io
# ---------------------------------------------------------------------------

def write_split(split, path):
    with open(path, "w") as f:
        header = {
            "heldout_sets": [[p.name for p in pairs]
                             for pairs in split.spec.heldout_sets],
            "active_set": split.spec.active_set,
            "ratios": list(split.ratios),
            "seed": split.seed,
            "warnings": split.warnings,
        }
        f.write(json.dumps(header) + "\n")
        for label in ("train", "val", "test"):
            for sid in getattr(split, label):
                f.write(json.dumps({"id": sid, "partition": label}) + "\n")


def read_split(path):
    with open(path) as f:
        header = json.loads(f.readline())
        parts = {"train": [], "val": [], "test": []}
        for line in f:
            rec = json.loads(line)
            parts[rec["partition"]].append(rec["id"])
    spec = SplitSpec(
        heldout_sets=tuple(tuple(make_pair(*name.split()) for name in pairs)
                           for pairs in header["heldout_sets"]),
        active_set=header["active_set"],
    )
    return DatasetSplit(parts["train"], parts["val"], parts["test"], spec,
                        header["warnings"], header["seed"],
                        tuple(header["ratios"]))
