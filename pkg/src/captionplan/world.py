"""Synthetic scenes with grammar-generated multi-reference captions.

A scene is a handful of attributed entities; each reference is a clause per
entity rendered from the templates in `grammar`, so every caption carries
exact token-aligned tags and dependency arcs. Region-style feature matrices
(one-hot attribute blocks plus Gaussian noise) stand in for image features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import grammar
from .grammar import (
    ADJUNCTS, ANIMATE, DEFAULT_LEXICON, Lexicon, TRANSITIVE,
    CLAUSE_SHAPES, NP_ONLY, COPULAR, PARTICIPIAL, RELATIVE, FINITE,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    """Knobs for scene sampling, rendering and feature synthesis."""

    max_entities: int = 2
    p_extra_entity: float = 0.35
    p_color: float = 0.7
    p_size: float = 0.4
    p_action: float = 0.7
    distinct_categories: bool = True
    # rendering
    p_mention: float = 0.7
    p_copular: float = 0.2
    p_pp: float = 0.35
    p_the: float = 0.15
    action_shape_weights: tuple = (0.4, 0.3, 0.3)  # participial, relative, finite
    # features
    n_regions: int = 6
    noise_sigma: float = 0.1

    def validate(self):
        probs = {
            "p_extra_entity": self.p_extra_entity, "p_color": self.p_color,
            "p_size": self.p_size, "p_action": self.p_action,
            "p_mention": self.p_mention, "p_copular": self.p_copular,
            "p_pp": self.p_pp, "p_the": self.p_the,
        }
        for name, p in probs.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name}={p} outside [0, 1]")
        if not 1 <= self.max_entities <= 3:
            raise ConfigError("max_entities must be in 1..3")
        if self.n_regions < self.max_entities:
            raise ConfigError("n_regions must cover max_entities")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if len(self.action_shape_weights) != 3 or min(self.action_shape_weights) < 0:
            raise ConfigError("action_shape_weights needs 3 nonnegative entries")
        return self


@dataclass(frozen=True)
class Entity:
    category: str
    color: str | None = None
    size: str | None = None
    action: tuple | None = None  # (verb lemma, object noun or None)

    def animacy(self, lexicon=DEFAULT_LEXICON):
        return lexicon.animacy(self.category)


@dataclass(frozen=True)
class Scene:
    id: int
    entities: tuple
    rng_seed: int


@dataclass
class Reference:
    tokens: list
    tags: dict            # tagset name -> aligned tag list
    dep_arcs: list        # (head index, dependent index, label)
    source_template: str

    def validate(self):
        for name, tag_list in self.tags.items():
            if len(tag_list) != len(self.tokens):
                raise ValueError(f"{name} tags misaligned with tokens")
        if not grammar.is_tree(self.dep_arcs, len(self.tokens)):
            raise ValueError("dep arcs are not a single-rooted tree")
        return self


@dataclass
class FeatureMatrix:
    rows: np.ndarray  # (R, d)

    @property
    def n_regions(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]


@dataclass
class CorpusItem:
    scene: Scene
    references: list
    features: FeatureMatrix


# ---------------------------------------------------------------------------
# scene sampling
# ---------------------------------------------------------------------------

def generate_scene(rng, lexicon=DEFAULT_LEXICON, config=WorldConfig(),
                   scene_id=0, rng_seed=0):
    """Sample one scene; a pure function of the generator state."""
    config.validate()
    if not (lexicon.nouns and lexicon.colors and lexicon.sizes and lexicon.verbs):
        raise ConfigError("lexicon must populate every word class")
    count = 1
    while count < config.max_entities and rng.random() < config.p_extra_entity:
        count += 1
    nouns = list(lexicon.noun_lemmas)
    if config.distinct_categories:
        cats = [nouns[k] for k in rng.choice(len(nouns), size=count, replace=False)]
    else:
        cats = [nouns[k] for k in rng.integers(0, len(nouns), size=count)]
    entities = []
    for cat in cats:
        color = lexicon.colors[rng.integers(len(lexicon.colors))] \
            if rng.random() < config.p_color else None
        size = lexicon.sizes[rng.integers(len(lexicon.sizes))] \
            if rng.random() < config.p_size else None
        action = None
        if lexicon.animacy(cat) == ANIMATE and rng.random() < config.p_action:
            verb = lexicon.verb_lemmas[rng.integers(len(lexicon.verb_lemmas))]
            obj = None
            if lexicon.transitivity(verb) == TRANSITIVE:
                pool = [n for n in nouns if n != cat]
                obj = pool[rng.integers(len(pool))]
            action = (verb, obj)
        entities.append(Entity(cat, color, size, action))
    return Scene(id=scene_id, entities=tuple(entities), rng_seed=rng_seed)


# ---------------------------------------------------------------------------
# reference rendering
# ---------------------------------------------------------------------------

def render_references(scene, rng, n_refs, config=WorldConfig(),
                      lexicon=DEFAULT_LEXICON):
    """Render n_refs independently varied captions for a scene.

    Every reference names each entity's category; color, size and action are
    mentioned independently with probability `p_mention` per reference.
    """
    if n_refs < 1:
        raise ValueError("n_refs must be >= 1")
    refs = []
    for _ in range(n_refs):
        clauses = []
        shapes = []
        for entity in scene.entities:
            m_color = entity.color is not None and rng.random() < config.p_mention
            m_size = entity.size is not None and rng.random() < config.p_mention
            m_action = entity.action is not None and rng.random() < config.p_mention
            if m_action:
                w = np.asarray(config.action_shape_weights, dtype=float)
                shape = (PARTICIPIAL, RELATIVE, FINITE)[
                    rng.choice(3, p=w / w.sum())]
            elif m_color and not m_size and rng.random() < config.p_copular:
                shape = COPULAR
            else:
                shape = NP_ONLY
            det = "the" if rng.random() < config.p_the else "a"
            adjunct = None
            if shape != COPULAR and rng.random() < config.p_pp:
                adjunct = ADJUNCTS[rng.integers(len(ADJUNCTS))]
            clauses.append(grammar.build_clause(
                entity, shape, m_size, m_color, det, adjunct, lexicon))
            shapes.append(shape)
        tokens, tags, arcs = grammar.assemble_sentence(clauses)
        refs.append(Reference(tokens, tags, arcs, "+".join(shapes)).validate())
    return refs


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def feature_layout(lexicon=DEFAULT_LEXICON):
    """Column layout of the concatenated one-hot blocks."""
    blocks = [
        ("category", lexicon.noun_lemmas),
        ("color", lexicon.colors),
        ("size", lexicon.sizes),
        ("verb", lexicon.verb_lemmas),
        ("object", lexicon.noun_lemmas),
    ]
    offsets = {}
    pos = 0
    for name, values in blocks:
        offsets[name] = (pos, tuple(values))
        pos += len(values)
    return offsets, pos


def scene_features(scene, config=WorldConfig(), rng=None,
                   lexicon=DEFAULT_LEXICON):
    """One-hot attribute rows per entity, zero padding rows, plus noise."""
    offsets, dim = feature_layout(lexicon)
    rows = np.zeros((config.n_regions, dim))

    def set_onehot(row, block, value):
        pos, values = offsets[block]
        rows[row, pos + values.index(value)] = 1.0

    for r, entity in enumerate(scene.entities):
        set_onehot(r, "category", entity.category)
        if entity.color is not None:
            set_onehot(r, "color", entity.color)
        if entity.size is not None:
            set_onehot(r, "size", entity.size)
        if entity.action is not None:
            verb, obj = entity.action
            set_onehot(r, "verb", verb)
            if obj is not None:
                set_onehot(r, "object", obj)
    if config.noise_sigma > 0 and rng is not None:
        rows = rows + rng.normal(0.0, config.noise_sigma, rows.shape)
    return FeatureMatrix(rows=rows)


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

def make_corpus(n_scenes, seed, config=WorldConfig(), lexicon=DEFAULT_LEXICON,
                n_refs=5):
    """Generate a full corpus; each scene derives its own child generator."""
    config.validate()
    items = []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        scene = generate_scene(rng, lexicon, config, scene_id=i, rng_seed=seed)
        refs = render_references(scene, rng, n_refs, config, lexicon)
        feats = scene_features(scene, config, rng, lexicon)
        items.append(CorpusItem(scene, refs, feats))
    return items


def write_corpus(items, path):
    """Line-delimited records; floats keep full repr precision."""
    with open(path, "w") as f:
        for item in items:
            rec = {
                "id": item.scene.id,
                "rng_seed": item.scene.rng_seed,
                "entities": [asdict(e) for e in item.scene.entities],
                "n_regions": item.features.n_regions,
                "feature_dim": item.features.dim,
                "features": [float(x) for x in item.features.rows.reshape(-1)],
                "references": [
                    {
                        "tokens": r.tokens,
                        "pos": r.tags["pos"],
                        "chunk": r.tags["chunk"],
                        "dep": r.tags["dep"],
                        "ccg": r.tags["ccg"],
                        "dep_arcs": [list(a) for a in r.dep_arcs],
                        "template": r.source_template,
                    }
                    for r in item.references
                ],
            }
            f.write(json.dumps(rec) + "\n")


def read_corpus(path):
    items = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            entities = tuple(
                Entity(e["category"], e["color"], e["size"],
                       tuple(e["action"]) if e["action"] else None)
                for e in rec["entities"]
            )
            scene = Scene(rec["id"], entities, rec["rng_seed"])
            refs = [
                Reference(
                    r["tokens"],
                    {"pos": r["pos"], "chunk": r["chunk"],
                     "dep": r["dep"], "ccg": r["ccg"]},
                    [tuple(a) for a in r["dep_arcs"]],
                    r["template"],
                )
                for r in rec["references"]
            ]
            rows = np.array(rec["features"]).reshape(
                rec["n_regions"], rec["feature_dim"])
            items.append(CorpusItem(scene, refs, FeatureMatrix(rows)))
    return items
