"""Closed grammar for the synthetic caption world.

Clause templates, their gold annotations, and a deterministic rule tagger
that re-derives the same annotations from raw token sequences. Keeping both
paths (template emission vs. token analysis) gives the evaluation side an
oracle that does not depend on how a caption was produced.

Tag schemes, coarse to fine:
  chunk  IOB2 over NP/VP/PP phrase structure (6 tags)
  pos    lexical categories (8 tags)
  dep    relation of each token to its head (13 labels)
  ccg    per-slot categorial supertags (12 tags)
"""

from __future__ import annotations

from dataclasses import dataclass, field


# ---------------------------------------------------------------------------
# lexicon
# ---------------------------------------------------------------------------

ANIMATE = "animate"
INANIMATE = "inanimate"
TRANSITIVE = "transitive"
INTRANSITIVE = "intransitive"

# the only morphology in the world: verb lemma -> progressive form
PROGRESSIVE = {
    "eat": "eating",
    "hold": "holding",
    "ride": "riding",
    "stand": "standing",
    "lie": "lying",
    "fly": "flying",
}
LEMMA_OF_FORM = {form: lemma for lemma, form in PROGRESSIVE.items()}


class LexiconError(ValueError):
    pass


@dataclass(frozen=True)
class Lexicon:
    """Word classes of the closed world."""

    nouns: tuple = ()
    colors: tuple = ()
    sizes: tuple = ()
    verbs: tuple = ()
    determiners: tuple = ("a", "the")
    prepositions: tuple = ("on", "in", "near", "by")
    copulas: tuple = ("is",)

    def __post_init__(self):
        seen = set()
        for lemma in self.all_lemmas():
            if lemma != lemma.lower():
                raise LexiconError(f"lemma {lemma!r} is not lower-case")
            if lemma in seen:
                raise LexiconError(f"duplicate lemma {lemma!r} across classes")
            seen.add(lemma)
        for lemma, _ in self.verbs:
            if lemma not in PROGRESSIVE:
                raise LexiconError(f"no progressive form for verb {lemma!r}")

    def all_lemmas(self):
        for lemma, _ in self.nouns:
            yield lemma
        yield from self.colors
        yield from self.sizes
        for lemma, _ in self.verbs:
            yield lemma
        yield from self.determiners
        yield from self.prepositions
        yield from self.copulas

    def animacy(self, noun):
        for lemma, kind in self.nouns:
            if lemma == noun:
                return kind
        raise LexiconError(f"unknown noun {noun!r}")

    def transitivity(self, verb):
        for lemma, kind in self.verbs:
            if lemma == verb:
                return kind
        raise LexiconError(f"unknown verb {verb!r}")

    @property
    def noun_lemmas(self):
        return tuple(n for n, _ in self.nouns)

    @property
    def verb_lemmas(self):
        return tuple(v for v, _ in self.verbs)

    @property
    def animate_nouns(self):
        return tuple(n for n, k in self.nouns if k == ANIMATE)


DEFAULT_LEXICON = Lexicon(
    nouns=(
        ("cat", ANIMATE), ("dog", ANIMATE), ("bird", ANIMATE),
        ("horse", ANIMATE), ("man", ANIMATE), ("woman", ANIMATE),
        ("child", ANIMATE),
        ("bus", INANIMATE), ("truck", INANIMATE), ("plane", INANIMATE),
        ("boat", INANIMATE), ("table", INANIMATE),
    ),
    colors=("black", "white", "brown", "red", "blue"),
    sizes=("big", "small"),
    verbs=(
        ("eat", TRANSITIVE), ("hold", TRANSITIVE), ("ride", TRANSITIVE),
        ("stand", INTRANSITIVE), ("lie", INTRANSITIVE), ("fly", INTRANSITIVE),
    ),
)

RELATIVIZER = "that"
CONJUNCTION = "and"

# closed set of prepositional adjuncts: (preposition, bare location noun)
ADJUNCTS = (("on", "table"), ("in", "park"), ("near", "tree"), ("by", "street"))

TAGSETS = ("chunk", "pos", "dep", "ccg")


def lemma_of(token):
    """Map a surface form back to its lemma (identity outside the verb table)."""
    return LEMMA_OF_FORM.get(token, token)


# ---------------------------------------------------------------------------
# part-of-speech lookup (context free in this world)
# ---------------------------------------------------------------------------

def pos_lookup(lexicon=DEFAULT_LEXICON):
    table = {}
    for det in lexicon.determiners:
        table[det] = "DET"
    for prep in lexicon.prepositions:
        table[prep] = "ADP"
    for cop in lexicon.copulas:
        table[cop] = "AUX"
    table[RELATIVIZER] = "PRON"
    table[CONJUNCTION] = "CCONJ"
    for noun, _ in lexicon.nouns:
        table[noun] = "NOUN"
    for _, loc in ADJUNCTS:
        table.setdefault(loc, "NOUN")
    for adj in lexicon.colors + lexicon.sizes:
        table[adj] = "ADJ"
    for form in PROGRESSIVE.values():
        table[form] = "VERB"
    return table


_DEFAULT_POS = pos_lookup()


def pos_tags(tokens, lexicon=None):
    table = _DEFAULT_POS if lexicon is None else pos_lookup(lexicon)
    return [table.get(t, "NOUN") for t in tokens]


def chunk_tags(tokens, lexicon=None):
    """IOB2 chunks from the part-of-speech sequence alone."""
    pos = pos_tags(tokens, lexicon)
    out = []
    prev = "O"
    for p in pos:
        if p == "DET":
            tag = "B-NP"
        elif p == "ADJ":
            tag = "I-NP" if prev in ("B-NP", "I-NP") else "O"
        elif p == "NOUN":
            tag = "I-NP" if prev in ("B-NP", "I-NP") else "B-NP"
        elif p == "AUX":
            tag = "B-VP"
        elif p == "VERB":
            tag = "I-VP" if prev in ("B-VP", "I-VP") else "B-VP"
        elif p == "ADP":
            tag = "B-PP"
        else:
            tag = "O"
        out.append(tag)
        prev = tag
    return out


# ccg categories used by the template slots
CCG = {
    "det": "NP/N",
    "adj_attr": "N/N",
    "adj_pred": "Sadj\\NP",
    "noun": "N",
    "verb_trans": "(S\\NP)/NP",
    "verb_intrans": "S\\NP",
    "aux": "(S\\NP)/(S\\NP)",
    "cop": "(S\\NP)/(Sadj\\NP)",
    "rel": "(N\\N)/(S\\NP)",
    "prep_verb": "((S\\NP)\\(S\\NP))/NP",
    "prep_noun": "(N\\N)/NP",
    "conj": "conj",
}

_CCG_FALLBACK = {
    "DET": CCG["det"], "ADJ": CCG["adj_attr"], "NOUN": CCG["noun"],
    "VERB": CCG["verb_intrans"], "AUX": CCG["aux"], "ADP": CCG["prep_verb"],
    "PRON": CCG["rel"], "CCONJ": CCG["conj"],
}


# ---------------------------------------------------------------------------
# clause templates
# ---------------------------------------------------------------------------

NP_ONLY = "np"
COPULAR = "copular"
PARTICIPIAL = "participial"
RELATIVE = "relative"
FINITE = "finite"

CLAUSE_SHAPES = (NP_ONLY, COPULAR, PARTICIPIAL, RELATIVE, FINITE)

ROOT = -1  # virtual head of the sentence root


@dataclass
class _Item:
    token: str
    pos: str
    chunk: str
    dep: str
    ccg: str
    head: int  # index within the clause, or ROOT


@dataclass
class Clause:
    """One entity description: token items plus the clause-root index."""

    items: list = field(default_factory=list)
    root: int = 0


def build_clause(entity, shape, mention_size, mention_color, det, adjunct,
                 lexicon=DEFAULT_LEXICON):
    """Assemble an annotated clause for one entity.

    `adjunct` is None or a (preposition, location-noun) pair; `det` is the
    determiner surface form. The caller decides which attributes are
    mentioned; the template only enforces slot order.
    """
    items = []

    def add(token, pos, chunk, dep, ccg, head):
        items.append(_Item(token, pos, chunk, dep, ccg, head))
        return len(items) - 1

    n_adjs = int(mention_size) + int(mention_color and shape != COPULAR)
    noun_i = 1 + n_adjs
    add(det, "DET", "B-NP", "det", CCG["det"], noun_i)
    if mention_size:
        add(entity.size, "ADJ", "I-NP", "amod", CCG["adj_attr"], noun_i)
    if mention_color and shape != COPULAR:
        add(entity.color, "ADJ", "I-NP", "amod", CCG["adj_attr"], noun_i)
    add(entity.category, "NOUN", "I-NP", "root", CCG["noun"], ROOT)
    root = noun_i
    verb_i = None

    if shape == COPULAR:
        adj_i = noun_i + 2
        add("is", "AUX", "B-VP", "cop", CCG["cop"], adj_i)
        add(entity.color, "ADJ", "O", "root", CCG["adj_pred"], ROOT)
        items[noun_i].dep, items[noun_i].head = "nsubj", adj_i
        root = adj_i
    elif shape in (PARTICIPIAL, RELATIVE, FINITE):
        verb, obj = entity.action
        form = PROGRESSIVE[verb]
        trans = lexicon.transitivity(verb) == TRANSITIVE
        vccg = CCG["verb_trans"] if trans else CCG["verb_intrans"]
        if shape == PARTICIPIAL:
            verb_i = add(form, "VERB", "B-VP", "acl", vccg, noun_i)
        elif shape == RELATIVE:
            verb_i = noun_i + 3
            add(RELATIVIZER, "PRON", "O", "nsubj", CCG["rel"], verb_i)
            add("is", "AUX", "B-VP", "aux", CCG["aux"], verb_i)
            add(form, "VERB", "I-VP", "acl", vccg, noun_i)
        else:  # finite main clause: the verb heads the sentence
            verb_i = noun_i + 2
            add("is", "AUX", "B-VP", "aux", CCG["aux"], verb_i)
            add(form, "VERB", "I-VP", "root", vccg, ROOT)
            items[noun_i].dep, items[noun_i].head = "nsubj", verb_i
            root = verb_i
        if obj is not None:
            obj_i = len(items) + 1
            add("a", "DET", "B-NP", "det", CCG["det"], obj_i)
            add(obj, "NOUN", "I-NP", "obj", CCG["noun"], verb_i)

    if adjunct is not None and shape != COPULAR:
        prep, loc = adjunct
        to_verb = verb_i is not None
        attach = verb_i if to_verb else noun_i
        loc_i = len(items) + 2
        add(prep, "ADP", "B-PP", "case",
            CCG["prep_verb"] if to_verb else CCG["prep_noun"], loc_i)
        add("a", "DET", "B-NP", "det", CCG["det"], loc_i)
        add(loc, "NOUN", "I-NP", "obl" if to_verb else "nmod", CCG["noun"],
            attach)

    return Clause(items=items, root=root)


def assemble_sentence(clauses):
    """Join clauses with the conjunction; first clause root heads the tree.

    Returns (tokens, tags dict, dep_arcs) with absolute token indices.
    """
    tokens, pos, chunk, dep, ccg = [], [], [], [], []
    arcs = []
    sent_root = None
    for k, clause in enumerate(clauses):
        offset = len(tokens)
        if k > 0:
            conj_root = offset + 1 + clause.root
            tokens.append(CONJUNCTION)
            pos.append("CCONJ")
            chunk.append("O")
            dep.append("cc")
            ccg.append(CCG["conj"])
            arcs.append((conj_root, offset, "cc"))
            offset += 1
        for i, item in enumerate(clause.items):
            tokens.append(item.token)
            pos.append(item.pos)
            chunk.append(item.chunk)
            ccg.append(item.ccg)
            if item.head == ROOT:
                if sent_root is None:
                    sent_root = offset + i
                    dep.append("root")
                    arcs.append((ROOT, sent_root, "root"))
                else:
                    dep.append("conj")
                    arcs.append((sent_root, offset + i, "conj"))
            else:
                dep.append(item.dep)
                arcs.append((offset + item.head, offset + i, item.dep))
    tags = {"pos": pos, "chunk": chunk, "dep": dep, "ccg": ccg}
    return tokens, tags, arcs


# ---------------------------------------------------------------------------
# rule-based analysis of raw token sequences
# ---------------------------------------------------------------------------

@dataclass
class Analysis:
    tokens: list
    pos: list
    chunk: list
    dep: list
    ccg: list
    arcs: list
    parsed: bool  # False when the sequence falls outside the grammar


def analyze(tokens, lexicon=None):
    """Deterministic tagger/parser for arbitrary token lists.

    Reproduces the template annotations exactly on grammar output and
    degrades to per-word defaults elsewhere (`parsed` turns False).
    """
    lex = lexicon or DEFAULT_LEXICON
    pos = pos_tags(tokens, lexicon)
    chunk = chunk_tags(tokens, lexicon)
    n = len(tokens)
    dep = ["dep"] * n
    ccg = [_CCG_FALLBACK[p] for p in pos]
    arcs = []
    parsed = True

    # clause spans split on the conjunction
    spans = []
    start = 0
    conj_pos = []
    for i, t in enumerate(tokens):
        if t == CONJUNCTION:
            spans.append((start, i))
            conj_pos.append(i)
            start = i + 1
    spans.append((start, n))

    sent_root = None
    roots = []
    for lo, hi in spans:
        root = _parse_clause(tokens, pos, dep, ccg, arcs, lo, hi, lex)
        if root is None:
            parsed = False
            roots.append(None)
        else:
            roots.append(root)
    for k, root in enumerate(roots):
        if root is None:
            continue
        if sent_root is None:
            sent_root = root
            dep[root] = "root"
            arcs.append((ROOT, root, "root"))
        else:
            dep[root] = "conj"
            arcs.append((sent_root, root, "conj"))
    for k, ci in enumerate(conj_pos):
        head = roots[k + 1] if k + 1 < len(roots) and roots[k + 1] is not None else None
        dep[ci] = "cc"
        if head is not None:
            arcs.append((head, ci, "cc"))
    if not tokens:
        parsed = False
    return Analysis(list(tokens), pos, chunk, dep, ccg, arcs, parsed)


def _parse_clause(tokens, pos, dep, ccg, arcs, lo, hi, lex):
    """Parse one clause span in place; returns the clause root or None."""
    i = lo
    if i < hi and pos[i] == "DET":
        det_i = i
        i += 1
    else:
        return None
    adjs = []
    while i < hi and pos[i] == "ADJ":
        adjs.append(i)
        i += 1
    if i >= hi or pos[i] != "NOUN":
        return None
    noun_i = i
    i += 1
    dep[det_i] = "det"
    arcs.append((noun_i, det_i, "det"))
    for a in adjs:
        dep[a] = "amod"
        arcs.append((noun_i, a, "amod"))
    root = noun_i
    verb_i = None

    if i < hi and tokens[i] == RELATIVIZER and i + 2 < hi \
            and pos[i + 1] == "AUX" and pos[i + 2] == "VERB":
        verb_i = i + 2
        dep[i] = "nsubj"
        arcs.append((verb_i, i, "nsubj"))
        dep[i + 1] = "aux"
        ccg[i + 1] = CCG["aux"]
        arcs.append((verb_i, i + 1, "aux"))
        dep[verb_i] = "acl"
        arcs.append((noun_i, verb_i, "acl"))
        i += 3
    elif i < hi and pos[i] == "AUX" and i + 1 < hi and pos[i + 1] == "VERB":
        verb_i = i + 1
        dep[i] = "aux"
        ccg[i] = CCG["aux"]
        arcs.append((verb_i, i, "aux"))
        dep[noun_i] = "nsubj"
        arcs.append((verb_i, noun_i, "nsubj"))
        root = verb_i
        i += 2
    elif i < hi and pos[i] == "AUX" and i + 1 < hi and pos[i + 1] == "ADJ":
        adj_i = i + 1
        dep[i] = "cop"
        ccg[i] = CCG["cop"]
        arcs.append((adj_i, i, "cop"))
        dep[noun_i] = "nsubj"
        arcs.append((adj_i, noun_i, "nsubj"))
        ccg[adj_i] = CCG["adj_pred"]
        root = adj_i
        i += 2
    elif i < hi and pos[i] == "VERB":
        verb_i = i
        dep[verb_i] = "acl"
        arcs.append((noun_i, verb_i, "acl"))
        i += 1

    if verb_i is not None:
        verb = lemma_of(tokens[verb_i])
        try:
            trans = lex.transitivity(verb) == TRANSITIVE
        except LexiconError:
            trans = False
        ccg[verb_i] = CCG["verb_trans"] if trans else CCG["verb_intrans"]
        if i + 1 < hi and pos[i] == "DET" and pos[i + 1] == "NOUN":
            dep[i] = "det"
            arcs.append((i + 1, i, "det"))
            dep[i + 1] = "obj"
            arcs.append((verb_i, i + 1, "obj"))
            i += 2

    if i < hi and pos[i] == "ADP" and i + 2 < hi and pos[i + 1] == "DET" \
            and pos[i + 2] == "NOUN":
        to_verb = verb_i is not None
        attach = verb_i if to_verb else noun_i
        loc_i = i + 2
        dep[i] = "case"
        ccg[i] = CCG["prep_verb"] if to_verb else CCG["prep_noun"]
        arcs.append((loc_i, i, "case"))
        dep[i + 1] = "det"
        arcs.append((loc_i, i + 1, "det"))
        dep[loc_i] = "obl" if to_verb else "nmod"
        arcs.append((attach, loc_i, dep[loc_i]))
        i += 3

    if i != hi:
        return None
    return root


def oracle_tags(tokens, tagset, lexicon=None):
    """Gold tags for a token sequence under one tag scheme."""
    if tagset == "idle":
        return ["<idle>"] * len(tokens)
    if tagset == "pos":
        return pos_tags(tokens, lexicon)
    if tagset == "chunk":
        return chunk_tags(tokens, lexicon)
    analysis = analyze(tokens, lexicon)
    if tagset == "dep":
        return analysis.dep
    if tagset == "ccg":
        return analysis.ccg
    raise ValueError(f"unknown tagset {tagset!r}")


def all_tags(tagset, lexicon=None):
    """Tag inventory of a scheme (for vocabulary construction)."""
    lex = lexicon or DEFAULT_LEXICON
    if tagset == "idle":
        return ["<idle>"]
    if tagset == "pos":
        return sorted(set(pos_lookup(lex).values()))
    if tagset == "chunk":
        return ["B-NP", "I-NP", "B-VP", "I-VP", "B-PP", "O"]
    if tagset == "dep":
        return ["acl", "amod", "aux", "case", "cc", "conj", "cop", "dep",
                "det", "nmod", "nsubj", "obj", "obl", "root"]
    if tagset == "ccg":
        return sorted(set(CCG.values()))
    raise ValueError(f"unknown tagset {tagset!r}")


# ---------------------------------------------------------------------------
# pattern matcher for concept-pair arcs
# ---------------------------------------------------------------------------

def match_arcs(tokens, lexicon=None):
    """Scan for the amod / acl / nsubj patterns used by pair matching.

    Works on any token list, including malformed model output: adjacent
    adjectives modify the next noun; a noun directly followed by a verb (or
    via "that is") takes it as a participial/relative modifier; "noun is
    verb" marks a finite subject.
    """
    pos = pos_tags(tokens, lexicon)
    n = len(tokens)
    arcs = []
    for i in range(n):
        if pos[i] == "ADJ":
            j = i + 1
            while j < n and pos[j] == "ADJ":
                j += 1
            if j < n and pos[j] == "NOUN":
                arcs.append((j, i, "amod"))
        elif pos[i] == "NOUN":
            if i + 1 < n and pos[i + 1] == "VERB":
                arcs.append((i, i + 1, "acl"))
            elif (i + 3 < n and tokens[i + 1] == RELATIVIZER
                  and pos[i + 2] == "AUX" and pos[i + 3] == "VERB"):
                arcs.append((i, i + 3, "acl"))
            elif i + 2 < n and pos[i + 1] == "AUX" and pos[i + 2] == "VERB":
                arcs.append((i + 2, i, "nsubj"))
    return arcs


def is_tree(arcs, n_tokens):
    """Check dep arcs form a single-rooted tree covering all tokens."""
    heads = {}
    root_count = 0
    for head, dependent, _ in arcs:
        if dependent in heads:
            return False
        heads[dependent] = head
        if head == ROOT:
            root_count += 1
    if root_count != 1 or len(heads) != n_tokens:
        return False
    for start in range(n_tokens):
        seen = set()
        node = start
        while node != ROOT:
            if node in seen or node not in heads:
                return False
            seen.add(node)
            node = heads[node]
    return True
