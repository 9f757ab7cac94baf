"""Symbol-stream codecs for the five caption-planning regimes.

One joint vocabulary covers words, syntactic tags and control symbols; tags
are ordinary output symbols carrying a TAG role. Planning approaches differ
only in how (tokens, tags) are laid out in the target stream:

  standard     <s> w1 .. wT </s>
  sequential   <s> t1 .. tT w1 .. wT </s>
  interleave   <s> t1 w1 t2 w2 .. tT wT </s>
  multitask    two streams, <T> t1 .. tT </s> and <S> w1 .. wT </s>

The idle tag set replaces every tag with the placeholder <idle>.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import grammar

WORD = "word"
TAG = "tag"
CONTROL = "control"

PAD, BOS, EOS, UNK, BOS_WORDS, BOS_TAGS, IDLE = (
    "<pad>", "<s>", "</s>", "<unk>", "<S>", "<T>", "<idle>")
CONTROLS = (PAD, BOS, EOS, UNK, BOS_WORDS, BOS_TAGS, IDLE)

APPROACHES = ("standard", "sequential", "interleave", "multitask")
STREAM_KINDS = ("standard", "sequential", "interleave",
                "multitask-words", "multitask-tags")
TAGSETS = ("pos", "dep", "chunk", "ccg", "idle", "none")


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Dense bijection symbol <-> id with a role per id."""

    symbols: tuple
    roles: tuple

    def __post_init__(self):
        object.__setattr__(self, "_index",
                           {s: i for i, s in enumerate(self.symbols)})

    def __len__(self):
        return len(self.symbols)

    def id(self, symbol):
        idx = self._index.get(symbol)
        return self._index[UNK] if idx is None else idx

    def symbol(self, idx):
        return self.symbols[idx]

    def role(self, idx):
        return self.roles[idx]

    def encode_symbols(self, symbols):
        return [self.id(s) for s in symbols]

    @property
    def pad_id(self):
        return self._index[PAD]

    @property
    def eos_id(self):
        return self._index[EOS]

    def start_id(self, kind):
        if kind == "multitask-words":
            return self._index[BOS_WORDS]
        if kind == "multitask-tags":
            return self._index[BOS_TAGS]
        return self._index[BOS]


@dataclass(frozen=True)
class PlannedSequence:
    ids: tuple
    kind: str     # one of STREAM_KINDS
    tagset: str


def build_vocabulary(corpus_tokens, enabled_tagsets=("pos",), lexicon=None):
    """Vocabulary over observed word types, tag inventories and controls.

    `corpus_tokens` is an iterable of token lists. Ids are assigned in a
    fixed order (controls, then sorted words, then sorted tags) so identical
    corpora map to identical ids.
    """
    words = set()
    for tokens in corpus_tokens:
        words.update(tokens)
    tags = set()
    for ts in enabled_tagsets:
        if ts in ("none", "idle"):
            continue
        tags.update(grammar.all_tags(ts, lexicon))
    clash = words & tags | words & set(CONTROLS) | tags & set(CONTROLS)
    if clash:
        raise ValueError(f"surface collision between roles: {sorted(clash)}")
    symbols = list(CONTROLS) + sorted(words) + sorted(tags)
    roles = [CONTROL] * len(CONTROLS) + [WORD] * len(words) + [TAG] * len(tags)
    roles[CONTROLS.index(IDLE)] = TAG
    return Vocabulary(tuple(symbols), tuple(roles))


def encode(vocab, tokens, tags, approach, tagset):
    """Encode one caption into the approach's planned stream(s)."""
    if approach not in APPROACHES:
        raise ValueError(f"unknown approach {approach!r}")
    if tagset not in TAGSETS:
        raise ValueError(f"unknown tagset {tagset!r}")
    if approach == "standard":
        ids = [vocab.start_id("standard")] + vocab.encode_symbols(tokens) \
            + [vocab.eos_id]
        return [PlannedSequence(tuple(ids), "standard", "none")]
    if tagset == "idle":
        tags = [IDLE] * len(tokens)
    if tags is None or len(tags) != len(tokens):
        raise AlignmentError(
            f"{len(tokens)} tokens vs {0 if tags is None else len(tags)} tags")
    word_ids = vocab.encode_symbols(tokens)
    tag_ids = vocab.encode_symbols(tags)
    if approach == "sequential":
        ids = [vocab.start_id("sequential")] + tag_ids + word_ids + [vocab.eos_id]
        return [PlannedSequence(tuple(ids), "sequential", tagset)]
    if approach == "interleave":
        ids = [vocab.start_id("interleave")]
        for t, w in zip(tag_ids, word_ids):
            ids.extend((t, w))
        ids.append(vocab.eos_id)
        return [PlannedSequence(tuple(ids), "interleave", tagset)]
    # multitask: one tag stream and one word stream per caption
    tag_seq = [vocab.start_id("multitask-tags")] + tag_ids + [vocab.eos_id]
    word_seq = [vocab.start_id("multitask-words")] + word_ids + [vocab.eos_id]
    return [
        PlannedSequence(tuple(tag_seq), "multitask-tags", tagset),
        PlannedSequence(tuple(word_seq), "multitask-words", tagset),
    ]


def strip(vocab, seq):
    """All WORD-role symbols of a stream, in order; tolerant of malformed input."""
    ids = seq.ids if isinstance(seq, PlannedSequence) else seq
    return [vocab.symbol(i) for i in ids if vocab.role(i) == WORD]


def parse_generated(ids, kind, tagset, vocab):
    """Split a generated stream into (tokens, tags, wellformed).

    Wellformedness checks the role pattern only: the right start control,
    the approach's tag/word layout, and the end marker (when present) in a
    legal position. Truncated streams that are a valid prefix still count.
    Tokens and tags are extracted best-effort either way.
    """
    ids = list(ids)
    tokens = [vocab.symbol(i) for i in ids if vocab.role(i) == WORD]
    tags = [vocab.symbol(i) for i in ids if vocab.role(i) == TAG]
    ok = bool(ids) and ids[0] == vocab.start_id(kind)
    body = ids[1:]
    if body and body[-1] == vocab.eos_id:
        body = body[:-1]
    roles = [vocab.role(i) for i in body]
    if any(r == CONTROL for r in roles):
        ok = False
    elif kind in ("standard", "multitask-words"):
        ok = ok and all(r == WORD for r in roles)
    elif kind == "multitask-tags":
        ok = ok and all(r == TAG for r in roles)
    elif kind == "sequential":
        # tags first, then words; no tag may follow a word
        switched = False
        for r in roles:
            if r == WORD:
                switched = True
            elif switched:
                ok = False
                break
    elif kind == "interleave":
        for pos, r in enumerate(roles):
            want = TAG if pos % 2 == 0 else WORD
            if r != want:
                ok = False
                break
        else:
            # a complete stream must not end on an unrealized tag
            if len(ids) > 1 and ids[-1] == vocab.eos_id and len(roles) % 2 == 1:
                ok = False
    else:
        raise ValueError(f"unknown stream kind {kind!r}")
    return tokens, tags, ok


def stream_kinds(approach):
    """Stream kinds an approach produces (multitask yields two)."""
    if approach == "multitask":
        return ("multitask-tags", "multitask-words")
    return (approach,)


def decode_kind(approach):
    """The stream kind decoded at inference time."""
    return "multitask-words" if approach == "multitask" else approach


def write_vocabulary(vocab, path):
    with open(path, "w") as f:
        for i, (sym, role) in enumerate(zip(vocab.symbols, vocab.roles)):
            f.write(f"{i}\t{sym}\t{role}\n")


def read_vocabulary(path):
    symbols, roles = [], []
    with open(path) as f:
        for line in f:
            _, sym, role = line.rstrip("\n").split("\t")
            symbols.append(sym)
            roles.append(role)
    return Vocabulary(tuple(symbols), tuple(roles))
