"""Five ways to lay out a caption stream: planning approaches and tag sets.

Run: python demos/03_planning.py
"""

from captionplan import planner, world

items = world.make_corpus(200, seed=6, n_refs=3)
tokens_iter = [r.tokens for item in items for r in item.references]
vocab = planner.build_vocabulary(tokens_iter, ("pos", "dep", "chunk", "ccg"))
print(f"vocabulary: {len(vocab)} symbols "
      f"({sum(r == planner.WORD for r in vocab.roles)} words, "
      f"{sum(r == planner.TAG for r in vocab.roles)} tags, 7 controls)")

ref = items[0].references[0]
print("\ncaption:", " ".join(ref.tokens))

for approach in ("standard", "sequential", "interleave", "multitask"):
    tagset = "none" if approach == "standard" else "pos"
    tags = None if tagset == "none" else ref.tags["pos"]
    for seq in planner.encode(vocab, ref.tokens, tags, approach, tagset):
        symbols = [vocab.symbol(i) for i in seq.ids]
        print(f"\n{seq.kind:16s} ({len(seq.ids)} ids)")
        print("  ", " ".join(symbols))
        words = planner.strip(vocab, seq)
        toks, tags_out, ok = planner.parse_generated(seq.ids, seq.kind,
                                                     tagset, vocab)
        print(f"   strip round-trip: {words == ref.tokens or words == []}, "
              f"wellformed: {ok}")

print("\nidle control (interleave with a meaning-free tag):")
seq = planner.encode(vocab, ref.tokens, None, "interleave", "idle")[0]
print("  ", " ".join(vocab.symbol(i) for i in seq.ids))

print("\na malformed stream is parsed best-effort:")
bad = [vocab.start_id("interleave"), vocab.id("DET"), vocab.id("ADJ"),
       vocab.id("cat"), vocab.eos_id]
toks, tags_out, ok = planner.parse_generated(bad, "interleave", "pos", vocab)
print(f"   tokens={toks} tags={tags_out} wellformed={ok}")
