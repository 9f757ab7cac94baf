"""Paradigmatic gaps: held-out concept pairs never co-occur in training.

Run: python demos/02_splits.py
"""

from captionplan import splits, world
from captionplan.splits import DEFAULT_HELDOUT_SETS, SplitSpec, pair_occurs

print("=== the four held-out sets ===")
for i, pairs in enumerate(DEFAULT_HELDOUT_SETS):
    print(f"  set {i}:", ", ".join(p.name for p in pairs))

print("\n=== pair matching is a dependency test, not substring search ===")
examples = [
    (["a", "black", "cat"], "black cat"),
    (["a", "black", "dog", "and", "a", "white", "cat"], "black cat"),
    (["a", "cat", "is", "black"], "black cat"),
    (["a", "man", "that", "is", "eating"], "eat man"),
    (["a", "woman", "eating", "a", "man"], "eat man"),
]
for tokens, name in examples:
    pair = splits.make_pair(*name.split())
    print(f"  {' '.join(tokens):42s} vs ({name}): {pair_occurs(tokens, pair)}")

print("\n=== building a split with a gap ===")
items = world.make_corpus(1200, seed=5, n_refs=5)
split = splits.build_splits(items, SplitSpec(active_set=0), seed=0)
print(f"  train/val/test = {len(split.train)}/{len(split.val)}/{len(split.test)}")
print("  warnings:", split.warnings or "none")

print("\n=== exhaustive scan: zero active pairs in any train reference ===")
by_id = {item.scene.id: item for item in items}
hits = 0
for sid in split.train:
    for ref in by_id[sid].references:
        for pair in split.spec.active_pairs:
            hits += pair_occurs(ref, pair)
print(f"  hits in train: {hits}")

counts = {p.name: 0 for p in split.spec.active_pairs}
for sid in split.val + split.test:
    for pair in split.spec.active_pairs:
        if any(pair_occurs(r, pair) for r in by_id[sid].references):
            counts[pair.name] += 1
print("  eval scenes per pair:", counts)
