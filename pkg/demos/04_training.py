"""Train a small captioner end to end and decode with beam search.

Takes a couple of minutes on a laptop CPU. Run: python demos/04_training.py
"""

import numpy as np

from captionplan import captioner as cap
from captionplan import planner, splits, world
from captionplan.splits import SplitSpec, pair_occurs

config = world.WorldConfig(p_mention=0.8)
items = world.make_corpus(600, seed=0, config=config, n_refs=5)
split = splits.build_splits(items, SplitSpec(active_set=0), seed=0)
by_id = {i.scene.id: i for i in items}
print(f"corpus: {len(items)} scenes; train/val/test = "
      f"{len(split.train)}/{len(split.val)}/{len(split.test)}")

train_tokens = [r.tokens for i in items if i.scene.id in set(split.train)
                for r in i.references]
vocab = planner.build_vocabulary(train_tokens, ("pos",))
feats = cap.features_by_scene(items)
examples = cap.build_training_set(items, split.train, vocab, "interleave",
                                  "pos", refs_per_scene=2, seed=1)
print(f"training streams: {len(examples)}, vocabulary: {len(vocab)}")

model = cap.make_captioner(
    len(vocab), items[0].features.dim,
    cap.CaptionerConfig(embed_dim=48, hidden_dim=96, attn_dim=48,
                        feat_proj_dim=48), seed=1)
val_items = [by_id[s] for s in split.val]
result = cap.early_stopped_train(
    model, examples, feats, val_items, vocab, "interleave",
    cap.OptimizerConfig(lr=2.5e-3), patience=4, max_epochs=12,
    batch_size=64, seed=1, log=print)
print(f"best epoch {result.best_epoch} (val BLEU {result.best_bleu:.2f})")

print("\n=== beam decoding a validation scene ===")
item = val_items[0]
print("entities:", item.scene.entities)
hyps = cap.beam_search(model, item.features.rows,
                       vocab.start_id("interleave"), vocab.eos_id,
                       beam=20, max_len=40, k=5,
                       forbidden=cap.forbidden_ids(vocab))
pairs = split.spec.active_pairs
for rank, h in enumerate(hyps):
    tokens, tags, ok = planner.parse_generated(h.ids, "interleave", "pos",
                                               vocab)
    hits = [p.name for p in pairs if pair_occurs(tokens, p)]
    print(f"  #{rank} lp={h.logprob:7.2f} wf={ok} {' '.join(tokens)}"
          + (f"   <-- held-out pair {hits}" if hits else ""))
