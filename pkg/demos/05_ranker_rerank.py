"""Joint captioner+ranker training, retrieval and beam re-ranking.

Run: python demos/05_ranker_rerank.py
"""

import numpy as np

from captionplan import captioner as cap
from captionplan import harness, numerics as nm, planner, splits, world
from captionplan.harness import Cell, config_from_dict
from captionplan.ranker import Ranker, rerank

cfg = config_from_dict({
    "n_scenes": 500, "n_refs": 5, "world": {"p_mention": 0.8},
    "heldout_sets": [0], "seeds": [1],
    "approaches": ["interleave"], "tagsets": ["pos"],
    "captioner": {"embed_dim": 48, "hidden_dim": 96, "attn_dim": 48,
                  "feat_proj_dim": 48},
    "ranker_enabled": True, "pooling": "weight", "ranker_dim": 48,
    "lr": 2.5e-3, "batch_size": 64, "max_epochs": 10, "patience": 4,
    "beam": 20, "top_k": 5,
})
items = harness.stage_corpus(cfg, "/tmp")  # cached under /tmp/corpus.jsonl
split = splits.build_splits(items, splits.SplitSpec(active_set=0),
                            cfg.ratios, cfg.split_seed)
vocab_tokens = [r.tokens for i in items if i.scene.id in set(split.train)
                for r in i.references]
vocab = planner.build_vocabulary(vocab_tokens, ("pos",))
cell = Cell(0, "interleave", "pos", seed=1)
print("training captioner + ranker jointly (weight pooling)...")
model, ranker, result = harness.train_cell(cfg, items, split, vocab, cell)
print(f"best epoch {result.best_epoch}, val BLEU {result.best_bleu:.2f}")

print("\n=== retrieval over the validation gallery ===")
block = harness.retrieval_block(cfg, items, split, vocab, cell, model, ranker)
for direction in ("text", "image"):
    row = "  ".join(f"R@{k}={v:.3f}" for k, v in block[direction].items())
    print(f"  {direction:5s} {row}")

print("\n=== re-ranking one beam ===")
by_id = {i.scene.id: i for i in items}
item = by_id[split.val[0]]
print("entities:", item.scene.entities)
hyps = cap.beam_search(model, item.features.rows,
                       vocab.start_id("interleave"), vocab.eos_id,
                       beam=20, max_len=40, k=20,
                       forbidden=cap.forbidden_ids(vocab))
with nm.no_grad():
    img = ranker.embed_image(
        item.features.rows.astype(model.config.dtype)).data
for h, score in rerank(hyps, img, ranker, lam=0.0, k=5):
    tokens = planner.strip(vocab, h.ids)
    print(f"  sim={score:6.3f} lp={h.logprob:7.2f}  {' '.join(tokens)}")
