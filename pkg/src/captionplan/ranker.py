"""Joint image-sentence embedding for retrieval and beam re-ranking.

Sentences are pooled from the captioner's first-layer states (final state,
mean, or learned weighted pooling); images from a learned softmax pooling
over region features. Both sides project into one space and train with a
max-margin loss against the hardest in-batch negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm

POOLING_MODES = ("final", "mean", "weight")


class EmptySequence(ValueError):
    pass


class Ranker:
    def __init__(self, state_dim, feat_dim, embed_dim=64, pooling="weight",
                 margin=0.2, seed=0, dtype="float32"):
        if pooling not in POOLING_MODES:
            raise ValueError(f"unknown pooling mode {pooling!r}")
        self.state_dim = state_dim
        self.feat_dim = feat_dim
        self.embed_dim = embed_dim
        self.pooling = pooling
        self.margin = margin
        store = nm.ParamStore(seed=seed, dtype=np.dtype(dtype))
        store.add_matrix("sent_w", (state_dim, embed_dim))
        store.add_matrix("pool_w", (state_dim, 1))
        store.add_matrix("img_pool_w", (feat_dim, 1))
        store.add_matrix("img_proj", (feat_dim, embed_dim))
        self.store = store

    # --- sentence side ---

    def embed_sentence(self, states, mode=None):
        """Pool a (T, d_h) state matrix into a unit sentence embedding."""
        mode = mode or self.pooling
        states = nm._lift(states)
        t = states.data.shape[0]
        if t == 0:
            raise EmptySequence("cannot embed an empty state sequence")
        if mode == "final":
            pooled = nm.embedding(states, np.array(t - 1))
        elif mode == "mean":
            pooled = nm.mean_(states, axis=0)
        elif mode == "weight":
            omega = nm.reshape(nm.matmul(states, self.store["pool_w"]), (t,))
            alpha = nm.softmax(omega, axis=-1)
            pooled = nm.sum_(nm.mul(nm.reshape(alpha, (t, 1)), states), axis=0)
        else:
            raise ValueError(f"unknown pooling mode {mode!r}")
        return nm.l2_normalize(nm.matmul(pooled, self.store["sent_w"]))

    def pooling_weights(self, states):
        """Weight-mode attention over states (diagnostics and tests)."""
        states = nm._lift(states)
        omega = nm.reshape(nm.matmul(states, self.store["pool_w"]),
                           (states.data.shape[0],))
        return nm.softmax(omega, axis=-1)

    def embed_sentence_batch(self, states, seq_lengths, mode=None):
        """Batched pooling over teacher-forcing states.

        states: (B, L-1, d_h) layer-1 states for inputs [<s>, s1..sT]; row i
        of a length-L_i sequence has valid symbol states at positions
        1 .. L_i - 2. Returns (B, embed_dim) unit vectors.
        """
        mode = mode or self.pooling
        lengths = np.asarray(seq_lengths)
        b, p, _ = states.data.shape
        counts = lengths - 2
        if counts.min() < 1:
            raise EmptySequence("sequence without caption symbols")
        pos = np.arange(p)
        mask = ((pos[None, :] >= 1) & (pos[None, :] <= counts[:, None]))
        mask = mask.astype(states.data.dtype)
        if mode == "final":
            pooled = nm.gather_time(states, counts)
        elif mode == "mean":
            m = nm.tensor(mask[:, :, None])
            pooled = nm.mul(nm.sum_(nm.mul(states, m), axis=1), nm.tensor(
                (1.0 / counts)[:, None].astype(states.data.dtype)))
        else:
            omega = nm.reshape(nm.matmul(states, self.store["pool_w"]), (b, p))
            omega = nm.add(omega, nm.tensor((mask - 1.0) * 1e9))
            alpha = nm.softmax(omega, axis=-1)
            pooled = nm.sum_(nm.mul(nm.reshape(alpha, (b, p, 1)), states),
                             axis=1)
        return nm.l2_normalize(nm.matmul(pooled, self.store["sent_w"]))

    # --- image side ---

    def embed_image(self, features):
        """Softmax-pooled region rows projected to a unit embedding."""
        feats = nm._lift(features)
        single = feats.data.ndim == 2
        if single:
            feats = nm.reshape(feats, (1,) + feats.data.shape)
        b, r, _ = feats.data.shape
        omega = nm.reshape(nm.matmul(feats, self.store["img_pool_w"]), (b, r))
        alpha = nm.softmax(omega, axis=-1)
        pooled = nm.sum_(nm.mul(nm.reshape(alpha, (b, r, 1)), feats), axis=1)
        out = nm.l2_normalize(nm.matmul(pooled, self.store["img_proj"]))
        return nm.reshape(out, (self.embed_dim,)) if single else out

    # --- objective ---

    def contrastive_loss(self, img_emb, sent_emb, margin=None):
        """Max-margin loss with hardest in-batch negatives, summed over pairs."""
        margin = self.margin if margin is None else margin
        n = img_emb.data.shape[0]
        if n < 2:
            raise ValueError("contrastive loss needs at least two pairs")
        scores = nm.matmul(img_emb, nm.transpose(sent_emb, (1, 0)))
        eye = nm.tensor(np.eye(n, dtype=scores.data.dtype))
        off = nm.tensor(1.0 - np.eye(n, dtype=scores.data.dtype))
        pos = nm.sum_(nm.mul(scores, eye), axis=1)
        cost_s = nm.relu(nm.add(nm.sub(scores, nm.reshape(pos, (n, 1))), margin))
        cost_im = nm.relu(nm.add(nm.sub(scores, nm.reshape(pos, (1, n))), margin))
        hardest_s = nm.max_axis(nm.mul(cost_s, off), axis=1)
        hardest_im = nm.max_axis(nm.mul(cost_im, off), axis=0)
        return nm.add(nm.sum_(hardest_s), nm.sum_(hardest_im))


# ---------------------------------------------------------------------------
# retrieval metrics
# ---------------------------------------------------------------------------

def retrieval_recall(img_embs, sent_embs, gold_sentences, ks=(1, 5, 10)):
    """Recall@K in both directions with stable tie-breaking.

    gold_sentences[i] lists the sentence indices belonging to image i; the
    inverse map scores sentence-to-image retrieval.
    """
    img = np.asarray(img_embs)
    sent = np.asarray(sent_embs)
    sims = img @ sent.T
    n_img, n_sent = sims.shape
    img_of_sent = np.full(n_sent, -1)
    for i, golds in enumerate(gold_sentences):
        for s in golds:
            img_of_sent[s] = i
    text = {}
    order = np.argsort(-sims, axis=1, kind="stable")
    for k in ks:
        hit = sum(bool(set(order[i, :k].tolist()) & set(gold_sentences[i]))
                  for i in range(n_img))
        text[k] = hit / n_img
    image = {}
    order_t = np.argsort(-sims.T, axis=1, kind="stable")
    for k in ks:
        hit = sum(img_of_sent[s] in order_t[s, :k].tolist()
                  for s in range(n_sent))
        image[k] = hit / n_sent
    return {"text": text, "image": image}


# ---------------------------------------------------------------------------
# beam re-ranking
# ---------------------------------------------------------------------------

def rerank(hypotheses, image_embedding, ranker, lam=0.0, k=None):
    """Reorder beam candidates by image similarity (mixed with logprob).

    score = lam * logprob/length + (1 - lam) * cosine(image, sentence);
    lam defaults to pure similarity. Returns (hypothesis, score) pairs in
    descending score order, ties broken by the incoming beam order.
    """
    img = np.asarray(image_embedding, dtype=np.float64)
    scored = []
    for h in hypotheses:
        if h.states:
            with nm.no_grad():
                emb = ranker.embed_sentence(np.stack(h.states)).data
            cos = float(img @ emb.astype(np.float64))
        else:
            cos = 0.0
        norm_lp = h.logprob / max(len(h.ids) - 1, 1)
        scored.append((h, lam * norm_lp + (1.0 - lam) * cos))
    scored.sort(key=lambda pair: -pair[1])
    out = scored if k is None else scored[:k]
    return out
