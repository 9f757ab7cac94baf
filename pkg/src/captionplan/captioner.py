"""Caption decoders: teacher-forced training and beam-search decoding.

Two interchangeable backends generate from region features over the joint
word/tag vocabulary: a two-layer LSTM where the first layer reads
[embedding, mean region feature] and the second integrates an attention
context, and a small pre-norm transformer decoder with cross-attention over
the regions. Both expose the same stepwise interface, so beam search,
greedy decoding and sequence scoring are backend-agnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import planner
from .evaluation import bleu
from .planner import PAD, BOS, UNK, BOS_WORDS, BOS_TAGS


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class CaptionerConfig:
    backend: str = "recurrent"
    embed_dim: int = 64
    hidden_dim: int = 128
    attn_dim: int = 64
    feat_proj_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 128
    max_positions: int = 64
    dtype: str = "float32"


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    warmup_steps: int = 0  # 0 disables the linear warm-up

    def lr_at(self, step):
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup_steps)


def default_max_len(kind):
    """Decoding cap: 20 for word-only streams, 40 when tags are generated."""
    return 20 if kind in ("standard", "multitask-words") else 40


def forbidden_ids(vocab):
    """Control symbols a decoder must never emit mid-stream."""
    return tuple(vocab.id(s) for s in (PAD, BOS, UNK, BOS_WORDS, BOS_TAGS))


# ---------------------------------------------------------------------------
# recurrent backend
# ---------------------------------------------------------------------------

class RecurrentCaptioner:
    """Two-layer LSTM with additive attention over region features."""

    def __init__(self, vocab_size, feat_dim, config=CaptionerConfig(), seed=0):
        self.vocab_size = vocab_size
        self.feat_dim = feat_dim
        self.config = config
        c = config
        store = nm.ParamStore(seed=seed, dtype=np.dtype(c.dtype))
        store.add_embedding("embed", (vocab_size, c.embed_dim))
        store.add_matrix("enc_w", (feat_dim, c.feat_proj_dim))
        store.add_zeros("enc_b", (c.feat_proj_dim,))
        d1 = c.embed_dim + c.feat_proj_dim
        store.add_matrix("lstm1_w", (d1 + c.hidden_dim, 4 * c.hidden_dim))
        store.add_zeros("lstm1_b", (4 * c.hidden_dim,))
        store.add_matrix("attn_wq", (c.hidden_dim, c.attn_dim))
        store.add_matrix("attn_wk", (c.feat_proj_dim, c.attn_dim))
        store.add_matrix("attn_v", (c.attn_dim,))
        d2 = c.hidden_dim + c.feat_proj_dim
        store.add_matrix("lstm2_w", (d2 + c.hidden_dim, 4 * c.hidden_dim))
        store.add_zeros("lstm2_b", (4 * c.hidden_dim,))
        store.add_matrix("out_w", (c.hidden_dim, vocab_size))
        store.add_zeros("out_b", (vocab_size,))
        self.store = store

    @property
    def state_dim(self):
        return self.config.hidden_dim

    def _encode_features(self, feats):
        s = self.store
        proj = nm.add(nm.matmul(feats, s["enc_w"]), s["enc_b"])
        mean_v = nm.mean_(proj, axis=-2)
        k_proj = nm.matmul(proj, s["attn_wk"])
        return proj, k_proj, mean_v

    def _step(self, x_ids, h1, c1, h2, c2, proj, k_proj, mean_v):
        """One decoder step shared by training and decoding paths."""
        s = self.store
        emb = nm.embedding(s["embed"], x_ids)
        x1 = nm.concat([emb, mean_v], axis=-1)
        h1, c1 = nm.lstm_cell(x1, h1, c1, s["lstm1_w"], s["lstm1_b"])
        q = nm.matmul(h1, s["attn_wq"])
        ctx, _ = nm.attention_core(q, k_proj, proj, s["attn_v"])
        x2 = nm.concat([h1, ctx], axis=-1)
        h2, c2 = nm.lstm_cell(x2, h2, c2, s["lstm2_w"], s["lstm2_b"])
        logits = nm.add(nm.matmul(h2, s["out_w"]), s["out_b"])
        return logits, h1, c1, h2, c2

    def _zeros(self, n):
        d = np.dtype(self.config.dtype)
        return nm.tensor(np.zeros((n, self.config.hidden_dim), dtype=d))

    def forward_loss(self, ids, features, pad_id):
        """Teacher-forced summed NLL over a padded batch.

        Returns (loss sum, token count, layer-1 states (B, L-1, H)).
        """
        ids = np.asarray(ids)
        b, length = ids.shape
        feats = nm.tensor(np.asarray(features, dtype=self.config.dtype))
        proj, k_proj, mean_v = self._encode_features(feats)
        h1, c1, h2, c2 = (self._zeros(b) for _ in range(4))
        logits_steps = []
        states = []
        for t in range(length - 1):
            logits, h1, c1, h2, c2 = self._step(
                ids[:, t], h1, c1, h2, c2, proj, k_proj, mean_v)
            logits_steps.append(logits)
            states.append(nm.reshape(h1, (b, 1, self.config.hidden_dim)))
        big = nm.concat(logits_steps, axis=0)  # time-major (T*B, V)
        targets = ids[:, 1:].T.reshape(-1)
        mask = (ids[:, 1:] != pad_id).T.reshape(-1).astype(big.data.dtype)
        loss, n_tok = nm.cross_entropy_sum(big, targets, mask)
        return loss, n_tok, nm.concat(states, axis=1)

    # --- stepwise decoding interface ---

    def decode_start(self, features):
        with nm.no_grad():
            feats = nm.tensor(np.asarray(features, dtype=self.config.dtype))
            proj, k_proj, mean_v = self._encode_features(feats)
            n = feats.data.shape[0]
            z = self._zeros(n)
            return (z.data, z.data, z.data, z.data,
                    proj.data, k_proj.data, mean_v.data)

    def decode_step(self, state, last_ids):
        h1, c1, h2, c2, proj, k_proj, mean_v = state
        with nm.no_grad():
            logits, h1t, c1t, h2t, c2t = self._step(
                np.asarray(last_ids), nm.tensor(h1), nm.tensor(c1),
                nm.tensor(h2), nm.tensor(c2), nm.tensor(proj),
                nm.tensor(k_proj), nm.tensor(mean_v))
        logps = _log_softmax(logits.data)
        new_state = (h1t.data, c1t.data, h2t.data, c2t.data, proj, k_proj, mean_v)
        return logps, h1t.data, new_state

    def decode_select(self, state, idx):
        return tuple(part[idx] for part in state)


# ---------------------------------------------------------------------------
# transformer backend
# ---------------------------------------------------------------------------

class TransformerCaptioner:
    """Pre-norm transformer decoder with cross-attention over regions."""

    def __init__(self, vocab_size, feat_dim, config=CaptionerConfig(backend="transformer"),
                 seed=0):
        self.vocab_size = vocab_size
        self.feat_dim = feat_dim
        self.config = config
        c = config
        if c.model_dim % c.n_heads:
            raise ConfigurationError("model_dim must divide into heads")
        store = nm.ParamStore(seed=seed, dtype=np.dtype(c.dtype))
        store.add_embedding("embed", (vocab_size, c.model_dim))
        store.add_embedding("pos", (c.max_positions, c.model_dim))
        store.add_matrix("enc_w", (feat_dim, c.model_dim))
        store.add_zeros("enc_b", (c.model_dim,))
        for layer in range(c.n_layers):
            p = f"l{layer}."
            for ln in ("ln1", "ln2", "ln3"):
                store.add(p + ln + "_g", np.ones(c.model_dim))
                store.add_zeros(p + ln + "_b", (c.model_dim,))
            for name in ("self_q", "self_k", "self_v", "self_o",
                         "cross_q", "cross_k", "cross_v", "cross_o"):
                store.add_matrix(p + name, (c.model_dim, c.model_dim))
            store.add_matrix(p + "ffn_w1", (c.model_dim, c.ffn_dim))
            store.add_zeros(p + "ffn_b1", (c.ffn_dim,))
            store.add_matrix(p + "ffn_w2", (c.ffn_dim, c.model_dim))
            store.add_zeros(p + "ffn_b2", (c.model_dim,))
        store.add("ln_f_g", np.ones(c.model_dim))
        store.add_zeros("ln_f_b", (c.model_dim,))
        store.add_matrix("out_w", (c.model_dim, vocab_size))
        store.add_zeros("out_b", (vocab_size,))
        self.store = store

    @property
    def state_dim(self):
        return self.config.model_dim

    def _heads(self, x, n_rows):
        c = self.config
        b = x.data.shape[0]
        dh = c.model_dim // c.n_heads
        x = nm.reshape(x, (b, n_rows, c.n_heads, dh))
        return nm.transpose(x, (0, 2, 1, 3))

    def _merge(self, x, n_rows):
        c = self.config
        b = x.data.shape[0]
        x = nm.transpose(x, (0, 2, 1, 3))
        return nm.reshape(x, (b, n_rows, c.model_dim))

    def _mha(self, q_in, kv_in, prefix, t_rows, s_rows, mask=None):
        s = self.store
        c = self.config
        dh = c.model_dim // c.n_heads
        q = self._heads(nm.matmul(q_in, s[prefix + "_q"]), t_rows)
        k = self._heads(nm.matmul(kv_in, s[prefix + "_k"]), s_rows)
        v = self._heads(nm.matmul(kv_in, s[prefix + "_v"]), s_rows)
        scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))),
                          1.0 / math.sqrt(dh))
        if mask is not None:
            scores = nm.add(scores, mask)
        out = nm.matmul(nm.softmax(scores, axis=-1), v)
        return nm.matmul(self._merge(out, t_rows), s[prefix + "_o"])

    def _forward_core(self, ids, features):
        """Logits and first-layer states for a (B, T) id prefix."""
        s = self.store
        c = self.config
        ids = np.asarray(ids)
        b, t = ids.shape
        if t > c.max_positions:
            raise ConfigurationError(f"sequence length {t} exceeds positions")
        dt = np.dtype(c.dtype)
        feats = nm.tensor(np.asarray(features, dtype=dt))
        kv = nm.add(nm.matmul(feats, s["enc_w"]), s["enc_b"])
        r = kv.data.shape[1]
        x = nm.add(nm.embedding(s["embed"], ids),
                   nm.embedding(s["pos"], np.arange(t)))
        causal = np.triu(np.full((t, t), -1e9, dtype=dt), k=1)
        causal = nm.tensor(causal.reshape(1, 1, t, t))
        l1_states = None
        for layer in range(c.n_layers):
            p = f"l{layer}."
            a = nm.layer_norm(x, s[p + "ln1_g"], s[p + "ln1_b"])
            x = nm.add(x, self._mha(a, a, p + "self", t, t, causal))
            a = nm.layer_norm(x, s[p + "ln2_g"], s[p + "ln2_b"])
            x = nm.add(x, self._mha(a, kv, p + "cross", t, r))
            a = nm.layer_norm(x, s[p + "ln3_g"], s[p + "ln3_b"])
            f = nm.add(nm.matmul(nm.relu(
                nm.add(nm.matmul(a, s[p + "ffn_w1"]), s[p + "ffn_b1"])),
                s[p + "ffn_w2"]), s[p + "ffn_b2"])
            x = nm.add(x, f)
            if layer == 0:
                l1_states = x
        a = nm.layer_norm(x, s["ln_f_g"], s["ln_f_b"])
        logits = nm.add(nm.matmul(a, s["out_w"]), s["out_b"])
        return logits, l1_states

    def forward_loss(self, ids, features, pad_id):
        ids = np.asarray(ids)
        b, length = ids.shape
        logits, l1 = self._forward_core(ids[:, :-1], features)
        v = self.vocab_size
        flat = nm.reshape(logits, (b * (length - 1), v))
        targets = ids[:, 1:].reshape(-1)
        mask = (ids[:, 1:] != pad_id).reshape(-1).astype(flat.data.dtype)
        loss, n_tok = nm.cross_entropy_sum(flat, targets, mask)
        return loss, n_tok, l1

    # --- stepwise decoding interface ---

    def decode_start(self, features):
        feats = np.asarray(features, dtype=self.config.dtype)
        prefix = np.zeros((feats.shape[0], 0), dtype=np.int64)
        return (prefix, feats)

    def decode_step(self, state, last_ids):
        prefix, feats = state
        prefix = np.concatenate(
            [prefix, np.asarray(last_ids).reshape(-1, 1)], axis=1)
        with nm.no_grad():
            logits, l1 = self._forward_core(prefix, feats)
        logps = _log_softmax(logits.data[:, -1])
        return logps, l1.data[:, -1], (prefix, feats)

    def decode_select(self, state, idx):
        prefix, feats = state
        return (prefix[idx], feats[idx])


def make_captioner(vocab_size, feat_dim, config=CaptionerConfig(), seed=0):
    if config.backend == "recurrent":
        return RecurrentCaptioner(vocab_size, feat_dim, config, seed)
    if config.backend == "transformer":
        return TransformerCaptioner(vocab_size, feat_dim, config, seed)
    raise ConfigurationError(f"unknown backend {config.backend!r}")


def _log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

@dataclass
class Hypothesis:
    ids: list                    # including the start symbol
    logprob: float
    finished: bool
    states: list = field(default_factory=list)  # layer-1 snapshot per symbol


def beam_search(model, features, start_id, eos_id, beam=20, max_len=20, k=5,
                forbidden=(), collect_states=True):
    """Length-capped beam search; returns the top-k pool entries.

    Hypotheses that emit the end marker retire to a pool; anything still
    alive at the cap joins the pool marked unfinished. Ranking is by raw
    accumulated log probability (no length normalization). Each hypothesis
    keeps the layer-1 state snapshot of every symbol it fed to the model,
    which the ranker later pools into a sentence embedding.
    """
    if beam < k or k < 1:
        raise ConfigurationError(f"need beam {beam} >= k {k} >= 1")
    features = np.asarray(features)
    state = model.decode_start(features[None])
    tokens = [[start_id]]
    states = [[]]
    cum = np.zeros(1)
    last = np.array([start_id])
    pool = []
    forbidden = list(forbidden)
    for step in range(max_len):
        logps, l1, state = model.decode_step(state, last)
        if collect_states and step > 0:
            for i in range(len(tokens)):
                states[i].append(l1[i])
        if forbidden:
            logps[:, forbidden] = -np.inf
        cand = cum[:, None] + logps
        order = np.argsort(-cand, axis=None, kind="stable")[:beam]
        keep_idx, keep_tok, keep_lp = [], [], []
        for flat in order:
            i, v = divmod(int(flat), logps.shape[1])
            lp = float(cand[i, v])
            if not np.isfinite(lp):
                continue
            if v == eos_id:
                pool.append(Hypothesis(tokens[i] + [v], lp, True,
                                       list(states[i])))
            else:
                keep_idx.append(i)
                keep_tok.append(v)
                keep_lp.append(lp)
        if not keep_idx:
            break
        if step == max_len - 1:
            # cap reached: live hypotheses join the pool unfinished
            for i, v, lp in zip(keep_idx, keep_tok, keep_lp):
                pool.append(Hypothesis(tokens[i] + [v], lp, False,
                                       list(states[i])))
            break
        state = model.decode_select(state, np.array(keep_idx))
        tokens = [tokens[i] + [v] for i, v in zip(keep_idx, keep_tok)]
        states = [list(states[i]) for i in keep_idx]
        cum = np.array(keep_lp)
        last = np.array(keep_tok)
    pool.sort(key=lambda h: -h.logprob)
    return pool[:k]


def greedy_decode(model, features, start_id, eos_id, max_len=20, forbidden=()):
    """Batched argmax decoding; returns one id list per feature row."""
    features = np.asarray(features)
    n = features.shape[0]
    state = model.decode_start(features)
    last = np.full(n, start_id, dtype=np.int64)
    seqs = [[start_id] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    forbidden = list(forbidden)
    for _ in range(max_len):
        logps, _, state = model.decode_step(state, last)
        if forbidden:
            logps[:, forbidden] = -np.inf
        nxt = logps.argmax(axis=1)
        nxt = np.where(done, eos_id, nxt)
        for i in range(n):
            if not done[i]:
                seqs[i].append(int(nxt[i]))
        done |= nxt == eos_id
        if done.all():
            break
        last = nxt
    return seqs


def score_sequence(model, features, ids):
    """Log probability a model assigns to a full symbol sequence."""
    state = model.decode_start(np.asarray(features)[None])
    total = 0.0
    for t in range(len(ids) - 1):
        logps, _, state = model.decode_step(state, np.array([ids[t]]))
        total += float(logps[0, ids[t + 1]])
    return total


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainExample:
    scene_id: int
    ids: tuple
    rankable: bool = True


def build_training_set(items, train_ids, vocab, approach, tagset,
                       refs_per_scene=None, seed=0):
    """Encode training references into planned id streams."""
    train = set(train_ids)
    rng = np.random.default_rng([seed, 13])
    examples = []
    for item in items:
        if item.scene.id not in train:
            continue
        refs = item.references
        if refs_per_scene is not None and refs_per_scene < len(refs):
            pick = sorted(rng.choice(len(refs), size=refs_per_scene,
                                     replace=False))
            refs = [refs[i] for i in pick]
        for ref in refs:
            tags = None if tagset in ("none", "idle") else ref.tags[tagset]
            for seq in planner.encode(vocab, ref.tokens, tags, approach, tagset):
                examples.append(TrainExample(
                    item.scene.id, seq.ids,
                    rankable=seq.kind != "multitask-tags"))
    return examples


def features_by_scene(items, dtype="float32"):
    return {item.scene.id: item.features.rows.astype(dtype)
            for item in items}


def _batches(examples, order, batch_size, scene_unique):
    if not scene_unique:
        return [order[i:i + batch_size].tolist()
                for i in range(0, len(order), batch_size)]
    remaining = order.tolist()
    out = []
    while remaining:
        cur, cur_scenes, rest = [], set(), []
        for idx in remaining:
            sid = examples[idx].scene_id
            if len(cur) < batch_size and sid not in cur_scenes:
                cur.append(idx)
                cur_scenes.add(sid)
            else:
                rest.append(idx)
        out.append(cur)
        remaining = rest
    return out


def train_epoch(model, examples, feats, rng, opt=OptimizerConfig(),
                batch_size=64, pad_id=0, ranker=None, rank_weight=1.0,
                epoch_label=""):
    """One pass over the examples in shuffled batches; mean NLL per token.

    With a ranker the batches keep at most one caption per scene so every
    in-batch negative is a true negative, and the contrastive loss joins
    the caption loss under a fixed weight.
    """
    if not examples:
        raise ValueError("empty training set")
    order = rng.permutation(len(examples))
    batches = _batches(examples, order, batch_size, ranker is not None)
    total_loss = 0.0
    total_tok = 0
    for b_i, batch in enumerate(batches):
        seqs = [examples[i] for i in batch]
        length = max(len(e.ids) for e in seqs)
        ids = np.full((len(seqs), length), pad_id, dtype=np.int64)
        for r, e in enumerate(seqs):
            ids[r, :len(e.ids)] = e.ids
        fbatch = np.stack([feats[e.scene_id] for e in seqs])
        model.store.zero_grad()
        if ranker is not None:
            ranker.store.zero_grad()
        loss, n_tok, l1 = model.forward_loss(ids, fbatch, pad_id)
        objective = nm.scale(loss, 1.0 / max(n_tok, 1.0))
        rankable = [r for r, e in enumerate(seqs) if e.rankable]
        if ranker is not None and len(rankable) >= 2:
            lengths = np.array([len(seqs[r].ids) for r in rankable])
            sel = np.array(rankable)
            sent = ranker.embed_sentence_batch(
                nm.embedding(l1, sel) if len(sel) != len(seqs) else l1,
                lengths)
            img = ranker.embed_image(nm.tensor(fbatch[sel]))
            rank_loss = ranker.contrastive_loss(img, sent)
            objective = nm.add(objective, nm.scale(
                rank_loss, rank_weight / len(sel)))
        if not np.isfinite(objective.item()):
            raise nm.TrainingDivergence(
                f"non-finite loss at {epoch_label} batch {b_i}")
        nm.backprop(objective)
        lr = opt.lr_at(model.store.step_count + 1)
        nm.adam_step(model.store, lr, opt.beta1, opt.beta2, opt.eps,
                     opt.clip_norm)
        if ranker is not None:
            nm.adam_step(ranker.store, lr, opt.beta1, opt.beta2, opt.eps,
                         opt.clip_norm)
        total_loss += float(loss.item())
        total_tok += int(n_tok)
    return total_loss / max(total_tok, 1)


class EarlyStopper:
    """Stop after `patience` consecutive epochs scoring strictly below best.

    The best score updates only on strict improvement, so the retained
    checkpoint is the earliest epoch achieving the maximum; an epoch that
    merely ties the best resets the losing streak without replacing it.
    Patience 0 behaves like 1: the first strictly-worse epoch stops.
    """

    def __init__(self, patience=5):
        self.patience = max(patience, 1)
        self.best = -np.inf
        self.best_epoch = 0
        self.streak = 0
        self.stop = False

    def update(self, epoch, score):
        """Record an epoch score; returns True when it set a new best."""
        if score > self.best:
            self.best = score
            self.best_epoch = epoch
            self.streak = 0
            return True
        if score < self.best:
            self.streak += 1
            if self.streak >= self.patience:
                self.stop = True
        else:
            self.streak = 0
        return False


@dataclass
class TrainResult:
    captioner_arrays: dict
    ranker_arrays: dict | None
    history: list          # (epoch, train loss, val bleu)
    best_epoch: int
    stopped_epoch: int
    best_bleu: float


def early_stopped_train(model, examples, feats, val_items, vocab, approach,
                        opt=OptimizerConfig(), patience=5, max_epochs=40,
                        batch_size=64, seed=0, ranker=None, rank_weight=1.0,
                        log=None):
    """Train until val BLEU stops improving.

    The best score must be beaten strictly; a run of `patience` epochs
    scoring strictly below the best stops training (epochs merely equal to
    the best reset the run but keep the earlier checkpoint). Returns the
    parameters of the best epoch.
    """
    if not val_items:
        raise ValueError("validation set is empty")
    rng = np.random.default_rng([seed, 77])
    kind = planner.decode_kind(approach)
    start = vocab.start_id(kind)
    max_len = default_max_len(kind)
    bad = forbidden_ids(vocab)
    val_feats = np.stack([item.features.rows for item in val_items]).astype(
        model.config.dtype)
    val_refs = [[r.tokens for r in item.references] for item in val_items]

    stopper = EarlyStopper(patience)
    best_cap = model.store.state_arrays()
    best_rank = ranker.store.state_arrays() if ranker else None
    history = []
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        mean_loss = train_epoch(model, examples, feats, rng, opt, batch_size,
                                vocab.pad_id, ranker, rank_weight,
                                epoch_label=f"epoch {epoch}")
        seqs = greedy_decode(model, val_feats, start, vocab.eos_id, max_len, bad)
        caps = [planner.strip(vocab, s) for s in seqs]
        score = bleu(caps, val_refs)
        history.append((epoch, mean_loss, score))
        if log:
            log(f"epoch {epoch}: loss {mean_loss:.4f} val-bleu {score:.2f}")
        if stopper.update(epoch, score):
            best_cap = model.store.state_arrays()
            best_rank = ranker.store.state_arrays() if ranker else None
        if stopper.stop:
            break
    model.store.load_arrays(best_cap)
    if ranker:
        ranker.store.load_arrays(best_rank)
    return TrainResult(best_cap, best_rank, history, stopper.best_epoch,
                       epoch, stopper.best)
