import numpy as np
import pytest

from captionplan import numerics as nm
from captionplan import planner, ranker as rk, world
from captionplan.captioner import (
    CaptionerConfig, Hypothesis, OptimizerConfig, beam_search,
    build_training_set, features_by_scene, forbidden_ids, make_captioner,
    score_sequence, train_epoch,
)
from captionplan.ranker import Ranker, rerank, retrieval_recall

D_H, D_F, D_E = 12, 9, 8


def make_ranker(pooling="weight", seed=0, dtype="float64"):
    return Ranker(D_H, D_F, embed_dim=D_E, pooling=pooling, seed=seed,
                  dtype=dtype)


# ---------------------------------------------------------------------------
# sentence pooling
# ---------------------------------------------------------------------------

def test_single_state_modes_coincide():
    rng = np.random.default_rng(0)
    r = make_ranker()
    for _ in range(20):
        states = rng.normal(0, 1, (1, D_H))
        embs = [r.embed_sentence(states, mode).data for mode in
                ("final", "mean", "weight")]
        assert np.allclose(embs[0], embs[1], atol=1e-12)
        assert np.allclose(embs[0], embs[2], atol=1e-12)


def test_identical_states_weight_equals_mean():
    rng = np.random.default_rng(1)
    r = make_ranker()
    h = rng.normal(0, 1, D_H)
    states = np.tile(h, (6, 1))
    alpha = r.pooling_weights(states)
    assert np.allclose(alpha.data, 1 / 6)
    assert np.allclose(r.embed_sentence(states, "weight").data,
                       r.embed_sentence(states, "mean").data, atol=1e-12)


def test_pooling_weights_normalized():
    rng = np.random.default_rng(2)
    r = make_ranker()
    for _ in range(10):
        alpha = r.pooling_weights(rng.normal(0, 2, (7, D_H))).data
        assert (alpha >= 0).all()
        assert abs(alpha.sum() - 1) < 1e-6


def test_empty_sequence_rejected():
    r = make_ranker()
    with pytest.raises(rk.EmptySequence):
        r.embed_sentence(np.zeros((0, D_H)))


def test_weight_pooling_gradients():
    rng = np.random.default_rng(3)
    r = make_ranker()
    r.store.add("states", rng.normal(0, 1, (5, D_H)))
    target = rng.normal(0, 1, D_E)

    def closure():
        emb = r.embed_sentence(r.store["states"], "weight")
        d = nm.sub(emb, target)
        return nm.sum_(nm.mul(d, d))

    report = nm.finite_diff_check(closure, r.store, tolerance=1e-6,
                                  samples_per_block=10)
    assert report.passed, str(report)


def test_batch_pooling_matches_single():
    rng = np.random.default_rng(4)
    r = make_ranker()
    # two padded rows with true sequence lengths 7 and 5
    states = rng.normal(0, 1, (2, 6, D_H))
    lengths = np.array([7, 5])
    for mode in ("final", "mean", "weight"):
        batch = r.embed_sentence_batch(nm.tensor(states), lengths, mode).data
        for i, ln in enumerate(lengths):
            single = r.embed_sentence(states[i, 1:ln - 1], mode).data
            assert np.allclose(batch[i], single, atol=1e-10), mode


# ---------------------------------------------------------------------------
# image pooling
# ---------------------------------------------------------------------------

def test_image_single_region_is_projection():
    rng = np.random.default_rng(5)
    r = make_ranker()
    f = rng.normal(0, 1, (1, D_F))
    out = r.embed_image(f).data
    manual = f[0] @ r.store["img_proj"].data
    manual /= np.linalg.norm(manual)
    assert np.allclose(out, manual, atol=1e-12)


def test_image_duplicate_rows_pool_invariant():
    rng = np.random.default_rng(6)
    r = make_ranker()
    row = rng.normal(0, 1, D_F)
    one = r.embed_image(row[None]).data
    many = r.embed_image(np.tile(row, (5, 1))).data
    assert np.allclose(one, many, atol=1e-12)


def test_image_embedding_unit_norm():
    rng = np.random.default_rng(7)
    r = make_ranker()
    batch = rng.normal(0, 3, (10, 6, D_F))
    out = r.embed_image(nm.tensor(batch)).data
    assert np.abs(np.linalg.norm(out, axis=1) - 1).max() < 1e-6


# ---------------------------------------------------------------------------
# contrastive loss
# ---------------------------------------------------------------------------

def _unit(rng, n, d):
    x = rng.normal(0, 1, (n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_contrastive_zero_when_margin_satisfied():
    r = make_ranker()
    # orthonormal matched pairs: positives at 1.0, negatives at 0.0
    base = np.eye(max(4, D_E))[:4, :D_E]
    loss = r.contrastive_loss(nm.tensor(base), nm.tensor(base), margin=0.2)
    assert loss.item() == 0.0


def test_contrastive_swap_symmetry():
    rng = np.random.default_rng(8)
    r = make_ranker()
    img = _unit(rng, 2, D_E)
    sent = _unit(rng, 2, D_E)
    a = r.contrastive_loss(nm.tensor(img), nm.tensor(sent)).item()
    b = r.contrastive_loss(nm.tensor(img[::-1].copy()),
                           nm.tensor(sent[::-1].copy())).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_contrastive_needs_two_pairs():
    r = make_ranker()
    with pytest.raises(ValueError):
        r.contrastive_loss(nm.tensor(np.ones((1, D_E))),
                           nm.tensor(np.ones((1, D_E))))


def test_contrastive_gradients_through_pooling():
    rng = np.random.default_rng(9)
    r = make_ranker()
    r.store.add("states", rng.normal(0, 1, (3, 6, D_H)))
    feats = rng.normal(0, 1, (3, 5, D_F))
    lengths = np.array([8, 6, 7])

    def closure():
        sent = r.embed_sentence_batch(r.store["states"], lengths, "weight")
        img = r.embed_image(nm.tensor(feats))
        return r.contrastive_loss(img, sent)

    report = nm.finite_diff_check(closure, r.store, tolerance=1e-5,
                                  samples_per_block=8)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

def test_retrieval_gallery_of_one():
    emb = np.ones((1, 4)) / 2.0
    out = retrieval_recall(emb, emb, [[0]], ks=(1,))
    assert out["text"][1] == 1.0
    assert out["image"][1] == 1.0


def test_retrieval_recall_monotone_in_k():
    rng = np.random.default_rng(10)
    img = _unit(rng, 30, 6)
    sent = _unit(rng, 90, 6)
    gold = [[3 * i, 3 * i + 1, 3 * i + 2] for i in range(30)]
    out = retrieval_recall(img, sent, gold, ks=(1, 5, 10))
    assert out["text"][1] <= out["text"][5] <= out["text"][10]
    assert out["image"][1] <= out["image"][5] <= out["image"][10]


def test_retrieval_random_embeddings_chance_level():
    rng = np.random.default_rng(11)
    hits = []
    for _ in range(40):
        img = _unit(rng, 100, 8)
        sent = _unit(rng, 100, 8)
        gold = [[i] for i in range(100)]
        out = retrieval_recall(img, sent, gold, ks=(10,))
        hits.append(out["text"][10])
    assert abs(np.mean(hits) - 0.10) < 0.02


# ---------------------------------------------------------------------------
# rerank
# ---------------------------------------------------------------------------

def fake_hyps(rng, n, d_h=D_H, t=4):
    hyps = []
    for i in range(n):
        states = [rng.normal(0, 1, d_h) for _ in range(t)]
        hyps.append(Hypothesis(ids=[1] + [5] * t + [2],
                               logprob=-float(i), finished=True,
                               states=states))
    return hyps


def test_rerank_single_candidate_identity():
    rng = np.random.default_rng(12)
    r = make_ranker()
    hyps = fake_hyps(rng, 1)
    out = rerank(hyps, np.ones(D_E) / np.sqrt(D_E), r)
    assert out[0][0] is hyps[0]


def test_rerank_lambda_one_orders_by_normalized_logprob():
    rng = np.random.default_rng(13)
    r = make_ranker()
    hyps = fake_hyps(rng, 5)
    out = rerank(hyps, np.zeros(D_E), r, lam=1.0)
    norm = [h.logprob / (len(h.ids) - 1) for h, _ in out]
    assert norm == sorted(norm, reverse=True)
    assert [s for _, s in out] == pytest.approx(norm)


def test_rerank_matches_bruteforce_scoring():
    rng = np.random.default_rng(14)
    r = make_ranker()
    img = _unit(rng, 1, D_E)[0]
    for lam in (0.0, 0.3, 1.0):
        hyps = fake_hyps(rng, 8)
        out = rerank(hyps, img, r, lam=lam)
        expected = []
        for h in hyps:
            with nm.no_grad():
                emb = r.embed_sentence(np.stack(h.states)).data
            score = lam * h.logprob / (len(h.ids) - 1) + \
                (1 - lam) * float(img @ emb)
            expected.append((score, h))
        expected.sort(key=lambda p: -p[0])
        assert [h for h, _ in out] == [h for _, h in expected]
        assert [s for _, s in out] == pytest.approx(
            [s for s, _ in expected], abs=1e-12)


# ---------------------------------------------------------------------------
# joint training keeps the captioner consistent
# ---------------------------------------------------------------------------

def test_joint_training_preserves_scoring_consistency():
    items = world.make_corpus(30, seed=77, n_refs=2)
    vocab = planner.build_vocabulary(
        [r.tokens for i in items for r in i.references], ("pos",))
    feats = features_by_scene(items, dtype="float64")
    cfg = CaptionerConfig(backend="recurrent", embed_dim=16, hidden_dim=24,
                          attn_dim=12, feat_proj_dim=12, dtype="float64")
    model = make_captioner(len(vocab), items[0].features.dim, cfg, seed=1)
    rnk = Ranker(model.state_dim, items[0].features.dim, embed_dim=16,
                 pooling="weight", seed=2, dtype="float64")
    examples = build_training_set(items, [i.scene.id for i in items], vocab,
                                  "interleave", "pos")
    rng = np.random.default_rng(5)
    for _ in range(3):
        train_epoch(model, examples, feats, rng, OptimizerConfig(lr=1e-3),
                    batch_size=16, pad_id=vocab.pad_id, ranker=rnk,
                    rank_weight=1.0)
    ref = items[0].references[0]
    seq = planner.encode(vocab, ref.tokens, ref.tags["pos"], "interleave",
                         "pos")[0]
    loss, n_tok, _ = model.forward_loss(
        np.array([seq.ids]), items[0].features.rows[None], vocab.pad_id)
    lp = score_sequence(model, items[0].features.rows, list(seq.ids))
    assert abs(loss.item() + lp) < 1e-5
