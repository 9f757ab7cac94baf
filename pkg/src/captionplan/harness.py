"""Experiment orchestration: generate, split, train, decode, evaluate, report.

A run directory holds the corpus, split manifests, vocabulary, checkpoints,
decode files, per-cell metric records and a run manifest. Completed cells
are skipped on re-run; every artifact is a pure function of the resolved
configuration, so identical configs reproduce identical reports byte for
byte (single-threaded).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import stats

from . import captioner as cap
from . import evaluation as ev
from . import numerics as nm
from . import planner, splits as sp, world
from .ranker import Ranker, rerank, retrieval_recall

VERSION = "0.1.0"


@dataclass(frozen=True)
class ExperimentConfig:
    # world
    n_scenes: int = 3000
    n_refs: int = 5
    world_seed: int = 0
    world: world.WorldConfig = field(default_factory=world.WorldConfig)
    # splits
    heldout_sets: tuple = (0, 1)
    ratios: tuple = (0.7, 0.15, 0.15)
    split_seed: int = 0
    # planning cells
    approaches: tuple = ("standard", "interleave")
    tagsets: tuple = ("pos",)
    seeds: tuple = (1, 2, 3, 4, 5)
    # model
    captioner: cap.CaptionerConfig = field(default_factory=cap.CaptionerConfig)
    ranker_enabled: bool = False
    pooling: str = "weight"
    ranker_dim: int = 64
    margin: float = 0.2
    rank_weight: float = 1.0
    # training
    lr: float = 1e-4
    warmup_steps: int = 0
    batch_size: int = 64
    patience: int = 5
    max_epochs: int = 40
    refs_per_scene_train: int = 0  # 0 = every reference
    # decoding / evaluation
    beam: int = 20
    top_k: int = 5
    rerank_lambda: float = 0.0
    eval_split: str = "val"

    def cells(self):
        out = []
        for set_idx in self.heldout_sets:
            for approach in self.approaches:
                tagsets = ("none",) if approach == "standard" else self.tagsets
                for tagset in tagsets:
                    for seed in self.seeds:
                        out.append(Cell(set_idx, approach, tagset, seed))
        return out

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Cell:
    set_idx: int
    approach: str
    tagset: str
    seed: int

    @property
    def name(self):
        return f"set{self.set_idx}_{self.approach}_{self.tagset}_seed{self.seed}"


def config_from_dict(data):
    data = dict(data)
    if "world" in data and isinstance(data["world"], dict):
        data["world"] = world.WorldConfig(**{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in data["world"].items()})
    if "captioner" in data and isinstance(data["captioner"], dict):
        data["captioner"] = cap.CaptionerConfig(**data["captioner"])
    for key in ("heldout_sets", "ratios", "approaches", "tagsets", "seeds"):
        if key in data and isinstance(data[key], list):
            data[key] = tuple(data[key])
    return ExperimentConfig(**data)


def config_hash(config):
    return hashlib.sha256(
        json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()


def protocol_hash(config):
    """Config identity modulo the aggregation axes (seeds, held-out sets)."""
    data = config.to_dict()
    data.pop("seeds")
    data.pop("heldout_sets")
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def version_string(config):
    return f"captionplan-{VERSION}+cfg.{config_hash(config)[:8]}"


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _atomic_json(path, payload):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    os.replace(tmp, path)


class RunManifest:
    def __init__(self, out_dir, config):
        self.path = os.path.join(out_dir, "manifest.json")
        self.data = {
            "config_hash": config_hash(config),
            "protocol_hash": protocol_hash(config),
            "version": version_string(config),
            "stages": {},
            "cells": {},
            "warnings": [],
        }
        if os.path.exists(self.path):
            with open(self.path) as f:
                existing = json.load(f)
            if existing.get("config_hash") == self.data["config_hash"]:
                self.data = existing

    def save(self):
        _atomic_json(self.path, self.data)

    def stage_done(self, name):
        return self.data["stages"].get(name, {}).get("done", False)

    def mark_stage(self, name, seconds, **extra):
        self.data["stages"][name] = {"done": True, "seconds": seconds, **extra}
        self.save()

    def cell_status(self, cell_name):
        return self.data["cells"].get(cell_name, {}).get("status")

    def mark_cell(self, cell_name, status, seconds, **extra):
        self.data["cells"][cell_name] = {
            "status": status, "seconds": seconds, **extra}
        self.save()

    def warn(self, message):
        if message not in self.data["warnings"]:
            self.data["warnings"].append(message)
            self.save()


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_corpus(config, out_dir, manifest=None):
    path = os.path.join(out_dir, "corpus.jsonl")
    if os.path.exists(path) and (manifest is None or manifest.stage_done("corpus")):
        return world.read_corpus(path)
    t0 = time.time()
    items = world.make_corpus(config.n_scenes, config.world_seed, config.world,
                              n_refs=config.n_refs)
    world.write_corpus(items, path)
    if manifest:
        manifest.mark_stage("corpus", round(time.time() - t0, 3), path=path)
    return items


def stage_split(config, items, set_idx, out_dir, manifest=None):
    name = f"splits_set{set_idx}"
    path = os.path.join(out_dir, f"{name}.jsonl")
    if os.path.exists(path) and (manifest is None or manifest.stage_done(name)):
        return sp.read_split(path)
    t0 = time.time()
    spec = sp.SplitSpec(active_set=set_idx)
    split = sp.build_splits(items, spec, config.ratios, config.split_seed)
    sp.write_split(split, path)
    if manifest:
        manifest.mark_stage(name, round(time.time() - t0, 3), path=path,
                            warnings=split.warnings)
        for w in split.warnings:
            manifest.warn(f"set {set_idx}: {w}")
    return split


def enabled_tagsets(config):
    return tuple(t for t in config.tagsets if t not in ("none", "idle")) or ("pos",)


def stage_vocab(config, items, split, set_idx, out_dir, manifest=None):
    name = f"vocab_set{set_idx}"
    path = os.path.join(out_dir, f"{name}.tsv")
    if os.path.exists(path) and (manifest is None or manifest.stage_done(name)):
        return planner.read_vocabulary(path)
    t0 = time.time()
    train = set(split.train)
    tokens = [r.tokens for item in items if item.scene.id in train
              for r in item.references]
    vocab = planner.build_vocabulary(tokens, enabled_tagsets(config))
    planner.write_vocabulary(vocab, path)
    if manifest:
        manifest.mark_stage(name, round(time.time() - t0, 3), path=path)
    return vocab


def make_models(config, vocab, feat_dim, seed):
    model = cap.make_captioner(len(vocab), feat_dim, config.captioner, seed=seed)
    ranker = None
    if config.ranker_enabled:
        ranker = Ranker(model.state_dim, feat_dim, config.ranker_dim,
                        config.pooling, config.margin, seed=seed + 1000,
                        dtype=config.captioner.dtype)
    return model, ranker


def train_cell(config, items, split, vocab, cell, log=None):
    by_id = {item.scene.id: item for item in items}
    feat_dim = items[0].features.dim
    model, ranker = make_models(config, vocab, feat_dim, cell.seed)
    examples = cap.build_training_set(
        items, split.train, vocab, cell.approach, cell.tagset,
        refs_per_scene=config.refs_per_scene_train or None, seed=cell.seed)
    feats = cap.features_by_scene(items, dtype=config.captioner.dtype)
    val_items = [by_id[sid] for sid in split.val]
    opt = cap.OptimizerConfig(lr=config.lr, warmup_steps=config.warmup_steps)
    result = cap.early_stopped_train(
        model, examples, feats, val_items, vocab, cell.approach, opt,
        patience=config.patience, max_epochs=config.max_epochs,
        batch_size=config.batch_size, seed=cell.seed, ranker=ranker,
        rank_weight=config.rank_weight, log=log)
    return model, ranker, result


def save_cell_checkpoint(path, model, ranker, result, config):
    merged = nm.ParamStore(dtype=model.store.dtype)
    for name, tensor in model.store.params.items():
        merged.add("captioner/" + name, tensor.data)
    if ranker is not None:
        for name, tensor in ranker.store.params.items():
            merged.add("ranker/" + name, tensor.data)
    nm.save_checkpoint(path, merged, {
        "config_hash": config_hash(config),
        "best_epoch": result.best_epoch,
        "stopped_epoch": result.stopped_epoch,
        "history": [[e, float(l), float(b)] for e, l, b in result.history],
    })


def load_cell_checkpoint(path, config, vocab, feat_dim, seed):
    arrays, meta = nm.load_checkpoint(path)
    model, ranker = make_models(config, vocab, feat_dim, seed)
    model.store.load_arrays({k.split("/", 1)[1]: v for k, v in arrays.items()
                             if k.startswith("captioner/")})
    if ranker is not None:
        ranker.store.load_arrays({k.split("/", 1)[1]: v
                                  for k, v in arrays.items()
                                  if k.startswith("ranker/")})
    return model, ranker, meta


def decode_cell(config, items, split, vocab, cell, model, ranker=None):
    """Beam-decode the evaluation split; returns decode records per scene."""
    by_id = {item.scene.id: item for item in items}
    kind = planner.decode_kind(cell.approach)
    start = vocab.start_id(kind)
    max_len = cap.default_max_len(kind)
    bad = cap.forbidden_ids(vocab)
    eval_ids = getattr(split, config.eval_split)
    records = []
    for sid in eval_ids:
        item = by_id[sid]
        # with a ranker the whole beam is kept and re-ranked down to top_k
        pool_k = config.beam if ranker is not None else config.top_k
        hyps = cap.beam_search(model, item.features.rows, start, vocab.eos_id,
                               beam=config.beam, max_len=max_len,
                               k=pool_k, forbidden=bad,
                               collect_states=ranker is not None)
        scores = [None] * len(hyps)
        if ranker is not None:
            with nm.no_grad():
                img = ranker.embed_image(
                    item.features.rows.astype(model.config.dtype)).data
            ranked = rerank(hyps, img, ranker, lam=config.rerank_lambda,
                            k=config.top_k)
            hyps = [h for h, _ in ranked]
            scores = [s for _, s in ranked]
        for rank, (h, rscore) in enumerate(zip(hyps, scores)):
            tokens, tags, ok = planner.parse_generated(
                h.ids, kind, cell.tagset, vocab)
            records.append({
                "scene_id": sid,
                "rank": rank,
                "ids": [int(i) for i in h.ids],
                "tokens": tokens,
                "tags": tags,
                "logprob": float(h.logprob),
                "finished": bool(h.finished),
                "wellformed": bool(ok),
                "rerank_score": None if rscore is None else float(rscore),
            })
    return records


def write_decodes(records, path):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def read_decodes(path):
    with open(path) as f:
        return [json.loads(line) for line in f]


def generations_from_records(records):
    gens = {}
    for rec in sorted(records, key=lambda r: (r["scene_id"], r["rank"])):
        gens.setdefault(rec["scene_id"], []).append(ev.Generated(
            tokens=rec["tokens"], tags=rec["tags"],
            wellformed=rec["wellformed"], logprob=rec["logprob"],
            rerank_score=rec.get("rerank_score")))
    return gens


def _reference_states(model, vocab, sequences, feats_rows):
    """Teacher-forced layer-1 states for encoded reference streams."""
    lengths = np.array([len(s) for s in sequences])
    length = lengths.max()
    ids = np.full((len(sequences), length), vocab.pad_id, dtype=np.int64)
    for r, s in enumerate(sequences):
        ids[r, :len(s)] = s
    with nm.no_grad():
        _, _, l1 = model.forward_loss(ids, feats_rows, vocab.pad_id)
    return l1, lengths


def retrieval_block(config, items, split, vocab, cell, model, ranker,
                    ks=(1, 5, 10)):
    """Image/sentence retrieval over the evaluation gallery."""
    by_id = {item.scene.id: item for item in items}
    eval_ids = list(getattr(split, config.eval_split))
    gold = []
    seqs = []
    feat_rows = []
    for i, sid in enumerate(eval_ids):
        item = by_id[sid]
        golds = []
        for ref in item.references:
            tags = None if cell.tagset in ("none", "idle") \
                else ref.tags[cell.tagset]
            enc = planner.encode(vocab, ref.tokens, tags, cell.approach,
                                 cell.tagset)
            stream = [s for s in enc if s.kind != "multitask-tags"][0]
            golds.append(len(seqs))
            seqs.append(stream.ids)
            feat_rows.append(item.features.rows)
        gold.append(golds)
    dtype = model.config.dtype
    img_feats = np.stack([by_id[sid].features.rows for sid in eval_ids])
    with nm.no_grad():
        img_embs = ranker.embed_image(
            nm.tensor(img_feats.astype(dtype))).data
    sent_embs = []
    batch = 256
    for lo in range(0, len(seqs), batch):
        chunk = seqs[lo:lo + batch]
        feats = np.stack(feat_rows[lo:lo + batch]).astype(dtype)
        l1, lengths = _reference_states(model, vocab, chunk, feats)
        with nm.no_grad():
            sent_embs.append(ranker.embed_sentence_batch(l1, lengths).data)
    sent_embs = np.concatenate(sent_embs, axis=0)
    return retrieval_recall(img_embs, sent_embs, gold, ks)


def evaluate_cell(config, items, split, vocab, cell, records, model=None,
                  ranker=None):
    by_id = {item.scene.id: item for item in items}
    gens = generations_from_records(records)
    eval_ids = getattr(split, config.eval_split)
    refs_by_scene = {sid: by_id[sid].references for sid in eval_ids}
    pairs = split.spec.active_pairs
    k = config.top_k

    report = ev.MetricsReport(
        approach=cell.approach, tagset=cell.tagset,
        backend=config.captioner.backend, seed=cell.seed,
        heldout_set=cell.set_idx, split=config.eval_split, recall_k=k)

    per_pair = {}
    for pair in pairs:
        subset = {sid: gens[sid] for sid in eval_ids
                  if any(sp.pair_occurs(r, pair) for r in refs_by_scene[sid])}
        if not subset:
            continue
        per_pair[pair] = ev.recall_at_k(subset, pair, k)
        report.importance_curve[pair.name] = ev.min_importance_curve(
            subset, refs_by_scene, pair, k)
    report.per_pair_recall = {p.name: r for p, r in per_pair.items()}
    if per_pair:
        report.mean_recall = sum(per_pair.values()) / len(per_pair)
        report.category_table = ev.category_breakdown(per_pair)

    top1 = [gens[sid][0].tokens for sid in eval_ids]
    refs_tok = [[r.tokens for r in refs_by_scene[sid]] for sid in eval_ids]
    report.bleu = ev.bleu(top1, refs_tok)
    report.wellformed = ev.wellformed_fraction(gens)
    if cell.approach in ("sequential", "interleave"):
        report.tag_accuracy = ev.tag_accuracy(gens, cell.tagset, cell.approach)
    train_ids = set(split.train)
    train_caps = [r.tokens for item in items if item.scene.id in train_ids
                  for r in item.references]
    report.diversity = ev.diversity_metrics(top1, train_caps, refs_tok)
    if ranker is not None and model is not None:
        report.retrieval = retrieval_block(config, items, split, vocab, cell,
                                           model, ranker)
    return report.validate()


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------

def run_experiment(config, out_dir, log=print):
    """Execute the full cell matrix; resumable; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    _atomic_json(os.path.join(out_dir, "config.json"), config.to_dict())
    manifest = RunManifest(out_dir, config)
    items = stage_corpus(config, out_dir, manifest)
    failures = 0
    for set_idx in config.heldout_sets:
        split = stage_split(config, items, set_idx, out_dir, manifest)
        vocab = stage_vocab(config, items, split, set_idx, out_dir, manifest)
        for cell in config.cells():
            if cell.set_idx != set_idx:
                continue
            if manifest.cell_status(cell.name) == "done":
                continue
            t0 = time.time()
            try:
                ckpt = os.path.join(out_dir, f"ckpt_{cell.name}.bin")
                dec_path = os.path.join(out_dir, f"decode_{cell.name}.jsonl")
                met_path = os.path.join(out_dir, f"metrics_{cell.name}.json")
                model, ranker, result = train_cell(config, items, split,
                                                   vocab, cell)
                save_cell_checkpoint(ckpt, model, ranker, result, config)
                records = decode_cell(config, items, split, vocab, cell,
                                      model, ranker)
                write_decodes(records, dec_path)
                report = evaluate_cell(config, items, split, vocab, cell,
                                       records, model, ranker)
                _atomic_json(met_path, report.to_dict())
                manifest.mark_cell(
                    cell.name, "done", round(time.time() - t0, 3),
                    checkpoint=ckpt, decodes=dec_path, metrics=met_path,
                    best_epoch=result.best_epoch,
                    stopped_epoch=result.stopped_epoch,
                    best_bleu=result.best_bleu)
                if log:
                    log(f"[{cell.name}] done in {time.time() - t0:.1f}s "
                        f"(best epoch {result.best_epoch}, "
                        f"val BLEU {result.best_bleu:.2f})")
            except Exception as exc:  # noqa: BLE001 - cell isolation
                failures += 1
                manifest.mark_cell(cell.name, "failed",
                                   round(time.time() - t0, 3), error=str(exc))
                if log:
                    log(f"[{cell.name}] FAILED: {exc}")
    manifest.data["failures"] = failures
    manifest.save()
    return manifest


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def _t_interval(values):
    """(mean, std, 95% CI half-width) with std/CI empty for single values."""
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, None, None
    std = float(arr.std(ddof=1))
    half = float(stats.t.ppf(0.975, arr.size - 1) * std / np.sqrt(arr.size))
    return mean, std, half


def load_run(out_dir):
    with open(os.path.join(out_dir, "manifest.json")) as f:
        manifest = json.load(f)
    reports = []
    for cell_name, info in sorted(manifest["cells"].items()):
        if info.get("status") != "done":
            continue
        with open(info["metrics"]) as f:
            reports.append(json.load(f))
    return manifest, reports


def emit_report(run_dirs, out_dir=None, log=print):
    """Aggregate cell metrics across seeds and held-out sets.

    Refuses to mix runs with different protocols (anything beyond seeds or
    active held-out sets differing). Returns the machine-readable summary.
    """
    manifests, reports = [], []
    for d in run_dirs:
        m, r = load_run(d)
        manifests.append(m)
        reports.extend(r)
    protocols = {m["protocol_hash"] for m in manifests}
    if len(protocols) > 1:
        raise ValueError(
            "refusing to aggregate runs with different protocols: "
            + ", ".join(sorted(protocols)))
    if not reports:
        raise ValueError("no completed cells to report")

    groups = {}
    for rep in reports:
        groups.setdefault((rep["approach"], rep["tagset"]), []).append(rep)

    metric_defs = [
        ("recall", lambda r: r["mean_recall"], 100.0),
        ("bleu", lambda r: r["bleu"], 1.0),
        ("tag_acc", lambda r: r["tag_accuracy"], 100.0),
        ("wellformed", lambda r: r["wellformed"], 100.0),
        ("text_r1", lambda r: (r.get("retrieval") or {}).get(
            "text", {}).get("1"), 100.0),
        ("image_r1", lambda r: (r.get("retrieval") or {}).get(
            "image", {}).get("1"), 100.0),
    ]
    summary = {"groups": {}, "n_cells": len(reports),
               "protocol_hash": manifests[0]["protocol_hash"]}
    rows = []
    for (approach, tagset), reps in sorted(groups.items()):
        row = {"approach": approach, "tagset": tagset, "n": len(reps)}
        for name, getter, scale in metric_defs:
            vals = [getter(r) for r in reps]
            vals = [v for v in vals if v is not None]
            if not vals:
                row[name] = None
                continue
            mean, std, half = _t_interval([v * scale for v in vals])
            row[name] = {"mean": mean, "std": std, "ci95": half}
        curves = {}
        for rep in reps:
            for pair, pts in rep["importance_curve"].items():
                for j, rec in pts:
                    curves.setdefault(int(j), []).append(rec * 100.0)
        row["importance_curve"] = {
            j: float(np.mean(v)) for j, v in sorted(curves.items())}
        summary["groups"][f"{approach}+{tagset}"] = row
        rows.append(row)

    table = render_table(rows)
    curve_csv = render_curves(rows)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.txt"), "w") as f:
            f.write(table)
        with open(os.path.join(out_dir, "importance_curves.csv"), "w") as f:
            f.write(curve_csv)
        _atomic_json(os.path.join(out_dir, "summary.json"), summary)
    if log:
        log(table)
    return summary


def _fmt(cellval):
    if cellval is None:
        return "-"
    if cellval["std"] is None:
        return f"{cellval['mean']:.2f}"
    return f"{cellval['mean']:.2f}±{cellval['std']:.2f}"


def render_table(rows):
    headers = ["model", "n", f"R@K", "BLEU", "tag%", "wf%", "txtR@1", "imgR@1"]
    body = []
    for row in rows:
        body.append([
            f"{row['approach']}+{row['tagset']}",
            str(row["n"]),
            _fmt(row["recall"]),
            _fmt(row["bleu"]),
            _fmt(row["tag_acc"]),
            _fmt(row["wellformed"]),
            _fmt(row["text_r1"]),
            _fmt(row["image_r1"]),
        ])
    widths = [max(len(h), *(len(b[i]) for b in body))
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(b, widths)))
    return "\n".join(lines) + "\n"


def render_curves(rows):
    lines = ["model,min_importance,recall"]
    for row in rows:
        name = f"{row['approach']}+{row['tagset']}"
        for j, rec in row["importance_curve"].items():
            lines.append(f"{name},{j},{rec!r}")
    return "\n".join(lines) + "\n"
