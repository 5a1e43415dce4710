"""Retrieval and misalignment metrics, plus the objective bake-off.

Rankings are by cosine similarity with ties broken by candidate index
(stable argsort on the negated scores), so every report is a
deterministic function of (checkpoint, eval set, seed).
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import model, synth, trainer as trainer_mod
from .errors import DegenerateOracleError, TooFewPairsError
from .geometry import AUGMENTED_IMAGE
from .rng import derive_seed

RECALL_KS = (1, 5, 10)

COMPARISON_HEADER = "objective,seed,recall1_i2t,recall1_t2i,recall5_i2t,recall5_t2i,rho"


@dataclass
class RetrievalReport:
    recall_i2t: dict
    recall_t2i: dict
    median_rank_i2t: float
    median_rank_t2i: float


@dataclass
class AlignmentReport:
    rho: float
    count: int


# ---------------------------------------------------------------------------
# Rank statistics
# ---------------------------------------------------------------------------

def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties assigned the mean of their rank range."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    """Rank correlation: Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman_rho expects two equal-length vectors")
    rx, ry = average_ranks(x), average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        raise DegenerateOracleError("a rank vector is constant")
    return float(rx @ ry) / denom


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------

def retrieval_from_embeddings(img_vecs: np.ndarray, txt_vecs: np.ndarray) -> RetrievalReport:
    """Recall@K both directions; query i's true match is candidate i."""
    n = img_vecs.shape[0]
    if n < 10:
        raise TooFewPairsError(f"need >= 10 eval pairs, got {n}")
    sims = img_vecs @ txt_vecs.T                  # rows: image queries

    def direction(score_rows):
        m = score_rows.shape[0]
        order = np.argsort(-score_rows, axis=1, kind="stable")
        rank_of_true = np.empty(m, dtype=np.int64)
        for q in range(m):
            rank_of_true[q] = int(np.nonzero(order[q] == q)[0][0]) + 1
        recall = {k: float((rank_of_true <= k).mean()) for k in RECALL_KS}
        return recall, float(np.median(rank_of_true))

    r_i2t, med_i2t = direction(sims)
    r_t2i, med_t2i = direction(sims.T)
    return RetrievalReport(r_i2t, r_t2i, med_i2t, med_t2i)


def _embed_pairs(params: dict, teacher: dict, pairs, encoder: str,
                 model_config: model.ModelConfig):
    tower = teacher if encoder == "teacher" else None
    images = np.stack([synth.render_scene(r.scene).reshape(-1) for r in pairs])
    tokens = np.stack([r.caption.padded(model_config.max_len) for r in pairs])
    img_emb, _ = model.encode_image(params, images, tower=tower)
    txt_emb, _ = model.encode_text(params, tokens, pad_id=model_config.pad_id)
    return img_emb.vectors, txt_emb.vectors


def retrieval_eval(params: dict, teacher: dict, pairs, encoder: str = "student",
                   model_config: model.ModelConfig = None) -> RetrievalReport:
    """Rank clean eval pairs by cosine similarity with the chosen encoder."""
    model_config = model_config or model.ModelConfig()
    img_vecs, txt_vecs = _embed_pairs(params, teacher, pairs, encoder, model_config)
    return retrieval_from_embeddings(img_vecs, txt_vecs)


# ---------------------------------------------------------------------------
# Misalignment correlation
# ---------------------------------------------------------------------------

def correlation_from_scores(distances, oracle_misalignment) -> AlignmentReport:
    """Spearman rho between model distances and oracle misalignment."""
    oracle = np.asarray(oracle_misalignment, dtype=np.float64)
    if np.unique(oracle).size < 2:
        raise DegenerateOracleError("all oracle scores identical")
    rho = spearman_rho(np.asarray(distances, dtype=np.float64), oracle)
    return AlignmentReport(rho, len(oracle))


def misalignment_correlation(params: dict, teacher: dict, pairs, seed: int,
                             encoder: str = "student",
                             model_config: model.ModelConfig = None) -> AlignmentReport:
    """Does the model's augmented-image-to-text distance track true misalignment?

    Each eval pair gets one seeded augmentation; the model's distance
    D(augmented image, own text) is rank-correlated against the oracle's
    (1 - alignment_score).
    """
    model_config = model_config or model.ModelConfig()
    tower = teacher if encoder == "teacher" else None
    aug_imgs, oracle = [], []
    for k, r in enumerate(pairs):
        img, rec = synth.augment(r.scene, r.caption, derive_seed(seed, 0xE7A1, k))
        aug_imgs.append(img.reshape(-1))
        oracle.append(1.0 - rec.alignment_score)
    tokens = np.stack([r.caption.padded(model_config.max_len) for r in pairs])
    aug_emb, _ = model.encode_image(params, np.stack(aug_imgs), tower=tower,
                                    modality=AUGMENTED_IMAGE)
    txt_emb, _ = model.encode_text(params, tokens, pad_id=model_config.pad_id)
    cos = (aug_emb.vectors * txt_emb.vectors).sum(axis=1)
    distances = 2.0 * (1.0 - cos)
    return correlation_from_scores(distances, oracle)


# ---------------------------------------------------------------------------
# Objective comparison
# ---------------------------------------------------------------------------

@dataclass
class ComparisonRow:
    objective: str
    seed: int
    recall1_i2t: float
    recall1_t2i: float
    recall5_i2t: float
    recall5_t2i: float
    rho: float


def _run_one(args):
    base, objective, seed, train_set, eval_set = args
    cfg = replace(base, objective=objective, seed=seed)
    tr, _ = trainer_mod.run_training(cfg, train_set)
    enc = cfg.inference_encoder
    rep = retrieval_eval(tr.params, tr.teacher, eval_set, encoder=enc,
                         model_config=tr.model_config)
    align = misalignment_correlation(tr.params, tr.teacher, eval_set,
                                     seed=derive_seed(seed, 0xE7A1),
                                     encoder=enc, model_config=tr.model_config)
    return ComparisonRow(objective, seed,
                         rep.recall_i2t[1], rep.recall_t2i[1],
                         rep.recall_i2t[5], rep.recall_t2i[5], align.rho)


def compare_objectives(base: trainer_mod.TrainConfig, objectives, seeds,
                       train_set, eval_set, csv_path: str = None,
                       svg_path: str = None, threads: int = 1):
    """Train every (objective, seed) on identical data; emit rows + summaries.

    Returns (rows, summary) where summary maps objective -> dict of means
    and standard deviations across seeds.
    """
    jobs = [(base, o, s, train_set, eval_set) for o in objectives for s in seeds]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_run_one, jobs))
    else:
        rows = [_run_one(j) for j in jobs]

    summary = {}
    for o in objectives:
        got = [r for r in rows if r.objective == o]
        stats = {}
        for key in ("recall1_i2t", "recall1_t2i", "recall5_i2t", "recall5_t2i", "rho"):
            vals = np.array([getattr(r, key) for r in got])
            stats[key + "_mean"] = float(vals.mean())
            stats[key + "_std"] = float(vals.std())
        summary[o] = stats

    if csv_path:
        write_comparison_csv(rows, summary, csv_path)
    if svg_path:
        from .plotting import comparison_chart
        comparison_chart(rows, svg_path)
    return rows, summary


def write_comparison_csv(rows, summary, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(COMPARISON_HEADER + "\n")
        for r in rows:
            fh.write(",".join([r.objective, str(r.seed),
                               repr(r.recall1_i2t), repr(r.recall1_t2i),
                               repr(r.recall5_i2t), repr(r.recall5_t2i),
                               repr(r.rho)]) + "\n")
        for o, stats in summary.items():
            fh.write(",".join([o, "mean",
                               repr(stats["recall1_i2t_mean"]), repr(stats["recall1_t2i_mean"]),
                               repr(stats["recall5_i2t_mean"]), repr(stats["recall5_t2i_mean"]),
                               repr(stats["rho_mean"])]) + "\n")
            fh.write(",".join([o, "std",
                               repr(stats["recall1_i2t_std"]), repr(stats["recall1_t2i_std"]),
                               repr(stats["recall5_i2t_std"]), repr(stats["recall5_t2i_std"]),
                               repr(stats["rho_std"])]) + "\n")


def read_comparison_csv(path: str):
    """Seed rows and summary rows from a comparison CSV."""
    rows, summaries = [], []
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if ",".join(header) != COMPARISON_HEADER:
            from .errors import BadHeaderError
            raise BadHeaderError(f"unexpected header {header}")
        for rec in reader:
            if not rec:
                continue
            if rec[1] in ("mean", "std"):
                summaries.append(rec)
            else:
                rows.append(ComparisonRow(rec[0], int(rec[1]), *map(float, rec[2:])))
    return rows, summaries
