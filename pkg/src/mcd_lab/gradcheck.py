"""Central finite-difference verification of every hand-written gradient.

The numeric side perturbs one input entry at a time with step 1e-5 and
never touches the analytic code paths, so it is an independent oracle.
``run_all`` drives >= 20 seeded random instances per loss (and for the
encoder backward passes) and reports the worst relative error of each.
"""

from __future__ import annotations

import numpy as np

from . import losses, model
from .geometry import AUGMENTED_IMAGE, IMAGE, TEXT, EmbeddingBatch
from .losses import PairIndexSets

STEP = 1e-5
TOLERANCE = 1e-4


def central_diff(fn, x: np.ndarray, step: float = STEP, entries=None) -> np.ndarray:
    """Numeric gradient of scalar fn at x, entry by entry.

    ``entries`` optionally restricts to a list of flat indices; skipped
    entries come back as NaN so callers can mask them.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.full(x.size, np.nan)
    flat = x.reshape(-1).copy()
    idx = range(x.size) if entries is None else entries
    for k in idx:
        orig = flat[k]
        flat[k] = orig + step
        up = fn(flat.reshape(x.shape))
        flat[k] = orig - step
        down = fn(flat.reshape(x.shape))
        flat[k] = orig
        grad[k] = (up - down) / (2.0 * step)
    return grad.reshape(x.shape)


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst elementwise |a - n| / max(|a|, |n|, 1e-4) over defined entries.

    The 1e-4 floor keeps central-difference roundoff noise (~1e-10 for
    O(10) loss values) from registering as a relative error on entries
    whose true gradient is essentially zero; for such entries the check
    degenerates to an absolute bound of 1e-8, far tighter than the
    relative tolerance on ordinary entries.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    mask = ~np.isnan(numeric)
    if not mask.any():
        return 0.0
    a, n = analytic[mask], numeric[mask]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-4)
    return float((np.abs(a - n) / denom).max())


def _scalar_diff(fn, x0: float, step: float = STEP) -> float:
    return (fn(x0 + step) - fn(x0 - step)) / (2.0 * step)


def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# --- individual checks; each returns the worst relative error over `reps` ---

def check_info_nce(seed=0, reps=20):
    worst = 0.0
    for k in range(reps):
        rng = np.random.default_rng(seed + k)
        s = rng.uniform(-1, 1, (5, 5))
        tau = rng.uniform(0.2, 2.0)
        res = losses.info_nce(s, tau)
        num = central_diff(lambda m: losses.info_nce(m, tau).value, s)
        worst = max(worst, rel_err(res.gradients["similarity"], num))
        num_tau = _scalar_diff(lambda t: losses.info_nce(s, t).value, tau)
        worst = max(worst, rel_err(res.gradients["tau"], num_tau))
    return worst


def check_clip_loss(seed=0, reps=20):
    worst = 0.0
    for k in range(reps):
        rng = np.random.default_rng(seed + 1000 + k)
        s = rng.uniform(-1, 1, (4, 4))
        tau = rng.uniform(0.2, 2.0)
        res = losses.clip_loss(s, tau)
        num = central_diff(lambda m: losses.clip_loss(m, tau).value, s)
        worst = max(worst, rel_err(res.gradients["similarity"], num))
        num_tau = _scalar_diff(lambda t: losses.clip_loss(s, t).value, tau)
        worst = max(worst, rel_err(res.gradients["tau"], num_tau))
    return worst


def check_augmented_clip_loss(seed=0, reps=20):
    worst = 0.0
    for k in range(reps):
        rng = np.random.default_rng(seed + 2000 + k)
        s = rng.uniform(-1, 1, (4, 4))
        tau = rng.uniform(0.2, 2.0)
        res = losses.augmented_clip_loss(s, tau)
        num = central_diff(lambda m: losses.augmented_clip_loss(m, tau).value, s)
        worst = max(worst, rel_err(res.gradients["similarity"], num))
    return worst


def _mp_nce_instance(rng, n_groups=4, dim=6, aug_weight=1.0):
    z = _unit_rows(rng, 3 * n_groups, dim)
    modality = np.repeat([IMAGE, TEXT, AUGMENTED_IMAGE], n_groups)
    group = np.tile(np.arange(n_groups), 3)
    batch = EmbeddingBatch(z, modality=modality, group_id=group)
    sets = PairIndexSets.from_group_ids(group)
    return batch, sets, modality, group


def check_mp_nce(seed=0, reps=20):
    worst = 0.0
    for k in range(reps):
        rng = np.random.default_rng(seed + 3000 + k)
        batch, sets, modality, group = _mp_nce_instance(rng)
        tau = rng.uniform(0.3, 2.0)
        aug_w = rng.uniform(0.0, 1.0)
        res = losses.mp_nce(batch, sets, tau, aug_weight=aug_w)

        def value_at(z):
            b = EmbeddingBatch(z, modality=modality, group_id=group)
            return losses.mp_nce(b, sets, tau, aug_weight=aug_w).value

        num = central_diff(value_at, batch.vectors)
        worst = max(worst, rel_err(res.gradients["embeddings"], num))
        num_tau = _scalar_diff(
            lambda t: losses.mp_nce(batch, sets, t, aug_weight=aug_w).value, tau)
        worst = max(worst, rel_err(res.gradients["tau"], num_tau))
    return worst


def check_log_ratio_term(seed=0, reps=20):
    worst = 0.0
    for k in range(reps):
        rng = np.random.default_rng(seed + 4000 + k)
        ds = rng.uniform(0.1, 3.9, (4, 4))
        dt = rng.uniform(0.1, 3.9, (4, 4))
        idx = tuple(rng.integers(0, 4, 4))
        res = losses.log_ratio_term(ds, dt, idx)
        num = central_diff(lambda m: losses.log_ratio_term(m, dt, idx).value, ds)
        worst = max(worst, rel_err(res.gradients["d_student"], num))
    return worst


def _distill_check(fn, seed_base, seed=0, reps=20, noisy_only=False):
    worst = 0.0
    for k in range(reps):
        rng = np.random.default_rng(seed + seed_base + k)
        dso, dsa, dto, dta = (rng.uniform(0.1, 3.9, (4, 4)) for _ in range(4))
        if noisy_only:
            res = fn(dso, dto)
            num = central_diff(lambda m: fn(m, dto).value, dso)
            worst = max(worst, rel_err(res.gradients["d_s_orig"], num))
        else:
            res = fn(dso, dsa, dto, dta)
            num_o = central_diff(lambda m: fn(m, dsa, dto, dta).value, dso)
            num_a = central_diff(lambda m: fn(dso, m, dto, dta).value, dsa)
            worst = max(worst, rel_err(res.gradients["d_s_orig"], num_o))
            worst = max(worst, rel_err(res.gradients["d_s_aug"], num_a))
    return worst


def check_distill_pos(seed=0, reps=20):
    return _distill_check(losses.distill_pos, 5000, seed, reps)


def check_distill_neg(seed=0, reps=20):
    return _distill_check(losses.distill_neg, 6000, seed, reps)


def check_distill_noisy(seed=0, reps=20):
    return _distill_check(losses.distill_noisy, 7000, seed, reps, noisy_only=True)


def check_distill_total(seed=0, reps=20):
    return _distill_check(losses.distill_total, 8000, seed, reps)


def check_mlm_loss(seed=0, reps=20):
    worst = 0.0
    for k in range(reps):
        rng = np.random.default_rng(seed + 9000 + k)
        logits = rng.uniform(-3, 3, (5, 16))
        targets = rng.integers(0, 16, 5)
        res = losses.mlm_loss(logits, targets)
        num = central_diff(lambda m: losses.mlm_loss(m, targets).value, logits)
        worst = max(worst, rel_err(res.gradients["logits"], num))
    return worst


def check_kl_distill(seed=0, reps=20):
    worst = 0.0
    for k in range(reps):
        rng = np.random.default_rng(seed + 10000 + k)
        ss = rng.uniform(-1, 1, (5, 5))
        st = rng.uniform(-1, 1, (5, 5))
        center = rng.uniform(-0.3, 0.3, 5)
        res = losses.kl_distill_baseline(ss, st, center)
        num = central_diff(lambda m: losses.kl_distill_baseline(m, st, center).value, ss)
        worst = max(worst, rel_err(res.gradients["s_student"], num))
    return worst


# --- encoder backward passes -------------------------------------------------

_SMALL = model.ModelConfig(image_shape=(3, 8, 8), hidden_dim=10, embed_dim=9,
                           proj_dim=7, vocab_size=32, max_len=8)


def _sample_entries(rng, size, cap=60):
    if size <= cap:
        return None
    return sorted(rng.choice(size, size=cap, replace=False).tolist())


def check_encoder_image(seed=0, reps=20):
    """Random linear head on the image embeddings; params vs finite differences."""
    worst = 0.0
    for k in range(reps):
        rng = np.random.default_rng(seed + 11000 + k)
        cfg = _SMALL
        params = model.init_params(model.ModelConfig(**{**cfg.__dict__, "seed": seed + k}))
        x = rng.uniform(0, 1, (3, cfg.image_dim))
        head = rng.standard_normal((3, cfg.proj_dim))

        batch, cache = model.encode_image(params, x)
        grads = model.encode_image_backward(cache, head)

        for key in ("img_w1", "img_b1", "img_w2", "img_b2", "img_proj_w", "img_proj_b"):
            def value_at(w, key=key):
                trial = dict(params)
                trial[key] = w
                b, _ = model.encode_image(trial, x)
                return float((b.vectors * head).sum())

            entries = _sample_entries(rng, params[key].size)
            num = central_diff(value_at, params[key], entries=entries)
            worst = max(worst, rel_err(grads[key], num))
    return worst


def check_encoder_text(seed=0, reps=20):
    """Random head on sentence embeddings plus an MLM term; params vs finite differences."""
    worst = 0.0
    for k in range(reps):
        rng = np.random.default_rng(seed + 12000 + k)
        cfg = _SMALL
        params = model.init_params(model.ModelConfig(**{**cfg.__dict__, "seed": seed + 100 + k}))
        tokens = rng.integers(1, cfg.vocab_size, (3, cfg.max_len))
        tokens[0, -2:] = 0                       # some padding
        head = rng.standard_normal((3, cfg.proj_dim))
        positions = [(0, 1), (1, 3), (2, 0)]
        targets = rng.integers(0, cfg.vocab_size, len(positions))

        def full_value(trial):
            b, c = model.encode_text(trial, tokens)
            logits = model.mlm_logits(trial, c, positions)
            return float((b.vectors * head).sum()) + losses.mlm_loss(logits, targets).value

        batch, cache = model.encode_text(params, tokens)
        logits = model.mlm_logits(params, cache, positions)
        mlm = losses.mlm_loss(logits, targets)
        grads = model.encode_text_backward(cache, head)
        mg = model.mlm_backward(params, cache, positions, mlm.gradients["logits"])
        for key, g in mg.items():
            grads[key] = grads.get(key, 0.0) + g

        for key in ("txt_embed", "txt_w", "txt_b", "txt_proj_w", "txt_proj_b",
                    "mlm_w", "mlm_b"):
            def value_at(w, key=key):
                trial = dict(params)
                trial[key] = w
                return full_value(trial)

            entries = _sample_entries(rng, params[key].size)
            num = central_diff(value_at, params[key], entries=entries)
            worst = max(worst, rel_err(grads.get(key, np.zeros_like(params[key])), num))
    return worst


ALL_CHECKS = [
    ("info_nce", check_info_nce),
    ("clip_loss", check_clip_loss),
    ("augmented_clip_loss", check_augmented_clip_loss),
    ("mp_nce", check_mp_nce),
    ("log_ratio_term", check_log_ratio_term),
    ("distill_pos", check_distill_pos),
    ("distill_neg", check_distill_neg),
    ("distill_noisy", check_distill_noisy),
    ("distill_total", check_distill_total),
    ("mlm_loss", check_mlm_loss),
    ("kl_distill_baseline", check_kl_distill),
    ("encoder_image", check_encoder_image),
    ("encoder_text", check_encoder_text),
]


def run_all(seed: int = 0, reps: int = 20):
    """Run every check; returns [(name, worst_rel_err), ...]."""
    return [(name, fn(seed=seed, reps=reps)) for name, fn in ALL_CHECKS]
