"""The full training step and loop.

One step of the main objective: augment the batch, run student and
teacher encoders, contrast over the unified 3N batch, distill log-ratio
targets from the teacher, add masked-token prediction, take an optimizer
step on the student (plus temperature), then EMA the teacher and advance
the schedules.  Baseline objectives (plain contrastive, contrastive with
naive augmented views, KL distillation) reuse the same plumbing.

Everything is a pure function of (config, dataset, seed): batch order,
augmentations and masking all derive their streams from the run seed and
the step index, which is what makes logs bitwise reproducible and lets a
resumed run continue exactly where the checkpoint left off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import losses, model, schedules, synth
from .errors import ConfigError, NonFiniteLossError
from .geometry import (
    AUGMENTED_IMAGE,
    EmbeddingBatch,
    distance_from_similarity,
    similarity_matrix,
)
from .losses import PairIndexSets, Temperature
from .rng import SplitMix64, derive_seed

OBJECTIVES = ("mcd", "clip", "clip_aug", "kl_distill")
OPTIMIZERS = ("sgd", "adam")
ENCODERS = ("student", "teacher")

METRICS_HEADER = ("step,loss_total,loss_c,loss_pos,loss_neg,loss_noisy,"
                  "loss_mlm,alpha,m,aug_w,grad_norm")


@dataclass
class TrainConfig:
    batch_size: int = 16
    total_steps: int = 2000
    learning_rate: float = 0.3
    optimizer: str = "sgd"
    beta: float = 0.2
    m0: float = 0.994
    seed: int = 0
    objective: str = "mcd"
    inference_encoder: str = "student"
    noise_rate: float = 0.1
    eps_dist: float = 1e-6
    max_pairs: int = 4096

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (pairwise losses need i != j)")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.inference_encoder not in ENCODERS:
            raise ConfigError(f"inference_encoder must be one of {ENCODERS}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError("noise_rate must be in [0, 1]")
        if self.learning_rate <= 0 or self.eps_dist <= 0 or self.max_pairs < 1:
            raise ConfigError("learning_rate, eps_dist and max_pairs must be positive")


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def apply_override(cfg: TrainConfig, key: str, value: str) -> TrainConfig:
    """Set one field from its string form; unknown keys are rejected."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    try:
        if kind in (int, "int"):
            parsed = int(value)
        elif kind in (float, "float"):
            parsed = float(value)
        else:
            parsed = value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return replace(cfg, **{key: parsed})


def parse_config_text(text: str, base: TrainConfig = None) -> TrainConfig:
    """Flat key=value lines; blank lines and #-comments allowed."""
    cfg = replace(base) if base is not None else TrainConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        cfg = apply_override(cfg, key, value)
    cfg.validate()
    return cfg


def load_config(path: str, base: TrainConfig = None) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base=base)


@dataclass
class StepReport:
    step: int
    losses: dict
    alpha: float
    m: float
    aug_w: float
    grad_norm: float

    def csv_row(self) -> str:
        vals = [
            self.losses.get("total", 0.0),
            self.losses.get("c", 0.0),
            self.losses.get("pos", 0.0),
            self.losses.get("neg", 0.0),
            self.losses.get("noisy", 0.0),
            self.losses.get("mlm", 0.0),
            self.alpha,
            self.m,
            self.aug_w,
            self.grad_norm,
        ]
        return ",".join([str(self.step)] + [repr(float(v)) for v in vals])


class Trainer:
    """Owns the parameters, the schedule and every per-run random stream."""

    def __init__(self, config: TrainConfig, dataset: list,
                 model_config: model.ModelConfig = None):
        config.validate()
        if not dataset:
            raise ConfigError("dataset is empty")
        if config.batch_size > len(dataset):
            raise ConfigError("batch_size exceeds dataset size")
        self.config = config
        self.dataset = dataset
        self.model_config = model_config or model.ModelConfig(seed=config.seed)
        self.params = model.init_params(
            replace(self.model_config, seed=derive_seed(config.seed, 0x1217)))
        self.teacher = model.make_teacher(self.params)
        self.schedule = schedules.ScheduleState(0, config.total_steps,
                                                m0=config.m0, beta=config.beta)
        self.adam_m = None
        self.adam_v = None
        self.adam_t = 0
        if config.optimizer == "adam":
            self.adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
            self.adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.kl_center = np.zeros(config.batch_size)
        self._pixel_cache = {}

    @property
    def pair(self) -> model.ModelPair:
        return model.ModelPair(self.params, self.teacher)

    # -- data plumbing -------------------------------------------------------

    def _pixels(self, record) -> np.ndarray:
        img = self._pixel_cache.get(id(record))
        if img is None:
            img = synth.render_scene(record.scene).reshape(-1)
            self._pixel_cache[id(record)] = img
        return img

    def batch_indices(self, step: int) -> list:
        """Shuffled cycle over the dataset; a pure function of (seed, step)."""
        n = len(self.dataset)
        bs = self.config.batch_size
        perm, epoch = None, -1
        out = []
        for k in range(bs):
            pos = step * bs + k
            if pos // n != epoch:
                epoch = pos // n
                perm = list(range(n))
                SplitMix64(derive_seed(self.config.seed, 0xE90C, epoch)).shuffle(perm)
            out.append(perm[pos % n])
        return out

    def _gather_batch(self, step: int):
        records = [self.dataset[i] for i in self.batch_indices(step)]
        images = np.stack([self._pixels(r) for r in records])
        tokens = np.stack([r.caption.padded(self.model_config.max_len) for r in records])
        aug_imgs = []
        for k, r in enumerate(records):
            seed = derive_seed(self.config.seed, 0xA06, step, k)
            base = self._pixels(r).reshape(self.model_config.image_shape)
            img, _ = synth.augment(r.scene, r.caption, seed, base=base)
            aug_imgs.append(img.reshape(-1))
        return images, np.stack(aug_imgs), tokens

    # -- one optimizer step ----------------------------------------------------

    def train_step(self) -> StepReport:
        cfg = self.config
        t = self.schedule.step
        alpha = schedules.alpha_at(self.schedule)
        m = schedules.momentum_at(self.schedule)
        aug_w = schedules.aug_nce_weight(self.schedule)

        images, aug_images, tokens = self._gather_batch(t)
        tau = Temperature(float(self.params["log_tau"]))

        img_emb, img_cache = model.encode_image(self.params, images)
        txt_emb, txt_cache = model.encode_text(self.params, tokens,
                                               pad_id=self.model_config.pad_id)
        aug_emb = aug_cache = None
        if cfg.objective != "clip":
            aug_emb, aug_cache = model.encode_image(self.params, aug_images,
                                                    modality=AUGMENTED_IMAGE)

        state = _StepState(self, images, aug_images, tokens,
                           img_emb, txt_emb, txt_cache, aug_emb, tau, alpha, aug_w)
        if cfg.objective == "clip":
            total_value = state.contrastive_only(with_aug=False)
        elif cfg.objective == "clip_aug":
            total_value = state.contrastive_only(with_aug=True)
        elif cfg.objective == "kl_distill":
            total_value = state.kl_distill()
        else:
            total_value = state.mcd()

        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        for key, g in model.encode_image_backward(img_cache, state.d_img).items():
            grads[key] += g
        for key, g in model.encode_text_backward(txt_cache, state.d_txt).items():
            grads[key] += g
        if aug_cache is not None:
            for key, g in model.encode_image_backward(aug_cache, state.d_aug).items():
                grads[key] += g
        for key, g in state.extra_grads.items():
            grads[key] += g
        grads["log_tau"] = np.array(state.grad_tau * tau.tau)

        if not math.isfinite(total_value) or any(
                not np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteLossError(
                f"non-finite loss or gradient at step {t}: "
                f"losses={state.loss_values}, tau={tau.tau:.4g}")

        grad_norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        self._apply_update(grads)

        projected = Temperature(float(self.params["log_tau"]))
        projected.project()
        self.params["log_tau"] = np.array(projected.log_tau)

        model.ema_update(self.teacher, self.params, m)
        self.schedule.step += 1

        state.loss_values["total"] = total_value
        return StepReport(t, state.loss_values, alpha, m, aug_w, grad_norm)

    def _apply_update(self, grads: dict) -> None:
        lr = self.config.learning_rate
        if self.config.optimizer == "sgd":
            for k, g in grads.items():
                self.params[k] = self.params[k] - lr * g
        else:
            self.adam_t += 1
            b1, b2, eps = 0.9, 0.999, 1e-8
            for k, g in grads.items():
                self.adam_m[k] = b1 * self.adam_m[k] + (1 - b1) * g
                self.adam_v[k] = b2 * self.adam_v[k] + (1 - b2) * g * g
                mhat = self.adam_m[k] / (1 - b1 ** self.adam_t)
                vhat = self.adam_v[k] / (1 - b2 ** self.adam_t)
                self.params[k] = self.params[k] - lr * mhat / (np.sqrt(vhat) + eps)

    # -- checkpointing ---------------------------------------------------------

    def save_checkpoint(self, path: str) -> None:
        tensors = {f"student/{k}": v for k, v in self.params.items()}
        tensors.update({f"teacher/{k}": v for k, v in self.teacher.items()})
        tensors["state/kl_center"] = self.kl_center
        if self.adam_m is not None:
            tensors.update({f"adam_m/{k}": v for k, v in self.adam_m.items()})
            tensors.update({f"adam_v/{k}": v for k, v in self.adam_v.items()})
            tensors["state/adam_t"] = np.array(float(self.adam_t))
        sched = {
            "step": self.schedule.step,
            "total_steps": self.schedule.total_steps,
            "m0": self.schedule.m0,
            "beta": self.schedule.beta,
        }
        model.write_checkpoint(path, tensors, sched, self.config.seed)

    def load_checkpoint(self, path: str) -> None:
        tensors, sched, seed = model.read_checkpoint(path)
        for k in self.params:
            self.params[k] = tensors[f"student/{k}"]
        for k in self.teacher:
            self.teacher[k] = tensors[f"teacher/{k}"]
        self.kl_center = tensors["state/kl_center"]
        if self.adam_m is not None:
            for k in self.adam_m:
                self.adam_m[k] = tensors[f"adam_m/{k}"]
                self.adam_v[k] = tensors[f"adam_v/{k}"]
            self.adam_t = int(tensors["state/adam_t"])
        self.schedule = schedules.ScheduleState(
            sched["step"], sched["total_steps"], m0=sched["m0"], beta=sched["beta"])
        if seed != self.config.seed:
            raise ConfigError(
                f"checkpoint seed {seed} does not match config seed {self.config.seed}")


class _StepState:
    """Per-step scratch: embedding gradients being accumulated, plus loss values."""

    def __init__(self, trainer, images, aug_images, tokens,
                 img_emb, txt_emb, txt_cache, aug_emb, tau, alpha, aug_w):
        self.trainer = trainer
        self.images = images
        self.aug_images = aug_images
        self.tokens = tokens
        self.img_emb = img_emb
        self.txt_emb = txt_emb
        self.txt_cache = txt_cache
        self.aug_emb = aug_emb
        self.tau = tau
        self.alpha = alpha
        self.aug_w = aug_w
        self.d_img = np.zeros_like(img_emb.vectors)
        self.d_txt = np.zeros_like(txt_emb.vectors)
        self.d_aug = np.zeros_like(aug_emb.vectors) if aug_emb is not None else None
        self.grad_tau = 0.0
        self.extra_grads = {}
        self.loss_values = {}

    def _add_clip(self, with_aug: bool) -> float:
        s = similarity_matrix(self.txt_emb, self.img_emb)
        lc = losses.clip_loss(s, self.tau)
        ds = lc.gradients["similarity"]
        self.d_txt += ds @ self.img_emb.vectors
        self.d_img += ds.T @ self.txt_emb.vectors
        self.grad_tau += lc.gradients["tau"]
        value = lc.value
        if with_aug:
            sp = similarity_matrix(self.txt_emb, self.aug_emb)
            la = losses.augmented_clip_loss(sp, self.tau)
            dsp = la.gradients["similarity"]
            self.d_txt += dsp @ self.aug_emb.vectors
            self.d_aug += dsp.T @ self.txt_emb.vectors
            self.grad_tau += la.gradients["tau"]
            value += la.value
        return value

    def contrastive_only(self, with_aug: bool) -> float:
        value = self._add_clip(with_aug)
        self.loss_values["c"] = value
        return value

    def kl_distill(self) -> float:
        """Contrastive (with naive augmented views) plus KL rows from the teacher."""
        tr = self.trainer
        value = self._add_clip(with_aug=True)
        self.loss_values["c"] = value

        t_img, _ = model.encode_image(tr.params, self.images, tower=tr.teacher)
        t_aug, _ = model.encode_image(tr.params, self.aug_images, tower=tr.teacher,
                                      modality=AUGMENTED_IMAGE)
        n = tr.config.batch_size
        s_student = np.vstack([
            similarity_matrix(self.img_emb, self.txt_emb).values,
            similarity_matrix(self.aug_emb, self.txt_emb).values,
        ])
        s_teacher = np.vstack([
            similarity_matrix(t_img, self.txt_emb).values,
            similarity_matrix(t_aug, self.txt_emb).values,
        ])
        kl = losses.kl_distill_baseline(s_student, s_teacher, tr.kl_center)
        dss = self.alpha * kl.gradients["s_student"]
        self.d_img += dss[:n] @ self.txt_emb.vectors
        self.d_aug += dss[n:] @ self.txt_emb.vectors
        self.d_txt += dss[:n].T @ self.img_emb.vectors + dss[n:].T @ self.aug_emb.vectors
        tr.kl_center = losses.ema_center(tr.kl_center, s_teacher)
        self.loss_values["kl"] = kl.value
        return value + self.alpha * kl.value

    def mcd(self) -> float:
        tr = self.trainer
        cfg = tr.config
        n = cfg.batch_size
        t = tr.schedule.step

        # unified 3N batch: rows [images | texts | augmented images]
        z = np.concatenate([self.img_emb.vectors, self.txt_emb.vectors,
                            self.aug_emb.vectors])
        modality = np.concatenate([self.img_emb.modality, self.txt_emb.modality,
                                   self.aug_emb.modality])
        group = np.tile(np.arange(n), 3)
        unified = EmbeddingBatch(z, modality=modality, group_id=group)
        sets = PairIndexSets.from_group_ids(group)
        lc = losses.mp_nce(unified, sets, self.tau, aug_weight=self.aug_w)

        # log-ratio distillation; teacher side constant
        t_img, _ = model.encode_image(tr.params, self.images, tower=tr.teacher)
        t_aug, _ = model.encode_image(tr.params, self.aug_images, tower=tr.teacher,
                                      modality=AUGMENTED_IMAGE)
        eps = cfg.eps_dist
        s_so = similarity_matrix(self.img_emb, self.txt_emb)
        s_sa = similarity_matrix(self.aug_emb, self.txt_emb)
        d_so = distance_from_similarity(s_so, eps)
        d_sa = distance_from_similarity(s_sa, eps)
        d_to = distance_from_similarity(similarity_matrix(t_img, self.txt_emb), eps)
        d_ta = distance_from_similarity(similarity_matrix(t_aug, self.txt_emb), eps)
        pair_seed = derive_seed(cfg.seed, 0xD157, t)
        lpos = losses.distill_pos(d_so, d_sa, d_to, d_ta)
        lneg = losses.distill_neg(d_so, d_sa, d_to, d_ta,
                                  max_pairs=cfg.max_pairs, seed=pair_seed)
        lnoisy = losses.distill_noisy(d_so, d_to, max_pairs=cfg.max_pairs, seed=pair_seed)
        ld = losses.LossResult(lpos.value + lneg.value + lnoisy.value, {})
        for part in (lpos, lneg, lnoisy):
            for k, g in part.gradients.items():
                ld.gradients[k] = ld.gradients.get(k, 0.0) + g

        # masked-token prediction on a second text pass
        masked = synth.mask_tokens(self.tokens, derive_seed(cfg.seed, 0x313, t))
        _, mlm_cache = model.encode_text(tr.params, masked.tokens,
                                         pad_id=tr.model_config.pad_id)
        logits = model.mlm_logits(tr.params, mlm_cache, masked.positions)
        lm = losses.mlm_loss(logits, masked.targets)

        total = losses.mcd_total(lc, ld, lm, self.alpha, cfg.beta)
        self.loss_values.update({"c": lc.value, "pos": lpos.value, "neg": lneg.value,
                                 "noisy": lnoisy.value, "mlm": lm.value})

        dz = total.gradients["embeddings"]
        self.d_img += dz[:n]
        self.d_txt += dz[n:2 * n]
        self.d_aug += dz[2 * n:]
        self.grad_tau += total.gradients["tau"]

        def chain(dd, s_mat, rows_emb, cols_emb, d_rows, d_cols):
            # distance = max(2(1 - s), eps); gradient is zero where the clamp is active
            active = (2.0 * (1.0 - s_mat.values)) > eps
            ds = -2.0 * dd * active
            d_rows += ds @ cols_emb.vectors
            d_cols += ds.T @ rows_emb.vectors

        if "d_s_orig" in total.gradients:
            chain(total.gradients["d_s_orig"], s_so, self.img_emb, self.txt_emb,
                  self.d_img, self.d_txt)
        if "d_s_aug" in total.gradients:
            chain(total.gradients["d_s_aug"], s_sa, self.aug_emb, self.txt_emb,
                  self.d_aug, self.d_txt)

        self.extra_grads = model.mlm_backward(tr.params, mlm_cache, masked.positions,
                                              total.gradients["logits"])
        return total.value


def run_training(config: TrainConfig, dataset: list, log_path: str = None,
                 checkpoint_path: str = None, checkpoint_every: int = None,
                 model_config: model.ModelConfig = None, trainer: Trainer = None):
    """Run config.total_steps steps (or the remainder after a resume).

    Returns (trainer, reports).  Writes one CSV line per step when
    ``log_path`` is given, and checkpoints at the configured interval plus
    once at the end when ``checkpoint_path`` is given.
    """
    if trainer is None:
        trainer = Trainer(config, dataset, model_config=model_config)
    reports = []
    log = open(log_path, "w", encoding="utf-8", newline="\n") if log_path else None
    try:
        if log:
            log.write(METRICS_HEADER + "\n")
        while trainer.schedule.step < config.total_steps:
            report = trainer.train_step()
            reports.append(report)
            if log:
                log.write(report.csv_row() + "\n")
            if (checkpoint_path and checkpoint_every
                    and trainer.schedule.step % checkpoint_every == 0
                    and trainer.schedule.step < config.total_steps):
                trainer.save_checkpoint(checkpoint_path)
    finally:
        if log:
            log.close()
    if checkpoint_path:
        trainer.save_checkpoint(checkpoint_path)
    return trainer, reports
