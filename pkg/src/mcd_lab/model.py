"""Tiny dual encoders with hand-written backward passes.

The image tower is a 2-layer tanh perceptron on flattened pixels; the
text tower is an embedding table with mean pooling over non-pad positions
and one linear layer.  Both project into a shared unit sphere.  The
teacher is a momentum (EMA) copy of the image tower only; the projection
layers and text tower are shared with the student on the teacher side.

Parameters live in a flat dict of named float64 arrays so that the
optimizer, the EMA update and the checkpoint writer can stay generic.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptCheckpointError,
    PositionOutOfRangeError,
    ShapeMismatchError,
    TokenOutOfRangeError,
)
from .geometry import IMAGE, TEXT, EmbeddingBatch, l2_normalize
from .rng import SplitMix64

IMAGE_TOWER_KEYS = ("img_w1", "img_b1", "img_w2", "img_b2")

CHECKPOINT_MAGIC = b"MCDCKPT1"


@dataclass
class ModelConfig:
    image_shape: tuple = (3, 32, 32)
    hidden_dim: int = 128
    embed_dim: int = 64
    proj_dim: int = 32
    vocab_size: int = 32
    max_len: int = 16
    pad_id: int = 0
    init_tau: float = 0.07
    seed: int = 0

    @property
    def image_dim(self) -> int:
        c, h, w = self.image_shape
        return c * h * w


def init_params(config: ModelConfig) -> dict:
    """Fresh student parameters, uniform(+-sqrt(3/fan_in)).

    The sqrt(3) gain keeps activation variance constant through the
    stacked linear layers; without it the pre-normalization outputs
    shrink to ~0.03 norm and the unit-sphere Jacobian blows the first
    gradient step up thirtyfold.
    """
    rng = SplitMix64(config.seed)

    def uniform(shape, fan_in):
        bound = np.sqrt(3.0 / fan_in)
        flat = rng.uniform_array(int(np.prod(shape))) * (2 * bound) - bound
        return flat.reshape(shape)

    d_in, hid = config.image_dim, config.hidden_dim
    emb, proj, vocab = config.embed_dim, config.proj_dim, config.vocab_size
    return {
        "img_w1": uniform((d_in, hid), d_in),
        "img_b1": np.zeros(hid),
        "img_w2": uniform((hid, emb), hid),
        "img_b2": np.zeros(emb),
        "img_proj_w": uniform((emb, proj), emb),
        "img_proj_b": np.zeros(proj),
        "txt_embed": uniform((vocab, emb), emb),
        "txt_w": uniform((emb, emb), emb),
        "txt_b": np.zeros(emb),
        "txt_proj_w": uniform((emb, proj), emb),
        "txt_proj_b": np.zeros(proj),
        "mlm_w": uniform((emb, vocab), emb),
        "mlm_b": np.zeros(vocab),
        "log_tau": np.array(np.log(config.init_tau)),
    }


def make_teacher(params: dict) -> dict:
    """Exact copy of the student image tower at step 0."""
    return {k: params[k].copy() for k in IMAGE_TOWER_KEYS}


@dataclass
class ModelPair:
    """Student parameters plus the EMA image tower; the optimizer never touches the teacher."""

    student: dict
    teacher_image: dict

    @classmethod
    def fresh(cls, config: ModelConfig) -> "ModelPair":
        student = init_params(config)
        return cls(student, make_teacher(student))


def ema_update(pair_or_teacher, student_or_m, m=None) -> None:
    """teacher <- m * teacher + (1 - m) * student, elementwise, in place.

    Accepts either (ModelPair, m) or (teacher_dict, student_dict, m).
    """
    if m is None:
        pair, m = pair_or_teacher, student_or_m
        teacher, student = pair.teacher_image, pair.student
    else:
        teacher, student = pair_or_teacher, student_or_m
    for k, w_t in teacher.items():
        w_s = student[k]
        if w_t.shape != w_s.shape:
            raise ShapeMismatchError(f"{k}: teacher {w_t.shape} vs student {w_s.shape}")
        w_t *= m
        w_t += (1.0 - m) * w_s


# ---------------------------------------------------------------------------
# Image tower
# ---------------------------------------------------------------------------

@dataclass
class ImageCache:
    x: np.ndarray
    a1: np.ndarray
    e: np.ndarray
    p: np.ndarray
    norms: np.ndarray
    y: np.ndarray
    params: dict = field(repr=False, default=None)
    tower: dict = field(repr=False, default=None)


def encode_image(params: dict, images, modality: int = IMAGE, group_id=None,
                 tower: dict = None):
    """Flattened pixels -> hidden tanh layer -> embedding -> projection -> unit sphere.

    ``tower`` overrides the MLP weights (used for the teacher); the
    projection always comes from ``params``.  Returns (EmbeddingBatch, cache).
    """
    tower = tower if tower is not None else params
    x = np.asarray(images, dtype=np.float64)
    d_in = tower["img_w1"].shape[0]
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != d_in:
        raise ShapeMismatchError(f"expected flattened images of size {d_in}, got {x.shape[1]}")

    a1 = np.tanh(x @ tower["img_w1"] + tower["img_b1"])
    e = a1 @ tower["img_w2"] + tower["img_b2"]
    p = e @ params["img_proj_w"] + params["img_proj_b"]
    norms = np.linalg.norm(p, axis=1)
    batch = l2_normalize(p, modality=np.full(x.shape[0], modality), group_id=group_id)
    cache = ImageCache(x, a1, e, p, norms, batch.vectors, params=params, tower=tower)
    return batch, cache


def encode_image_backward(cache: ImageCache, grad_y: np.ndarray) -> dict:
    """Chain an upstream gradient on the unit-sphere outputs back to the weights.

    Includes the normalization Jacobian (I - y y^T) / ||p||.
    """
    params, tower = cache.params, cache.tower
    y, r = cache.y, cache.norms[:, None]
    grad_p = (grad_y - (grad_y * y).sum(axis=1, keepdims=True) * y) / r

    grads = {
        "img_proj_w": cache.e.T @ grad_p,
        "img_proj_b": grad_p.sum(axis=0),
    }
    grad_e = grad_p @ params["img_proj_w"].T
    grads["img_w2"] = cache.a1.T @ grad_e
    grads["img_b2"] = grad_e.sum(axis=0)
    grad_a1 = grad_e @ tower["img_w2"].T
    grad_h1 = grad_a1 * (1.0 - cache.a1 ** 2)
    grads["img_w1"] = cache.x.T @ grad_h1
    grads["img_b1"] = grad_h1.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# Text tower
# ---------------------------------------------------------------------------

@dataclass
class TextCache:
    tokens: np.ndarray
    nonpad: np.ndarray
    counts: np.ndarray
    mean: np.ndarray
    f: np.ndarray
    p: np.ndarray
    norms: np.ndarray
    y: np.ndarray
    hidden: np.ndarray
    params: dict = field(repr=False, default=None)


def encode_text(params: dict, tokens, group_id=None, pad_id: int = 0):
    """Token ids -> mean-pooled embedding -> linear -> projection -> unit sphere.

    Also produces per-token hidden states for the MLM head: the token's
    own table row plus the sequence mean, so masked positions see some
    context.  Pad positions are excluded from the pool and have zero
    hidden states.  Returns (EmbeddingBatch, cache).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ShapeMismatchError("tokens must be (batch, max_len)")
    table = params["txt_embed"]
    vocab = table.shape[0]
    if tokens.min() < 0 or tokens.max() >= vocab:
        raise TokenOutOfRangeError(f"token id outside [0, {vocab})")

    nonpad = tokens != pad_id
    counts = nonpad.sum(axis=1)
    if np.any(counts == 0):
        raise TokenOutOfRangeError("a sequence consists only of padding")

    emb = table[tokens]                              # (n, L, emb)
    masked = emb * nonpad[:, :, None]
    mean = masked.sum(axis=1) / counts[:, None]
    f = mean @ params["txt_w"] + params["txt_b"]
    p = f @ params["txt_proj_w"] + params["txt_proj_b"]
    norms = np.linalg.norm(p, axis=1)
    batch = l2_normalize(p, modality=np.full(tokens.shape[0], TEXT), group_id=group_id)

    hidden = (emb + mean[:, None, :]) * nonpad[:, :, None]
    cache = TextCache(tokens, nonpad, counts, mean, f, p, norms, batch.vectors,
                      hidden, params=params)
    return batch, cache


def encode_text_backward(cache: TextCache, grad_y: np.ndarray) -> dict:
    """Backward through the sentence-embedding path only (not the MLM head)."""
    params = cache.params
    y, r = cache.y, cache.norms[:, None]
    grad_p = (grad_y - (grad_y * y).sum(axis=1, keepdims=True) * y) / r

    grads = {
        "txt_proj_w": cache.f.T @ grad_p,
        "txt_proj_b": grad_p.sum(axis=0),
    }
    grad_f = grad_p @ params["txt_proj_w"].T
    grads["txt_w"] = cache.mean.T @ grad_f
    grads["txt_b"] = grad_f.sum(axis=0)
    grad_mean = grad_f @ params["txt_w"].T

    grad_table = np.zeros_like(params["txt_embed"])
    per_pos = grad_mean[:, None, :] / cache.counts[:, None, None] * cache.nonpad[:, :, None]
    np.add.at(grad_table, cache.tokens, per_pos)
    grads["txt_embed"] = grad_table
    return grads


def mlm_logits(params: dict, cache: TextCache, positions):
    """One logit row per masked position, gathered in mask order.

    ``positions`` is a sequence of (row, position) index pairs into the
    token grid that produced ``cache``.
    """
    n, length = cache.tokens.shape
    vocab = params["mlm_w"].shape[1]
    if len(positions) == 0:
        return np.zeros((0, vocab))
    pos = np.asarray(positions, dtype=np.int64)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise PositionOutOfRangeError("positions must be (row, position) pairs")
    if (pos[:, 0].min() < 0 or pos[:, 0].max() >= n
            or pos[:, 1].min() < 0 or pos[:, 1].max() >= length):
        raise PositionOutOfRangeError(f"mask position outside ({n}, {length})")
    h = cache.hidden[pos[:, 0], pos[:, 1]]
    return h @ params["mlm_w"] + params["mlm_b"]


def mlm_backward(params: dict, cache: TextCache, positions, grad_logits: np.ndarray) -> dict:
    """Backward through the MLM head and its context-enriched hidden states."""
    vocab = params["mlm_w"].shape[1]
    grads = {
        "mlm_w": np.zeros_like(params["mlm_w"]),
        "mlm_b": np.zeros(vocab),
        "txt_embed": np.zeros_like(params["txt_embed"]),
    }
    if len(positions) == 0:
        return grads
    pos = np.asarray(positions, dtype=np.int64)
    h = cache.hidden[pos[:, 0], pos[:, 1]]
    grads["mlm_w"] = h.T @ grad_logits
    grads["mlm_b"] = grad_logits.sum(axis=0)

    grad_h = grad_logits @ params["mlm_w"].T           # (k, emb)
    grad_h = grad_h * cache.nonpad[pos[:, 0], pos[:, 1]][:, None]  # pad hidden states are zero
    table = grads["txt_embed"]
    # hidden = E[token] + mean(E[nonpad tokens]); both routes feed the table
    np.add.at(table, cache.tokens[pos[:, 0], pos[:, 1]], grad_h)
    rows = pos[:, 0]
    grad_mean = np.zeros_like(cache.mean)
    np.add.at(grad_mean, rows, grad_h)
    per_pos = grad_mean[:, None, :] / cache.counts[:, None, None] * cache.nonpad[:, :, None]
    np.add.at(table, cache.tokens, per_pos)
    return grads


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def write_checkpoint(path: str, tensors: dict, schedule: dict, seed: int) -> None:
    """Versioned binary container: magic, JSON manifest, then raw tensor data.

    Tensors are float64 little-endian row-major, written in sorted name
    order.  The write is atomic (temp file + rename).
    """
    names = sorted(tensors)
    manifest = {
        "tensors": [{"name": k, "shape": list(tensors[k].shape)} for k in names],
        "schedule": schedule,
        "seed": seed,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for k in names:
            fh.write(np.ascontiguousarray(tensors[k], dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path: str):
    """Inverse of write_checkpoint; returns (tensors, schedule, seed).

    Raises CorruptCheckpointError on bad magic, manifest or truncation.
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CorruptCheckpointError(str(exc)) from exc
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CorruptCheckpointError("bad magic string")
    off = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if off + header_len > len(blob):
        raise CorruptCheckpointError("truncated manifest")
    try:
        manifest = json.loads(blob[off:off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError("unreadable manifest") from exc
    off += header_len

    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        if off + nbytes > len(blob):
            raise CorruptCheckpointError(f"truncated tensor data for {entry['name']}")
        arr = np.frombuffer(blob[off:off + nbytes], dtype="<f8").reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64).copy()
        off += nbytes
    if off != len(blob):
        raise CorruptCheckpointError("trailing bytes after tensor data")
    return tensors, manifest["schedule"], manifest["seed"]
