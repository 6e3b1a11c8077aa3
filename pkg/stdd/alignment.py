"""
Fine-grained frame/prompt alignment.

Frame-to-prompt and prompt-to-frame scores against per-class prompt banks,
their average, the cross-entropy and feature-distillation losses, and
multi-view zero-shot prediction.
"""
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from . import weights_io
from .errors import DimensionError, ReportIOError, ValidationError

logger = logging.getLogger(__name__)

_MASKED = -1e30


class TextBank:
    """
    Per-class prompt embeddings, padded to a common prompt count.

    Attributes:
        embeddings (Tensor): [K, N_max, D]; rows past a class's count are zero
        counts (np.ndarray): [K] valid prompt count per class, each >= 1
        class_names (list[str]): K names
        prompts (list[list[str]] | None): Prompt strings behind the rows
    """

    def __init__(self, embeddings, counts, class_names, prompts=None):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        counts = np.asarray(counts, dtype=np.int64)
        if embeddings.ndim != 3 or counts.shape != (embeddings.shape[0],):
            raise DimensionError(f"text bank needs [K, N, D] embeddings and [K] counts, got "
                                 f"{embeddings.shape} and {counts.shape}")
        if len(class_names) != embeddings.shape[0]:
            raise DimensionError(f"{len(class_names)} class names for {embeddings.shape[0]} classes")
        if (counts < 1).any() or (counts > embeddings.shape[1]).any():
            raise ValidationError(f"prompt counts {counts.tolist()} outside [1, {embeddings.shape[1]}]")
        valid = np.arange(embeddings.shape[1])[None, :] < counts[:, None]
        norms = np.linalg.norm(embeddings, axis=-1)
        if not np.allclose(norms[valid], 1.0, atol=1e-6):
            raise ValidationError("text bank rows must have unit L2 norm")
        embeddings = np.where(valid[..., None], embeddings, 0.0)
        self.embeddings = tn.Tensor(embeddings)
        self.counts = counts
        self.valid = valid
        self.class_names = list(class_names)
        self.prompts = prompts

    @property
    def num_classes(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[-1]

    @classmethod
    def from_prototypes(cls, rows_per_class, class_names=None):
        """
        Build from one [N_k, D] array per class; rows are normalized here.
        """
        if not rows_per_class:
            raise ValidationError("text bank needs at least one class")
        arrays = [np.atleast_2d(np.asarray(r, dtype=np.float64)) for r in rows_per_class]
        width = arrays[0].shape[1]
        n_max = max(a.shape[0] for a in arrays)
        out = np.zeros((len(arrays), n_max, width))
        for k, rows in enumerate(arrays):
            if rows.shape[1] != width:
                raise DimensionError(f"class {k} prompts have width {rows.shape[1]}, expected {width}")
            out[k, :rows.shape[0]] = rows / np.linalg.norm(rows, axis=-1, keepdims=True)
        names = class_names or [str(k) for k in range(len(arrays))]
        return cls(out, [a.shape[0] for a in arrays], names)

    @classmethod
    def from_prompt_banks(cls, banks, embedder):
        """Embed every class's C^st with a text embedder."""
        rows = [embedder.embed_many(bank.combined) for bank in banks]
        bank = cls.from_prototypes(rows, [b.action for b in banks])
        bank.prompts = [b.combined for b in banks]
        return bank

    def save(self, path):
        """
        Write `<path>` (JSON sidecar) and the embeddings next to it in the binary weights format.
        """
        base, _ = os.path.splitext(path)
        array_path = base + ".bin"
        weights_io.save_arrays(array_path, {"text_bank.embeddings": self.embeddings.data})
        doc = {"classes": self.class_names, "counts": self.counts.tolist(),
               "embeddings": os.path.basename(array_path), "prompts": self.prompts}
        try:
            with open(path, "w", encoding="utf-8") as handle:
                json.dump(doc, handle, indent=2, ensure_ascii=False)
                handle.write("\n")
        except OSError as exc:
            raise ReportIOError(f"cannot write text bank {path}: {exc}")

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as handle:
                doc = json.load(handle)
        except (OSError, json.JSONDecodeError) as exc:
            raise ReportIOError(f"cannot read text bank {path}: {exc}")
        arrays = weights_io.load_arrays(os.path.join(os.path.dirname(path), doc["embeddings"]))
        emb = arrays["text_bank.embeddings"].astype(np.float64)
        # float32 storage; renormalize the valid rows
        counts = np.asarray(doc["counts"])
        for k, n in enumerate(counts):
            emb[k, :n] /= np.linalg.norm(emb[k, :n], axis=-1, keepdims=True)
        return cls(emb, counts, doc["classes"], doc.get("prompts"))


@dataclass(frozen=True)
class LossConfig:
    """
    Attributes:
        lambda_distill (float): Weight of the distillation term
        logit_scale (float): Multiplier of every similarity score
    """
    lambda_distill: float = 1.0
    logit_scale: float = 100.0

    def __post_init__(self):
        if not math.isfinite(self.lambda_distill) or self.lambda_distill < 0:
            raise ValidationError(f"lambda_distill must be finite and nonnegative, got {self.lambda_distill}")
        if not math.isfinite(self.logit_scale) or self.logit_scale <= 0:
            raise ValidationError(f"logit_scale must be finite and positive, got {self.logit_scale}")


@dataclass(frozen=True)
class ScoreSet:
    v2t: tn.Tensor
    t2v: tn.Tensor
    overall: tn.Tensor
    logit_scale: float


def _batched(z):
    z = tn.as_tensor(z)
    if z.ndim == 2:
        z = tn.reshape(z, (1,) + z.shape)
    if z.ndim != 3:
        raise DimensionError(f"frame features must be [B, T, D], got {z.shape}")
    return z


def similarities(z, bank):
    """
    Frame/prompt dot products.

    Returns:
        Tensor: [B, K, T, N_max]
    """
    z = _batched(z)
    if z.shape[-1] != bank.dim:
        raise DimensionError(f"frame width {z.shape[-1]} does not match text width {bank.dim}")
    b, t, d = z.shape
    prompts = tn.transpose(bank.embeddings, (0, 2, 1))
    return tn.matmul(tn.reshape(z, (b, 1, t, d)), prompts)


def score_v2t(z, bank, logit_scale=100.0):
    """
    logit_scale * mean over frames of the best prompt similarity, per class.

    Args:
        z (Tensor): [B, T, D] unit-norm frame features
        bank (TextBank): K classes

    Returns:
        Tensor: [B, K]
    """
    sims = similarities(z, bank)
    mask = np.where(bank.valid, 0.0, _MASKED)[:, None, :]
    best = tn.max_along(tn.add(sims, mask), axis=-1)
    return tn.mul(tn.mean(best, axis=-1), logit_scale)


def score_t2v(z, bank, logit_scale=100.0):
    """logit_scale * mean over a class's prompts of the best frame similarity."""
    sims = similarities(z, bank)
    best = tn.max_along(sims, axis=-2)
    weights = bank.valid / bank.counts[:, None]
    return tn.mul(tn.sum(tn.mul(best, weights), axis=-1), logit_scale)


def overall_score(v2t, t2v):
    if v2t.shape != t2v.shape:
        raise DimensionError(f"score shapes differ: {v2t.shape} vs {t2v.shape}")
    return tn.mul(tn.add(v2t, t2v), 0.5)


def score(z, bank, logit_scale=100.0):
    """Both alignment scores and their mean."""
    v2t = score_v2t(z, bank, logit_scale)
    t2v = score_t2v(z, bank, logit_scale)
    return ScoreSet(v2t, t2v, overall_score(v2t, t2v), logit_scale)


def score_video_class(z, bank, logit_scale=100.0):
    """
    Coarse baseline: mean-pooled frames against mean-pooled class prompts, both renormalized.
    """
    z = _batched(z)
    video = tn.l2_normalize(tn.mean(z, axis=-2), axis=-1)
    pooled = (bank.embeddings.data * bank.valid[..., None]).sum(axis=1) / bank.counts[:, None]
    classes = tn.Tensor(pooled / np.linalg.norm(pooled, axis=-1, keepdims=True))
    return tn.mul(tn.matmul(video, tn.transpose(classes)), logit_scale)


def ce_loss(scores, labels):
    """
    Mean negative log-softmax of the true class.

    Raises:
        ValidationError: If a label is outside [0, K)
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = scores.shape
    if labels.shape[0] != batch:
        raise DimensionError(f"{labels.shape[0]} labels for {batch} score rows")
    if (labels < 0).any() or (labels >= classes).any():
        raise ValidationError(f"labels {labels.tolist()} outside [0, {classes})")
    log_p = tn.log_softmax_rows(scores)
    picked = tn.take(log_p, (np.arange(batch), labels))
    return tn.neg(tn.mean(picked))


def distill_loss(z_tuned, z_frozen):
    """
    Mean over frames of the squared distance between unit-normalized features.

    z_frozen contributes values only; it never receives a gradient.
    """
    z_tuned = tn.as_tensor(z_tuned)
    frozen = tn.Tensor(getattr(z_frozen, "data", z_frozen))
    if z_tuned.shape != frozen.shape:
        raise DimensionError(f"feature shapes differ: {z_tuned.shape} vs {frozen.shape}")
    diff = tn.sub(tn.l2_normalize(z_tuned, axis=-1), tn.l2_normalize(frozen, axis=-1))
    return tn.mean(tn.sum(tn.mul(diff, diff), axis=-1))


def total_loss(scores, labels, z_tuned, z_frozen, cfg):
    """ce_loss + lambda_distill * distill_loss."""
    loss = ce_loss(scores, labels)
    if cfg.lambda_distill == 0:
        return loss
    return tn.add(loss, tn.mul(distill_loss(z_tuned, z_frozen), cfg.lambda_distill))


def zero_shot_predict(view_scores):
    """
    Average the per-view class scores and pick the best class (lowest index on ties).

    Returns:
        tuple[int, np.ndarray]: (predicted class, aggregated [K] scores)
    """
    if not view_scores:
        raise ValidationError("zero-shot prediction needs at least one view")
    stacked = np.stack([np.asarray(getattr(v, "data", v), dtype=np.float64).reshape(-1) for v in view_scores])
    aggregated = stacked.mean(axis=0)
    return int(np.argmax(aggregated)), aggregated


def prediction_report(video_id, view_scores, class_names=None):
    """JSON-ready prediction record of one video."""
    predicted, aggregated = zero_shot_predict(view_scores)
    report = {
        "video_id": video_id,
        "per_view_scores": [np.asarray(getattr(v, "data", v), dtype=np.float64).reshape(-1).tolist()
                            for v in view_scores],
        "aggregated": aggregated.tolist(),
        "predicted_class": predicted,
    }
    if class_names:
        report["predicted_label"] = class_names[predicted]
    return report
