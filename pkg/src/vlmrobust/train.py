"""Teacher-forced training of the captioner and its checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic        8 bytes  b"VLMRCKPT"
    version      uint32   1
    config_len   uint32
    config       UTF-8 JSON: {"model": ModelConfig fields, "vocab": [...], "meta": {...}}
    n_tensors    uint32
    n_tensors times:
        name_len uint16, name UTF-8, ndim uint8, ndim x uint32 extents,
        payload float64 little-endian, row-major
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, select_ground_truth
from .metrics import ReferenceCorpus, cider, vqa_report
from .model import (CaptionModel, ModelConfig, PromptLayout, Vocabulary,
                    per_sample_log_likelihood, teacher_batch)
from .tensor import Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"VLMRCKPT"
CKPT_VERSION = 1


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 2e-3
    warmup_steps: int = 100
    decay_at: float = 0.75  # fraction of total steps after which lr drops
    decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    fewshot_prob: float = 0.2
    shots: int = 4
    seed: int = 0

    def lr_at(self, step: int, total: int) -> float:
        lr = self.lr * min(1.0, (step + 1) / self.warmup_steps)
        if step >= self.decay_at * total:
            lr *= self.decay_factor
        return lr


@dataclass
class TrainResult:
    model: CaptionModel
    loss_curve: list
    steps: int
    report: dict = field(default_factory=dict)


def record_images(records) -> Tensor:
    return Tensor(np.stack([r.image for r in records]))


def _examples(records: list, vocab: Vocabulary, rng: np.random.Generator, cfg: TrainConfig):
    """One epoch of (layout, target ids, image record list) triples."""
    out = []
    for i, rec in enumerate(records):
        for ref in rec.references:
            ctx = []
            if cfg.shots and rng.random() < cfg.fewshot_prob and len(records) > cfg.shots:
                pool = rng.choice(len(records) - 1, size=cfg.shots, replace=False)
                ctx = [records[j if j < i else j + 1] for j in pool]
            caps = [c.references[int(rng.integers(len(c.references)))] for c in ctx]
            layout = PromptLayout.captioning(vocab, caps)
            out.append((layout, vocab.encode(ref) + [vocab.eos], ctx + [rec]))
        if rec.qa is not None:
            ans = rec.qa.answers[int(rng.integers(len(rec.qa.answers)))]
            layout = PromptLayout.captioning(vocab, question=rec.qa.question)
            out.append((layout, vocab.encode(ans) + [vocab.eos], [rec]))
    return out


def _batch_inputs(model: CaptionModel, chunk):
    """Group a minibatch by image count so each group shares a layout shape."""
    groups = {}
    for ex in chunk:
        groups.setdefault(len(ex[2]), []).append(ex)
    for n_img in sorted(groups):
        items = groups[n_img]
        batch = teacher_batch(model.vocab, [e[0] for e in items], [e[1] for e in items])
        images = [record_images([e[2][k] for e in items]) for k in range(n_img)]
        yield batch, images


def train(model: CaptionModel, records: list, cfg: TrainConfig, log_every: int = 0) -> TrainResult:
    """Adam on the mean per-token cross-entropy; returns the model and per-epoch losses."""
    if not records:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    names = list(model.params)
    m1 = {k: np.zeros_like(v) for k, v in model.params.items()}
    m2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    per_epoch = len(_examples(records, model.vocab, np.random.default_rng(cfg.seed), cfg))
    total = cfg.epochs * math.ceil(per_epoch / cfg.batch_size)
    step = 0
    curve = []
    for epoch in range(cfg.epochs):
        exs = _examples(records, model.vocab, rng, cfg)
        order = rng.permutation(len(exs))
        losses, counts = 0.0, 0.0
        for s in range(0, len(exs), cfg.batch_size):
            chunk = [exs[int(i)] for i in order[s:s + cfg.batch_size]]
            P = model.param_tensors(requires_grad=True)
            n_tok = sum(len(e[1]) for e in chunk)
            parts = [per_sample_log_likelihood(model, b, ims, P) for b, ims in _batch_inputs(model, chunk)]
            total_ll = parts[0].sum()
            for p in parts[1:]:
                total_ll = total_ll + p.sum()
            loss = T.scale(total_ll, -1.0 / n_tok)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDivergence(f"loss became {lv} at epoch {epoch} step {step}")
            grads = T.backward(loss)
            g = {k: grads[P[k]] for k in names}
            gnorm = math.sqrt(sum(float((v * v).sum()) for v in g.values()))
            clip = min(1.0, cfg.clip_norm / (gnorm + 1e-12))
            lr = cfg.lr_at(step, total)
            step += 1
            b1c = 1 - cfg.beta1 ** step
            b2c = 1 - cfg.beta2 ** step
            new = {}
            for k in names:
                gk = g[k] * clip
                m1[k] = cfg.beta1 * m1[k] + (1 - cfg.beta1) * gk
                m2[k] = cfg.beta2 * m2[k] + (1 - cfg.beta2) * gk * gk
                new[k] = model.params[k] - lr * (m1[k] / b1c) / (np.sqrt(m2[k] / b2c) + cfg.adam_eps)
            model.params = new
            losses += lv * n_tok
            counts += n_tok
        curve.append(losses / counts)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d loss %.4f", epoch + 1, curve[-1])
    return TrainResult(model, curve, step)


# ---------------------------------------------------------------- evaluation

def caption_records(model: CaptionModel, records: list, shots: int = 0, context: list | None = None,
                    max_new_tokens: int = 24, chunk: int = 50, context_seed: int = 0) -> list:
    """Clean greedy captions for ``records``."""
    vocab = model.vocab
    out = []
    ctx = context or []
    caps = [select_ground_truth(c, context_seed) for c in ctx[:shots]]
    for s in range(0, len(records), chunk):
        part = records[s:s + chunk]
        layouts = [PromptLayout.captioning(vocab, caps) for _ in part]
        images = [record_images([c] * len(part)) for c in ctx[:shots]] + [record_images(part)]
        out += [g.text for g in model.generate_batch(layouts, images, max_new_tokens)]
    return out


def answer_records(model: CaptionModel, records: list, max_new_tokens: int = 4, chunk: int = 50) -> list:
    vocab = model.vocab
    out = []
    for s in range(0, len(records), chunk):
        part = records[s:s + chunk]
        layouts = [PromptLayout.captioning(vocab, question=r.qa.question) for r in part]
        out += [g.text for g in model.generate_batch(layouts, [record_images(part)], max_new_tokens)]
    return out


def evaluate_clean(model: CaptionModel, ds: Dataset, split: str = "eval") -> dict:
    recs = ds.split(split)
    caps = caption_records(model, recs)
    corpus = ReferenceCorpus([r.references for r in recs], ids=[r.record_id for r in recs])
    rep = {"cider": cider(caps, corpus).aggregate, "n_records": len(recs)}
    qa_recs = [r for r in recs if r.qa is not None]
    if qa_recs:
        answers = answer_records(model, qa_recs)
        rep["vqa_accuracy"] = vqa_report(answers, [r.qa.answers for r in qa_recs]).aggregate
    return rep


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: CaptionModel, path, meta: dict | None = None) -> str:
    """Write ``model`` to ``path``; returns the SHA-256 of the file."""
    cfg = json.dumps({"model": model.config.to_json(), "vocab": model.vocab.words,
                      "meta": meta or {}}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg,
             struct.pack("<I", len(model.params))]
    for name, arr in model.params.items():
        nb = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
                     + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    blob = b"".join(parts)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> tuple:
    """Returns ``(model, meta)``."""
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, clen = struct.unpack_from("<II", blob, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    head = json.loads(blob[off:off + clen])
    off += clen
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nl].decode()
        off += nl
        (nd,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}I", blob, off)
        off += 4 * nd
        count = int(np.prod(shape)) if nd else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    vocab = Vocabulary(head["vocab"][5:])
    model = CaptionModel(ModelConfig(**head["model"]), vocab, params=params)
    return model, head.get("meta", {})


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


__all__ = ["TrainConfig", "TrainResult", "TrainingDivergence", "train", "evaluate_clean",
           "caption_records", "answer_records", "save_checkpoint", "load_checkpoint"]
