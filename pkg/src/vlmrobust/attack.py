"""White-box l-inf attacks on the captioner: objectives, projection, APGD, sparsification.

Perturbations live in delta space. A run over ``B`` samples keeps one
perturbation per image slot, stacked as ``(B, K, H, W, 3)`` with the query
image in the last slot. Each slot has its own radius (``eps_c`` for context
slots, ``eps_q`` for the query) and the step size of a sample is a fraction
of that radius, so an ``eps_c`` of zero freezes the context perturbations.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import CaptionModel, PromptLayout, per_sample_log_likelihood, teacher_batch
from .tensor import Tensor

log = logging.getLogger(__name__)

UNTARGETED = "untargeted"
TARGETED = "targeted"


class AttackDivergence(FloatingPointError):
    """The attack objective became non-finite."""


class FeasibilityError(AssertionError):
    """A perturbation left the threat model."""


@dataclass(frozen=True)
class ThreatModel:
    eps_q: float
    eps_c: float = 0.0
    box: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.eps_q < 0 or self.eps_c < 0:
            raise ValueError(f"negative radius in {self}")
        if tuple(self.box) != (0.0, 1.0):
            raise ValueError("only the [0, 1] pixel box is supported")

    @property
    def query_only(self) -> bool:
        return self.eps_c == 0.0

    def radii(self, n_images: int) -> np.ndarray:
        return np.array([self.eps_c] * (n_images - 1) + [self.eps_q])


@dataclass
class AttackObjective:
    """NLL of ``sequence`` under ``layout`` with images ``context + [query]``."""

    mode: str
    sequence: list
    layout: PromptLayout
    query: np.ndarray
    context: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in (UNTARGETED, TARGETED):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if not self.sequence:
            raise ValueError("attack objective needs a non-empty token sequence")
        if self.layout.n_images != len(self.context) + 1:
            raise ValueError(f"layout has {self.layout.n_images} image slots, "
                             f"got {len(self.context)} context images and a query")

    @property
    def sign(self) -> float:
        """+1 when the NLL is maximized, -1 when it is minimized."""
        return 1.0 if self.mode == UNTARGETED else -1.0

    def clean_images(self) -> np.ndarray:
        return np.stack(list(self.context) + [self.query])


@dataclass
class APGDConfig:
    iterations: int = 500
    step_fraction: float = 1.0  # initial step as a multiple of each slot's radius
    momentum: float = 0.75
    rho: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("APGD needs at least one iteration")
        if not 0 < self.momentum < 1 or not 0 < self.rho < 1:
            raise ValueError("momentum and rho must lie in (0, 1)")
        if self.step_fraction <= 0:
            raise ValueError("step_fraction must be positive")

    def checkpoints(self) -> list:
        return checkpoints(self.iterations)


@dataclass
class AttackResult:
    record_id: int
    delta_q: np.ndarray
    delta_c: list
    trace: list  # objective (NLL) at every iterate, iterate 0 is the clean input
    best_trace: list  # running best of ``trace``
    best_objective: float
    caption: str = ""
    mode: str = UNTARGETED
    success: bool | None = None

    def deltas(self) -> np.ndarray:
        return np.stack(list(self.delta_c) + [self.delta_q])


def checkpoints(n: int) -> list:
    """Step-size checkpoints 0 = w_0 < w_1 < ... <= n."""
    w = [0, math.ceil(0.22 * n)]
    dec, floor = math.ceil(0.03 * n), math.ceil(0.06 * n)
    while True:
        nxt = w[-1] + max(w[-1] - w[-2] - dec, floor)
        if nxt > n:
            break
        w.append(nxt)
    return [c for c in w if c <= n]


def project(delta, x, eps):
    """Clamp ``delta`` to [-eps, eps] and ``x + delta`` to [0, 1].

    Written as one clip with combined bounds so the result stays inside
    both sets exactly in floating point. ``eps`` broadcasts from the left.
    """
    eps = np.asarray(eps, dtype=np.float64)
    if np.any(eps < 0):
        raise ValueError("negative radius")
    delta = np.asarray(delta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if delta.shape != x.shape:
        raise T.ShapeError("project", delta.shape, x.shape)
    e = eps.reshape(eps.shape + (1,) * (x.ndim - eps.ndim))
    lo = np.maximum(-e, -x)
    hi = np.minimum(e, 1.0 - x)
    return np.clip(delta, lo, hi)


def feasible(delta, x, eps) -> bool:
    delta = np.asarray(delta)
    eps = np.asarray(eps, dtype=np.float64)
    e = eps.reshape(eps.shape + (1,) * (delta.ndim - eps.ndim))
    adv = x + delta
    return bool(np.all(np.abs(delta) <= e) and np.all(adv >= 0.0) and np.all(adv <= 1.0))


def sparsify(delta, keep_fraction: float):
    """Keep the ceil(f * n) largest-magnitude entries, zero the rest.

    Ties go to the lowest linear index.
    """
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in [0, 1]")
    delta = np.asarray(delta, dtype=np.float64)
    flat = delta.reshape(-1)
    k = math.ceil(keep_fraction * flat.size)
    out = np.zeros_like(flat)
    if k:
        keep = np.argsort(-np.abs(flat), kind="stable")[:k]
        out[keep] = flat[keep]
    return out.reshape(delta.shape)


# ---------------------------------------------------------------- objectives

class _Problem:
    """Batched objective: per-sample NLLs and their gradients in delta space."""

    def __init__(self, model: CaptionModel, layouts, sequences, clean: np.ndarray, radii: np.ndarray):
        self.model = model
        self.batch = teacher_batch(model.vocab, layouts, sequences)
        self.clean = clean  # (B, K, H, W, 3)
        self.track = radii > 0  # (K,) slots with a free perturbation

    def images(self, delta, requires_grad=False):
        adv = self.clean + delta
        return [Tensor(adv[:, k], requires_grad=requires_grad and bool(self.track[k]))
                for k in range(adv.shape[1])]

    def nll(self, delta) -> np.ndarray:
        with T.no_grad():
            return -per_sample_log_likelihood(self.model, self.batch, self.images(delta)).data

    def value_and_grad(self, delta):
        ims = self.images(delta, requires_grad=True)
        ll = per_sample_log_likelihood(self.model, self.batch, ims)
        nll = -ll.data
        if not np.all(np.isfinite(nll)):
            raise AttackDivergence(f"non-finite attack objective {nll}")
        grads = T.backward(T.sum_(ll)) if any(im.requires_grad for im in ims) else None
        g = np.zeros_like(delta)
        for k, im in enumerate(ims):
            if im.requires_grad:
                g[:, k] = -grads[im]
        return nll, g


def objective_value(model: CaptionModel, obj: AttackObjective, delta_q, delta_c=(),
                    tm: ThreatModel | None = None, params: dict | None = None) -> Tensor:
    """NLL of the objective's sequence on the perturbed images (a scalar Tensor).

    Untargeted attacks maximize it, targeted attacks minimize it.
    """
    deltas = list(delta_c) + [delta_q]
    if len(deltas) != obj.layout.n_images:
        raise ValueError("one perturbation per image slot is required")
    if tm is not None:
        radii = tm.radii(len(deltas))
        for d, x, e in zip(deltas, obj.clean_images(), radii):
            if not feasible(np.asarray(d.data if isinstance(d, Tensor) else d), x, e):
                raise FeasibilityError("perturbation outside the threat model")
    images = []
    for d, x in zip(deltas, obj.clean_images()):
        d = d if isinstance(d, Tensor) else Tensor(np.asarray(d, dtype=np.float64))
        images.append(Tensor(x) + d)
    return -model.sequence_log_likelihood(obj.sequence, obj.layout, images, params)


# ---------------------------------------------------------------- APGD

@dataclass
class _RunOutput:
    best_delta: np.ndarray  # (B, K, H, W, 3)
    trace: np.ndarray  # (N + 1, B) NLL per iterate
    best_trace: np.ndarray  # (N + 1, B)
    best: np.ndarray  # (B,)


def _apgd(problem: _Problem, sign: float, radii: np.ndarray, cfg: APGDConfig) -> _RunOutput:
    """Batched APGD maximizing ``sign * NLL`` from a zero perturbation."""
    clean = problem.clean
    B = clean.shape[0]
    eps = np.broadcast_to(radii, (B, len(radii)))
    n = cfg.iterations
    checks = set(cfg.checkpoints()[1:])
    alpha = cfg.momentum

    x = np.zeros_like(clean)
    nll, g = problem.value_and_grad(x)
    f, grad = sign * nll, sign * g
    trace = np.empty((n + 1, B))
    best_trace = np.empty((n + 1, B))
    trace[0] = nll

    f_best, x_best, g_best = f.copy(), x.copy(), grad.copy()
    best_trace[0] = sign * f_best
    step = np.full(B, cfg.step_fraction)
    x_prev = x.copy()
    f_hist = [f.copy()]
    last_w = 0
    reduced_last = np.ones(B, dtype=bool)
    f_best_last = f_best.copy()

    for i in range(n):
        s = (step[:, None] * eps)[:, :, None, None, None]
        a = alpha if i > 0 else 1.0
        mom = x - x_prev
        x_prev = x
        z = project(x + s * np.sign(grad), clean, eps)
        x = project(x + a * (z - x) + (1 - a) * mom, clean, eps)

        nll, g = problem.value_and_grad(x)
        f, grad = sign * nll, sign * g
        trace[i + 1] = nll
        f_hist.append(f.copy())
        up = f > f_best
        x_best[up], g_best[up], f_best[up] = x[up], grad[up], f[up]
        best_trace[i + 1] = sign * f_best

        if i + 1 in checks:
            w = i + 1
            window = np.stack(f_hist[last_w:w + 1])
            n_up = (window[1:] > window[:-1]).sum(axis=0)
            cond1 = n_up < cfg.rho * (w - last_w)
            cond2 = ~reduced_last & (f_best_last >= f_best)
            halve = cond1 | cond2
            reduced_last = halve
            f_best_last = f_best.copy()
            if halve.any():
                step[halve] /= 2.0
                x = x.copy()
                grad = grad.copy()
                x[halve], grad[halve] = x_best[halve], g_best[halve]
            last_w = w
    return _RunOutput(x_best, trace, best_trace, sign * f_best)


def apgd(model: CaptionModel, obj: AttackObjective, tm: ThreatModel, cfg: APGDConfig,
         record_id: int = 0, max_new_tokens: int = 24) -> AttackResult:
    """Attack one sample; the caption is regenerated from the best iterate."""
    radii = tm.radii(obj.layout.n_images)
    clean = obj.clean_images()[None]
    problem = _Problem(model, [obj.layout], [obj.sequence], clean, radii)
    run = _apgd(problem, obj.sign, radii, cfg)
    best = run.best_delta[0]
    adv = [Tensor((clean[0, k] + best[k])[None]) for k in range(best.shape[0])]
    caption = model.generate_batch([obj.layout], adv, max_new_tokens)[0].text
    return AttackResult(record_id, best[-1], list(best[:-1]), run.trace[:, 0].tolist(),
                        run.best_trace[:, 0].tolist(), float(run.best[0]), caption, obj.mode)


# ---------------------------------------------------------------- batches

@dataclass
class BatchSpec:
    """What to attack: shared prompt context plus per-record sequences."""

    mode: str
    records: list
    sequences: list  # token ids per record
    context_images: list = field(default_factory=list)
    context_captions: list = field(default_factory=list)
    target_text: str | None = None


def _attack_chunk(model, spec: BatchSpec, idx, tm, cfg, max_new_tokens):
    vocab = model.vocab
    recs = [spec.records[i] for i in idx]
    n_img = len(spec.context_images) + 1
    layouts = [PromptLayout.captioning(vocab, spec.context_captions) for _ in recs]
    clean = np.stack([np.stack(list(spec.context_images) + [r.image]) for r in recs])
    radii = tm.radii(n_img)
    problem = _Problem(model, layouts, [spec.sequences[i] for i in idx], clean, radii)
    sign = 1.0 if spec.mode == UNTARGETED else -1.0
    run = _apgd(problem, sign, radii, cfg)
    adv = clean + run.best_delta
    caps = [g.text for g in model.generate_batch(layouts, [Tensor(adv[:, k]) for k in range(n_img)],
                                                 max_new_tokens)]
    out = []
    for b, rec in enumerate(recs):
        d = run.best_delta[b]
        success = None if spec.target_text is None else spec.target_text in caps[b]
        out.append(AttackResult(rec.record_id, d[-1], list(d[:-1]), run.trace[:, b].tolist(),
                                run.best_trace[:, b].tolist(), float(run.best[b]), caps[b],
                                spec.mode, success))
    return out


def attack_batch(model: CaptionModel, spec: BatchSpec, tm: ThreatModel, cfg: APGDConfig,
                 chunk_size: int = 50, workers: int = 1, max_new_tokens: int = 24) -> list:
    """One AttackResult per record, in record order.

    Records are attacked in fixed chunks of ``chunk_size`` so results do not
    depend on ``workers``.
    """
    if not spec.records:
        raise ValueError("nothing to attack")
    if len(spec.sequences) != len(spec.records):
        raise ValueError("one token sequence per record is required")
    chunks = [list(range(s, min(s + chunk_size, len(spec.records))))
              for s in range(0, len(spec.records), chunk_size)]

    def run(idx):
        return _attack_chunk(model, spec, idx, tm, cfg, max_new_tokens)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    results = [r for p in parts for r in p]
    audit(results, spec, tm)
    return results


def audit(results: Sequence[AttackResult], spec: BatchSpec, tm: ThreatModel) -> None:
    """Raise FeasibilityError unless every perturbation is inside the threat model."""
    for res, rec in zip(results, spec.records):
        if not feasible(res.delta_q, rec.image, tm.eps_q):
            raise FeasibilityError(f"record {rec.record_id}: query perturbation infeasible")
        for d, c in zip(res.delta_c, spec.context_images):
            if not feasible(d, c, tm.eps_c):
                raise FeasibilityError(f"record {rec.record_id}: context perturbation infeasible")


def regenerate(model: CaptionModel, spec: BatchSpec, deltas: Sequence[np.ndarray],
               chunk_size: int = 50, max_new_tokens: int = 24) -> list:
    """Captions for each record under the given (K, H, W, 3) perturbations."""
    vocab = model.vocab
    n_img = len(spec.context_images) + 1
    out = []
    for s in range(0, len(spec.records), chunk_size):
        recs = spec.records[s:s + chunk_size]
        clean = np.stack([np.stack(list(spec.context_images) + [r.image]) for r in recs])
        adv = clean + np.stack(deltas[s:s + chunk_size])
        layouts = [PromptLayout.captioning(vocab, spec.context_captions) for _ in recs]
        out += [g.text for g in model.generate_batch(layouts, [Tensor(adv[:, k]) for k in range(n_img)],
                                                     max_new_tokens)]
    return out
