"""A miniature Flamingo-style captioner.

A patch transformer encodes every image into 16 feature vectors. A causal
text decoder reads the interleaved prompt; in each decoder layer a
tanh-gated cross-attention block lets every text position attend to the
features of the most recent ``<image>`` token at or before it. Gates start
at zero, so an untrained model behaves exactly like a text-only decoder.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .data import grammar_words
from .tensor import Tensor

PAD, BOS, EOS, IMAGE, OUTPUT = "<pad>", "<bos>", "<eos>", "<image>", "Output:"
RESERVED = (PAD, BOS, EOS, IMAGE, OUTPUT)


class Vocabulary:
    """Whitespace word tokenizer over a closed word list.

    Ids 0..4 are the reserved tokens in ``RESERVED`` order.
    """

    def __init__(self, words: Sequence[str] | None = None):
        words = list(grammar_words() if words is None else words)
        self.words = list(RESERVED) + [w for w in words if w not in RESERVED]
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        self.pad, self.bos, self.eos, self.image, self.output = range(5)

    def __len__(self):
        return len(self.words)

    def encode(self, text: str) -> list:
        ids = []
        for w in text.split():
            if w not in self.index:
                raise KeyError(f"out-of-vocabulary token {w!r}")
            ids.append(self.index[w])
        return ids

    def decode(self, ids: Sequence[int], skip_special: bool = False) -> str:
        skip = {self.pad, self.bos, self.eos, self.image} if skip_special else set()
        return " ".join(self.words[i] for i in ids if i not in skip)

    def covers(self, text: str) -> bool:
        return all(w in self.index for w in text.split())


@dataclass
class PromptLayout:
    """Interleaved prompt: ``("image", slot)`` entries and token-id lists.

    The last image slot is the query; earlier slots are context shots.
    """

    segments: list = field(default_factory=list)

    @property
    def n_images(self) -> int:
        return sum(1 for s in self.segments if isinstance(s, tuple))

    @property
    def shots(self) -> int:
        return self.n_images - 1

    def tokens(self, vocab: Vocabulary) -> tuple:
        """Token ids and, per position, the index of the latest image (or -1)."""
        ids, img_of = [], []
        cur = -1
        for seg in self.segments:
            if isinstance(seg, tuple):
                cur = seg[1]
                ids.append(vocab.image)
                img_of.append(cur)
            else:
                ids.extend(seg)
                img_of.extend([cur] * len(seg))
        return ids, img_of

    def validate(self, vocab: Vocabulary):
        slots = [s[1] for s in self.segments if isinstance(s, tuple)]
        if slots != list(range(len(slots))) or not slots:
            raise ValueError(f"image slots must be 0..n in order, got {slots}")
        ids, img_of = self.tokens(vocab)
        if ids[-1] != vocab.output:
            raise ValueError("prompt must end with Output:")
        for k in range(len(slots)):
            chunk = [t for t, i in zip(ids, img_of) if i == k]
            if vocab.output not in chunk:
                raise ValueError(f"image slot {k} is not followed by Output:")

    @classmethod
    def captioning(cls, vocab: Vocabulary, context_captions: Sequence[str] = (),
                   question: str | None = None, context_questions: Sequence[str] | None = None):
        """``<bos> (<image> [question] Output: caption <eos>)* <image> [question] Output:``."""
        segs = [[vocab.bos]]
        for k, cap in enumerate(context_captions):
            segs.append(("image", k))
            q = vocab.encode(context_questions[k]) if context_questions else []
            segs.append(q + [vocab.output] + vocab.encode(cap) + [vocab.eos])
        segs.append(("image", len(context_captions)))
        segs.append((vocab.encode(question) if question else []) + [vocab.output])
        layout = cls(segs)
        layout.validate(vocab)
        return layout


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_decoder_layers: int = 2
    n_vision_layers: int = 2
    patch: int = 8
    image_size: int = 32
    vocab_size: int = 0
    max_len: int = 112
    mlp_ratio: int = 4
    gate_init: float = 0.0
    init_std: float = 0.02
    # per-channel pixel standardization before patch embedding
    pixel_mean: tuple = (0.48145466, 0.4578275, 0.40821073)
    pixel_std: tuple = (0.26862954, 0.26130258, 0.27577711)
    ln_pre: bool = True
    patch_init_std: float = 0.0  # 0 selects 1/sqrt(fan_in)

    def __post_init__(self):
        self.pixel_mean = tuple(float(v) for v in self.pixel_mean)
        self.pixel_std = tuple(float(v) for v in self.pixel_std)
        if len(self.pixel_mean) != 3 or len(self.pixel_std) != 3 or min(self.pixel_std) <= 0:
            raise ValueError("pixel_mean and pixel_std need three entries, std positive")
        ints = (self.d_model, self.n_heads, self.n_decoder_layers, self.n_vision_layers,
                self.patch, self.image_size, self.max_len, self.mlp_ratio)
        if any(int(v) <= 0 for v in ints):
            raise ValueError("model sizes must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.image_size % self.patch:
            raise ValueError("image size must be divisible by patch size")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    def to_json(self) -> dict:
        return asdict(self)


class Generation(NamedTuple):
    tokens: list
    text: str


def _init_params(cfg: ModelConfig, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    d, V, h = cfg.d_model, cfg.vocab_size, cfg.mlp_ratio * cfg.d_model
    pdim = cfg.patch * cfg.patch * 3
    p = {}

    def w(name, *shape):
        p[name] = rng.normal(0.0, cfg.init_std, size=shape)

    def ln(name):
        p[name + ".w"] = np.ones(d)
        p[name + ".b"] = np.zeros(d)

    def attn(prefix):
        for m in ("q", "k", "v", "o"):
            w(f"{prefix}.w{m}", d, d)
            p[f"{prefix}.b{m}"] = np.zeros(d)

    def mlp(prefix):
        w(prefix + ".w1", d, h)
        p[prefix + ".b1"] = np.zeros(h)
        w(prefix + ".w2", h, d)
        p[prefix + ".b2"] = np.zeros(d)

    p["vis.patch_w"] = rng.normal(0.0, cfg.patch_init_std or pdim ** -0.5, size=(pdim, d))
    p["vis.patch_b"] = np.zeros(d)
    w("vis.pos", cfg.n_patches, d)
    if cfg.ln_pre:
        ln("vis.ln_pre")
    for i in range(cfg.n_vision_layers):
        ln(f"vis.{i}.ln1")
        attn(f"vis.{i}.attn")
        ln(f"vis.{i}.ln2")
        mlp(f"vis.{i}.mlp")
    ln("vis.ln_f")
    w("txt.emb", V, d)
    w("txt.pos", cfg.max_len, d)
    for i in range(cfg.n_decoder_layers):
        ln(f"dec.{i}.ln_x")
        attn(f"dec.{i}.xattn")
        p[f"dec.{i}.gate"] = np.array(float(cfg.gate_init))
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.attn")
        ln(f"dec.{i}.ln2")
        mlp(f"dec.{i}.mlp")
    ln("dec.ln_f")
    w("head.w", d, V)
    p["head.b"] = np.zeros(V)
    return p


class CaptionModel:
    def __init__(self, config: ModelConfig, vocab: Vocabulary | None = None,
                 params: dict | None = None, seed: int = 0):
        self.vocab = vocab or Vocabulary()
        if config.vocab_size == 0:
            config.vocab_size = len(self.vocab)
        if config.vocab_size != len(self.vocab):
            raise ValueError("config vocab_size does not match vocabulary")
        self.config = config
        self.params = params if params is not None else _init_params(config, seed)

    def param_tensors(self, requires_grad: bool = False) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    # ------------------------------------------------------------ blocks

    def _attn(self, P, prefix, x, kv, mask):
        cfg = self.config
        B, Tq, d = x.shape
        Tk = kv.shape[1]
        H, dh = cfg.n_heads, d // cfg.n_heads

        def heads(t, n):
            return t.reshape(B, n, H, dh).transpose(0, 2, 1, 3)

        q = heads(T.linear(x, P[prefix + ".wq"], P[prefix + ".bq"]), Tq)
        k = heads(T.linear(kv, P[prefix + ".wk"], P[prefix + ".bk"]), Tk)
        v = heads(T.linear(kv, P[prefix + ".wv"], P[prefix + ".bv"]), Tk)
        o = T.attention(q, k, v, mask).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        return T.linear(o, P[prefix + ".wo"], P[prefix + ".bo"])

    def _mlp(self, P, prefix, x):
        h = T.gelu(T.linear(x, P[prefix + ".w1"], P[prefix + ".b1"]))
        return T.linear(h, P[prefix + ".w2"], P[prefix + ".b2"])

    def _ln(self, P, name, x):
        return T.layer_norm(x, P[name + ".w"], P[name + ".b"])

    # ------------------------------------------------------------ vision

    def encode_image(self, images: Tensor, params: dict | None = None) -> Tensor:
        """Patch features (..., P, d) for images (..., H, W, 3) with pixels in [0, 1]."""
        cfg = self.config
        P = params or self.param_tensors()
        s, p = cfg.image_size, cfg.patch
        if images.shape[-3:] != (s, s, 3):
            raise T.ShapeError("encode_image", images.shape, (s, s, 3))
        if images.data.min() < 0.0 or images.data.max() > 1.0:
            raise ValueError("encode_image: pixels must lie in [0, 1]")
        lead = images.shape[:-3]
        n = int(np.prod(lead)) if lead else 1
        g = s // p
        mean = Tensor(np.asarray(cfg.pixel_mean, dtype=np.float64))
        inv_std = Tensor(1.0 / np.asarray(cfg.pixel_std, dtype=np.float64))
        x = T.mul(T.sub(images, mean), inv_std)
        x = x.reshape(n, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(n, g * g, p * p * 3)
        x = T.linear(x, P["vis.patch_w"], P["vis.patch_b"]) + P["vis.pos"]
        if cfg.ln_pre:
            x = self._ln(P, "vis.ln_pre", x)
        for i in range(cfg.n_vision_layers):
            h = self._ln(P, f"vis.{i}.ln1", x)
            x = x + self._attn(P, f"vis.{i}.attn", h, h, None)
            x = x + self._mlp(P, f"vis.{i}.mlp", self._ln(P, f"vis.{i}.ln2", x))
        x = self._ln(P, "vis.ln_f", x)
        return x.reshape(*lead, g * g, cfg.d_model)

    # ------------------------------------------------------------ decoder

    def forward(self, tokens: np.ndarray, image_index: np.ndarray | None,
                images: Sequence[Tensor] | None, params: dict | None = None) -> Tensor:
        """Logits (B, T, V) for token ids (B, T).

        ``images`` holds one (B, H, W, 3) tensor per image slot and
        ``image_index`` (B, T) names the slot each position attends to
        (-1 before the first image). ``images=None`` runs the text-only path.
        """
        cfg = self.config
        P = params or self.param_tensors()
        tokens = np.asarray(tokens, dtype=np.int64)
        B, L = tokens.shape
        if L > cfg.max_len:
            raise ValueError(f"sequence of length {L} exceeds context {cfg.max_len}")
        x = T.embedding(P["txt.emb"], tokens) + P["txt.pos"][:L]

        vis = xmask = has_img = None
        if images is not None:
            n_img = len(images)
            stacked = T.concat([im.reshape(B, 1, *im.shape[1:]) for im in images], axis=1)
            feats = self.encode_image(stacked, P)  # (B, n_img, Pn, d)
            Pn = cfg.n_patches
            vis = feats.reshape(B, n_img * Pn, cfg.d_model)
            idx = np.asarray(image_index, dtype=np.int64)
            if idx.max() >= n_img:
                raise ValueError(f"layout references image {idx.max()} but {n_img} given")
            key_img = np.repeat(np.arange(n_img), Pn)
            xmask = (idx[:, :, None] == key_img[None, None, :]) | (idx[:, :, None] < 0)
            xmask = xmask[:, None, :, :]
            has_img = Tensor(np.broadcast_to((idx >= 0)[:, :, None], (B, L, cfg.d_model)).astype(float))

        causal = np.tril(np.ones((L, L), dtype=bool))
        for i in range(cfg.n_decoder_layers):
            if vis is not None:
                h = self._ln(P, f"dec.{i}.ln_x", x)
                xa = self._attn(P, f"dec.{i}.xattn", h, vis, xmask)
                x = x + T.mul(T.mul(xa, has_img), T.tanh(P[f"dec.{i}.gate"]))
            h = self._ln(P, f"dec.{i}.ln1", x)
            x = x + self._attn(P, f"dec.{i}.attn", h, h, causal)
            x = x + self._mlp(P, f"dec.{i}.mlp", self._ln(P, f"dec.{i}.ln2", x))
        x = self._ln(P, "dec.ln_f", x)
        return T.linear(x, P["head.w"], P["head.b"])

    # ------------------------------------------------------------ single-sample API

    def _single(self, layout: PromptLayout, extra: Sequence[int], images, pad_to=None):
        if len(images) != layout.n_images:
            raise ValueError(f"layout has {layout.n_images} image slots, got {len(images)} images")
        ids, img_of = layout.tokens(self.vocab)
        ids = list(ids) + list(extra)
        img_of = list(img_of) + [img_of[-1]] * len(extra)
        n = len(ids)
        if pad_to is not None:
            if pad_to < n:
                raise ValueError("pad_to shorter than the sequence")
            ids += [self.vocab.pad] * (pad_to - n)
            img_of += [img_of[-1]] * (pad_to - n)
        ims = [im if im.ndim == 4 else im.reshape(1, *im.shape) for im in images]
        return np.array([ids]), np.array([img_of]), ims, n

    def next_token_logits(self, prefix: Sequence[int], layout: PromptLayout, images: Sequence[Tensor],
                          pad_to: int | None = None, params: dict | None = None) -> Tensor:
        """Scores for the token after ``layout`` + ``prefix``.

        ``pad_to`` right-pads the input with padding tokens; under the
        causal mask this leaves the value unchanged and makes the arithmetic
        identical to a longer teacher-forced pass of that length.
        """
        tok, img_of, ims, n = self._single(layout, prefix, images, pad_to)
        logits = self.forward(tok, img_of, ims, params)
        return logits[0, n - 1]

    def sequence_log_likelihood(self, y: Sequence[int], layout: PromptLayout, images: Sequence[Tensor],
                                params: dict | None = None) -> Tensor:
        """Teacher-forced sum of log p(y_l | y_<l, prompt, images)."""
        y = list(y)
        if not y:
            raise ValueError("empty target sequence")
        tok, img_of, ims, n = self._single(layout, y[:-1], images)
        logits = self.forward(tok, img_of, ims, params)
        start = n - len(y)
        nll = T.cross_entropy(logits[0, start:n], np.array(y), reduction="sum")
        return -nll

    def generate(self, layout: PromptLayout, images: Sequence[Tensor], max_new_tokens: int = 24) -> Generation:
        ims = [im if im.ndim == 4 else im.reshape(1, *im.shape) for im in images]
        return self.generate_batch([layout], ims, max_new_tokens)[0]

    # ------------------------------------------------------------ batched API

    def generate_batch(self, layouts: Sequence[PromptLayout], images: Sequence[Tensor],
                       max_new_tokens: int = 24) -> list:
        """Greedy decoding; ties go to the lowest token id.

        ``images`` holds one (B, H, W, 3) tensor per image slot.
        """
        if max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        vocab = self.vocab
        prompts = [layout.tokens(vocab) for layout in layouts]
        B = len(layouts)
        seqs = [list(p[0]) for p in prompts]
        imgs = [list(p[1]) for p in prompts]
        starts = [len(s) for s in seqs]
        done = [False] * B
        with T.no_grad():
            for _ in range(max_new_tokens):
                L = max(len(s) for s in seqs)
                tok = np.full((B, L), vocab.pad)
                idx = np.zeros((B, L), dtype=np.int64)
                for b in range(B):
                    tok[b, :len(seqs[b])] = seqs[b]
                    idx[b, :len(imgs[b])] = imgs[b]
                    idx[b, len(imgs[b]):] = imgs[b][-1]
                if L > self.config.max_len:
                    break
                logits = self.forward(tok, idx, images).data
                for b in range(B):
                    if done[b]:
                        continue
                    nxt = int(np.argmax(logits[b, len(seqs[b]) - 1]))
                    seqs[b].append(nxt)
                    imgs[b].append(imgs[b][-1])
                    if nxt == vocab.eos:
                        done[b] = True
                if all(done):
                    break
        return [self.extract(s[st:]) for s, st in zip(seqs, starts)]

    def extract(self, generated: Sequence[int]) -> Generation:
        """Cut generated ids at end-of-text, then at the first ``Output:``."""
        vocab = self.vocab
        out = []
        for t in generated:
            if t in (vocab.eos, vocab.output):
                break
            out.append(int(t))
        return Generation(list(generated), vocab.decode(out, skip_special=True))


class TeacherBatch(NamedTuple):
    """Right-padded teacher-forcing inputs for a batch of (prompt, target) pairs."""

    tokens: np.ndarray  # (B, L) inputs
    image_index: np.ndarray  # (B, L)
    targets: np.ndarray  # (B, L) next-token ids (pad where unused)
    weights: np.ndarray  # (B, L) 1.0 where the target belongs to y


def teacher_batch(vocab: Vocabulary, layouts: Sequence[PromptLayout], ys: Sequence[Sequence[int]]) -> TeacherBatch:
    rows = []
    for layout, y in zip(layouts, ys):
        ids, img_of = layout.tokens(vocab)
        full = list(ids) + list(y)
        img_full = list(img_of) + [img_of[-1]] * len(y)
        w = [0.0] * (len(ids) - 1) + [1.0] * len(y)
        rows.append((full[:-1], img_full[:-1], full[1:], w))
    L = max(len(r[0]) for r in rows)
    B = len(rows)
    tok = np.full((B, L), vocab.pad, dtype=np.int64)
    idx = np.zeros((B, L), dtype=np.int64)
    tgt = np.full((B, L), vocab.pad, dtype=np.int64)
    wts = np.zeros((B, L))
    for b, (a, i, t, w) in enumerate(rows):
        n = len(a)
        tok[b, :n], tgt[b, :n], wts[b, :n] = a, t, w
        idx[b, :n] = i
        idx[b, n:] = i[-1]
    return TeacherBatch(tok, idx, tgt, wts)


def per_sample_log_likelihood(model: CaptionModel, batch: TeacherBatch, images: Sequence[Tensor],
                              params: dict | None = None) -> Tensor:
    """(B,) tensor of teacher-forced log-likelihoods of each target."""
    logits = model.forward(batch.tokens, batch.image_index, images, params)
    B, L, V = logits.shape
    nll = T.cross_entropy(logits.reshape(B * L, V), batch.targets.reshape(-1), reduction="none")
    nll = T.mul(nll, Tensor(batch.weights.reshape(-1))).reshape(B, L)
    return -T.sum_(nll, axis=1)


def grad_wrt_images(objective: Tensor, images: Sequence[Tensor]) -> list:
    """Gradient of scalar ``objective`` for each image (zeros when off-path)."""
    grads = T.backward(objective)
    return [grads[im] for im in images]


def param_count(model: CaptionModel) -> int:
    return int(sum(v.size for v in model.params.values()))

