"""A tiny vision-prefixed transformer decoder.

The 64x64x3 image is cut into 64 non-overlapping 8x8 patches, each linearly
embedded into one prefix token. Image tokens attend only to each other, so the
image stream is independent of the text and can be computed once per image
and shared by several questions. Text tokens attend to the whole image prefix
and causally to earlier text.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..tensor import Tensor, no_grad
from ..tensor_io import read_tensor, tensor_to_bytes
from .tokenizer import BOS, EOS, PAD, VOCAB_SIZE, tokenize

_NEG = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = VOCAB_SIZE
    max_text_len: int = 128
    image_size: int = 64
    patch_size: int = 8

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * 3


class ToyMLLM:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0, init: str = "normal"):
        self.config = config or ModelConfig()
        if self.config.d_model % self.config.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._init_params(np.random.default_rng(seed), init)

    # ------------------------------------------------------------------ params
    def _shapes(self):
        c = self.config
        d = c.d_model
        yield "patch_embed.w", (c.patch_dim, d), "mat"
        yield "patch_embed.b", (d,), "zero"
        yield "token_embed", (c.vocab_size, d), "emb"
        yield "pos_image", (c.n_patches, d), "emb"
        yield "pos_text", (c.max_text_len, d), "emb"
        for i in range(c.n_layers):
            p = f"blocks.{i}."
            yield p + "ln1.g", (d,), "one"
            yield p + "ln1.b", (d,), "zero"
            for name in ("q", "k", "v"):
                yield p + f"attn.{name}.w", (d, d), "mat"
                yield p + f"attn.{name}.b", (d,), "zero"
            yield p + "attn.o.w", (d, d), "resid"
            yield p + "attn.o.b", (d,), "zero"
            yield p + "ln2.g", (d,), "one"
            yield p + "ln2.b", (d,), "zero"
            yield p + "ffn.w1", (d, c.d_ff), "mat"
            yield p + "ffn.b1", (c.d_ff,), "zero"
            yield p + "ffn.w2", (c.d_ff, d), "resid"
            yield p + "ffn.b2", (d,), "zero"
        yield "ln_f.g", (d,), "one"
        yield "ln_f.b", (d,), "zero"
        yield "head.w", (d, c.vocab_size), "mat"
        yield "head.b", (c.vocab_size,), "zero"

    def _init_params(self, rng, init):
        resid_std = 0.02 / np.sqrt(2 * self.config.n_layers)
        for name, shape, kind in self._shapes():
            if init == "zeros":
                arr = np.zeros(shape)
            elif kind == "zero":
                arr = np.zeros(shape)
            elif kind == "one":
                arr = np.ones(shape)
            elif kind == "mat":
                arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            elif kind == "resid":
                arr = rng.normal(0.0, resid_std, size=shape)
            else:
                arr = rng.normal(0.0, 0.02, size=shape)
            self.params[name] = Tensor(arr, name=name)

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self):
        return sum(p.size for p in self.params.values())

    def requires_grad_(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def freeze(self):
        return self.requires_grad_(False)

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state dict mismatch: {sorted(missing)}")
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise ValueError(f"{k}: shape {np.shape(v)} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].data.dtype)
        return self

    def copy(self):
        other = ToyMLLM(self.config, init="zeros")
        other.load_state_dict(self.state_dict())
        return other

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    # ----------------------------------------------------------- checkpoints
    def save(self, path) -> None:
        """Write ``path`` (concatenated TCT1 tensors) and ``path.manifest``."""
        path = Path(path)
        lines = ["# config " + json.dumps(asdict(self.config), sort_keys=True)]
        offset = 0
        with open(path, "wb") as f:
            for name, p in self.params.items():
                blob = tensor_to_bytes(p.data)
                f.write(blob)
                lines.append(f"{name} {offset} {'x'.join(map(str, p.shape))}")
                offset += len(blob)
        Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ToyMLLM":
        path = Path(path)
        lines = Path(str(path) + ".manifest").read_text().splitlines()
        if not lines or not lines[0].startswith("# config "):
            raise ValueError(f"{path}.manifest: missing config line")
        config = ModelConfig(**json.loads(lines[0][len("# config "):]))
        model = cls(config, init="zeros")
        state = OrderedDict()
        with open(path, "rb") as f:
            for line in lines[1:]:
                name, offset, shape = line.split()
                f.seek(int(offset))
                arr = read_tensor(f)
                want = tuple(int(s) for s in shape.split("x"))
                if arr.shape != want:
                    raise ValueError(f"{name}: manifest shape {want} != stored {arr.shape}")
                state[name] = arr
        return model.load_state_dict(state)

    # --------------------------------------------------------------- forward
    def patchify(self, images: Tensor) -> Tensor:
        c = self.config
        B = images.shape[0]
        g = c.image_size // c.patch_size
        x = images.reshape(B, g, c.patch_size, g, c.patch_size, 3)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, g * g, c.patch_dim)

    def _heads(self, x: Tensor) -> Tensor:
        B, S, d = x.shape
        H = self.config.n_heads
        return x.reshape(B, S, H, d // H).transpose(0, 2, 1, 3)

    def _merge(self, x: Tensor) -> Tensor:
        B, H, S, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, S, H * dh)

    def _qkv(self, h: Tensor, i: int):
        p = self.params
        pre = f"blocks.{i}.attn."
        q = self._heads(h @ p[pre + "q.w"] + p[pre + "q.b"])
        k = self._heads(h @ p[pre + "k.w"] + p[pre + "k.b"])
        v = self._heads(h @ p[pre + "v.w"] + p[pre + "v.b"])
        return q, k, v

    def _attend(self, q, k, v, mask=None):
        scale = 1.0 / np.sqrt(q.shape[-1])
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        if mask is not None:
            scores = scores + mask
        return T.softmax(scores, axis=-1) @ v

    def _ffn(self, x: Tensor, i: int) -> Tensor:
        p = self.params
        pre = f"blocks.{i}."
        h = T.layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h = T.gelu(h @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"])
        return x + (h @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"])

    def _attn_out(self, x: Tensor, o: Tensor, i: int) -> Tensor:
        p = self.params
        pre = f"blocks.{i}.attn."
        return x + (self._merge(o) @ p[pre + "o.w"] + p[pre + "o.b"])

    def image_stream(self, images) -> list:
        """Per-layer (keys, values) of the image prefix; images are (B, H, W, 3)."""
        if not isinstance(images, Tensor):
            images = Tensor(images)
        c = self.config
        if images.ndim != 4 or images.shape[1:] != (c.image_size, c.image_size, 3):
            raise T.ShapeError(f"image_stream: expected (B, {c.image_size}, {c.image_size}, 3), got {images.shape}")
        p = self.params
        x = self.patchify(images) @ p["patch_embed.w"] + p["patch_embed.b"] + p["pos_image"]
        kv = []
        for i in range(c.n_layers):
            pre = f"blocks.{i}."
            h = T.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            last = i == c.n_layers - 1
            if last:
                # the final image block only feeds keys/values to the text
                pa = pre + "attn."
                k = self._heads(h @ p[pa + "k.w"] + p[pa + "k.b"])
                v = self._heads(h @ p[pa + "v.w"] + p[pa + "v.b"])
                kv.append((k, v))
                break
            q, k, v = self._qkv(h, i)
            kv.append((k, v))
            x = self._attn_out(x, self._attend(q, k, v), i)
            x = self._ffn(x, i)
        return kv

    def _text_mask(self, L: int, n_img: int, dtype):
        mask = np.zeros((L, n_img + L), dtype=dtype)
        mask[:, n_img:] = np.triu(np.full((L, L), _NEG, dtype=dtype), k=1)
        return Tensor(mask, dtype=dtype)

    def text_hidden(self, image_kv, tokens, image_index=None) -> Tensor:
        """Final-layer-normed hidden states (Bt, L, d) for padded ``tokens``."""
        c = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise T.ShapeError(f"text_hidden: tokens must be (B, L), got {tokens.shape}")
        Bt, L = tokens.shape
        if L > c.max_text_len:
            raise ValueError(f"text length {L} exceeds the positional table ({c.max_text_len})")
        p = self.params
        n_img_batch = image_kv[0][0].shape[0]
        if image_index is None:
            image_index = np.arange(n_img_batch)
        image_index = np.asarray(image_index, dtype=np.int64)
        if image_index.shape != (Bt,):
            raise T.ShapeError(f"text_hidden: image_index shape {image_index.shape} vs batch {Bt}")
        identity = n_img_batch == Bt and np.array_equal(image_index, np.arange(Bt))
        x = T.embed_lookup(p["token_embed"], tokens) + p["pos_text"][:L]
        dtype = x.data.dtype
        mask = self._text_mask(L, c.n_patches, dtype)
        for i in range(c.n_layers):
            pre = f"blocks.{i}."
            h = T.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q, k, v = self._qkv(h, i)
            ki, vi = image_kv[i]
            if not identity:
                ki = T.embed_lookup(ki, image_index)
                vi = T.embed_lookup(vi, image_index)
            k = T.concat([ki, k], axis=2)
            v = T.concat([vi, v], axis=2)
            x = self._attn_out(x, self._attend(q, k, v, mask), i)
            x = self._ffn(x, i)
        return T.layernorm(x, p["ln_f.g"], p["ln_f.b"])

    def head(self, hidden: Tensor) -> Tensor:
        return hidden @ self.params["head.w"] + self.params["head.b"]

    def forward_logits(self, image, tokens) -> Tensor:
        """Logits (len(tokens), vocab) for one image and one token sequence."""
        image = image if isinstance(image, Tensor) else Tensor(image)
        if image.ndim == 3:
            image = image.reshape(1, *image.shape)
        tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
        hidden = self.text_hidden(self.image_stream(image), tokens)
        logits = self.head(hidden)
        return logits.reshape(logits.shape[1], logits.shape[2])


# ----------------------------------------------------------------------------
# sequence construction and losses


def build_answer_batch(questions, answers, max_len=128):
    """Pack ``[BOS; q; a]`` rows, right-padded, plus the supervised positions.

    Returns ``(tokens, rows, cols, targets)`` where position ``(rows[j],
    cols[j])`` predicts ``targets[j]``; each answer is followed by EOS.
    """
    seqs, rows, cols, targets = [], [], [], []
    for r, (q, a) in enumerate(zip(questions, answers)):
        q_ids = tokenize(q) if not isinstance(q, list) else q
        a_ids = tokenize(a) if not isinstance(a, list) else a
        seq = [BOS] + q_ids + a_ids
        if len(seq) > max_len:
            raise ValueError(f"combined length {len(seq)} exceeds context {max_len}")
        start = len(q_ids)
        for j, t in enumerate(a_ids + [EOS]):
            rows.append(r)
            cols.append(start + j)
            targets.append(t)
        seqs.append(seq)
    L = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), L), PAD, dtype=np.int64)
    for r, s in enumerate(seqs):
        tokens[r, : len(s)] = s
    return tokens, np.array(rows), np.array(cols), np.array(targets)


def answer_loss(model: ToyMLLM, image_kv, questions, answers, seq_weights=None, image_index=None, smoothing=0.0):
    """Weighted sum over sequences of each sequence's mean answer-token CE.

    With ``seq_weights`` omitted every sequence gets ``1/n``, giving the mean of
    per-sequence teacher-forced losses. Returns ``(loss, per_sequence_losses)``.
    """
    n = len(questions)
    tokens, rows, cols, targets = build_answer_batch(questions, answers, model.config.max_text_len)
    hidden = model.text_hidden(image_kv, tokens, image_index)
    B, L, d = hidden.shape
    picked = T.embed_lookup(hidden.reshape(B * L, d), rows * L + cols)
    logits = model.head(picked)
    counts = np.bincount(rows, minlength=n).astype(np.float64)
    sw = np.full(n, 1.0 / n) if seq_weights is None else np.asarray(seq_weights, dtype=np.float64)
    pos_w = sw[rows] / counts[rows]
    loss = T.cross_entropy(logits, targets, pos_w, smoothing)
    ld = logits.data.astype(np.float64)
    m = ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(ld - m).sum(axis=1)) + m[:, 0]
    nll = lse - ld[np.arange(len(targets)), targets]
    per_seq = np.bincount(rows, weights=nll, minlength=n) / counts
    return loss, per_seq


def teacher_forced_loss(model: ToyMLLM, image, question, answer) -> Tensor:
    """Mean CE of the answer tokens and the closing EOS given image and question."""
    if len(question) == 0 or len(answer) == 0:
        raise ValueError("question and answer must be non-empty")
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim == 3:
        image = image.reshape(1, *image.shape)
    loss, _ = answer_loss(model, model.image_stream(image), [question], [answer])
    return loss


# ----------------------------------------------------------------------------
# decoding


def greedy_decode_batch(model: ToyMLLM, images, questions, max_len: int = 64) -> list[bytes]:
    """Greedy decoding for a batch; ties go to the lowest token id."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images)
    n = len(questions)
    if max_len <= 0 or n == 0:
        return [b""] * n
    limit = model.config.max_text_len
    with no_grad():
        kv = model.image_stream(Tensor(images, dtype=model.params["head.w"].data.dtype))
        seqs = [[BOS] + tokenize(q) for q in questions]
        outs = [[] for _ in range(n)]
        done = [len(s) > limit for s in seqs]
        for _ in range(max_len):
            if all(done):
                break
            L = min(max(len(s) for s in seqs), limit)
            tokens = np.full((n, L), PAD, dtype=np.int64)
            last = np.zeros(n, dtype=np.int64)
            for r, s in enumerate(seqs):
                s = s[-L:] if len(s) > L else s
                tokens[r, : len(s)] = s
                last[r] = len(s) - 1
            hidden = model.text_hidden(kv, tokens)
            picked = hidden.data[np.arange(n), last]
            logits = picked @ model.params["head.w"].data + model.params["head.b"].data
            nxt = np.argmax(logits, axis=-1)
            for r in range(n):
                if done[r]:
                    continue
                t = int(nxt[r])
                if t == EOS:
                    done[r] = True
                    continue
                outs[r].append(t)
                seqs[r].append(t)
                if len(seqs[r]) >= limit:
                    done[r] = True
    return [bytes(t for t in o if t < 256) for o in outs]


def greedy_decode(model: ToyMLLM, image, question, max_len: int = 64) -> bytes:
    image = np.asarray(image)
    return greedy_decode_batch(model, image[None], [question], max_len)[0]
