"""Small trainable causal decoder with LoRA adapters and a yes/no head.

The decoder consumes pre-embedded sequences (the fusion layer splices
collaborative pseudo-tokens between text-token embeddings, so embedding
lookup happens upstream), adds learned positional embeddings, and runs
pre-norm causal attention + FFN layers. Classification reads the softmax
over the yes/no logits at the final position. LoRA adapters attach to the
attention query/value projections; the base weights freeze at attach time.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import RngStream
from .tensor import (
    MASK_FILL,
    Parameter,
    Tensor,
    dropout,
    embedding,
    layer_norm,
    matmul,
    relu,
    reshape,
    softmax_rows,
    take,
    transpose,
)

PAD, UNK, USER, ITEM, YES, NO = 0, 1, 2, 3, 4, 5
SPECIAL_TOKENS = ["<pad>", "<unk>", "<user>", "<item>", "<yes>", "<no>"]

_WORD_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")
_SLOT_RE = re.compile(r"(<user>|<item>)")


class ContextError(ValueError):
    pass


class MergeError(RuntimeError):
    pass


class Vocab:
    """Bidirectional token <-> id map; line number = id in the file format."""

    def __init__(self, tokens: list[str]):
        if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the reserved special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab contains duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, token: str) -> int:
        return self.index.get(token, UNK)

    def decode(self, token_id: int) -> str:
        return self.tokens[token_id]

    @classmethod
    def build(cls, texts: list[str]) -> "Vocab":
        """Deterministic vocabulary: specials, then sorted unique words."""
        words: set[str] = set()
        for text in texts:
            words.update(_WORD_RE.findall(text.lower()))
        words -= {"yes", "no"}  # routed to the answer specials
        return cls(SPECIAL_TOKENS + sorted(words))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Lowercased word/punctuation split with <unk> fallback.

    The literal slot markers <user>/<item> map to their special ids, and the
    bare answer words yes/no map to <yes>/<no> so the classification head
    always has a well-defined target pair. No other text can produce a
    special id.
    """
    ids = []
    for chunk in _SLOT_RE.split(text.lower()):
        if chunk == "<user>":
            ids.append(USER)
        elif chunk == "<item>":
            ids.append(ITEM)
        else:
            for word in _WORD_RE.findall(chunk):
                if word == "yes":
                    ids.append(YES)
                elif word == "no":
                    ids.append(NO)
                else:
                    ids.append(vocab.encode(word))
    return ids


@dataclass(frozen=True)
class LlmConfig:
    vocab_size: int
    d2: int = 64
    layers: int = 2
    heads: int = 4
    context_len: int = 128
    d_ff: int | None = None
    dropout: float = 0.0
    yes_token: int = YES
    no_token: int = NO
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d2 % self.heads != 0:
            raise ValueError(f"d2={self.d2} not divisible by heads={self.heads}")
        if self.yes_token == self.no_token:
            raise ValueError("yes_token and no_token must differ")

    @property
    def ffn_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 2 * self.d2


@dataclass
class LoRAAdapter:
    """Low-rank delta (alpha/rank) * B A attached to a frozen base weight."""

    a: Parameter
    b: Parameter
    rank: int
    alpha: float
    target: str
    merged: bool = False

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def create(cls, d_in: int, d_out: int, rank: int, alpha: float, target: str,
               rng: RngStream) -> "LoRAAdapter":
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        a = Parameter(rng.normal((rank, d_in), std=1.0 / math.sqrt(d_in)).astype(np.float32))
        b = Parameter(np.zeros((d_out, rank), dtype=np.float32))
        return cls(a=a, b=b, rank=rank, alpha=alpha, target=target)


def lora_apply(x: Tensor, w: Parameter, adapter: LoRAAdapter | None) -> Tensor:
    """x W plus the scaled low-rank path; skipped once merged into W."""
    base = matmul(x, w)
    if adapter is None or adapter.merged:
        return base
    delta = matmul(matmul(x, transpose(adapter.a)), transpose(adapter.b))
    return base + delta * adapter.scaling


def lora_merge(w: Parameter, adapter: LoRAAdapter) -> None:
    """Fold the adapter into the base weight: W += (alpha/r) A^T B^T."""
    if adapter.merged:
        raise MergeError(f"adapter for {adapter.target} is already merged")
    delta = adapter.scaling * (adapter.a.data.astype(np.float64).T
                               @ adapter.b.data.astype(np.float64).T)
    if delta.shape != w.data.shape:
        raise MergeError(f"adapter delta {delta.shape} does not match weight {w.data.shape}")
    w.data = (w.data.astype(np.float64) + delta).astype(w.data.dtype)
    adapter.merged = True


def lora_unmerge(w: Parameter, adapter: LoRAAdapter) -> None:
    if not adapter.merged:
        raise MergeError(f"adapter for {adapter.target} is not merged")
    delta = adapter.scaling * (adapter.a.data.astype(np.float64).T
                               @ adapter.b.data.astype(np.float64).T)
    w.data = (w.data.astype(np.float64) - delta).astype(w.data.dtype)
    adapter.merged = False


@dataclass
class DecoderLayer:
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    ln1_gain: Parameter
    ln1_bias: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter


class TinyDecoder:
    """From-scratch causal LM sized for desk experiments."""

    def __init__(self, config: LlmConfig, rng: RngStream):
        self.config = config
        c = config
        init = rng.spawn("llm-init")
        std = 1.0 / math.sqrt(c.d2)

        def w(shape, s=std):
            return Parameter(init.normal(shape, std=s).astype(np.float32))

        self.tok_emb = w((c.vocab_size, c.d2), 0.02)
        self.pos_emb = w((c.context_len, c.d2), 0.02)
        self.layers: list[DecoderLayer] = []
        for _ in range(c.layers):
            self.layers.append(
                DecoderLayer(
                    wq=w((c.d2, c.d2)), wk=w((c.d2, c.d2)),
                    wv=w((c.d2, c.d2)), wo=w((c.d2, c.d2)),
                    w1=w((c.d2, c.ffn_dim)), b1=Parameter(np.zeros(c.ffn_dim, dtype=np.float32)),
                    w2=w((c.ffn_dim, c.d2), 1.0 / math.sqrt(c.ffn_dim)),
                    b2=Parameter(np.zeros(c.d2, dtype=np.float32)),
                    ln1_gain=Parameter(np.ones(c.d2, dtype=np.float32)),
                    ln1_bias=Parameter(np.zeros(c.d2, dtype=np.float32)),
                    ln2_gain=Parameter(np.ones(c.d2, dtype=np.float32)),
                    ln2_bias=Parameter(np.zeros(c.d2, dtype=np.float32)),
                )
            )
        self.final_gain = Parameter(np.ones(c.d2, dtype=np.float32))
        self.final_bias = Parameter(np.zeros(c.d2, dtype=np.float32))
        # small head init keeps initial logits near zero, so adapter-driven
        # structure is not fighting large random per-prompt offsets
        self.head = w((c.d2, c.vocab_size), 0.02)
        self.adapters: dict[str, LoRAAdapter] = {}

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, l in enumerate(self.layers):
            for f in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
                      "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
                out.append((f"layer{i}.{f}", getattr(l, f)))
        out += [("final_gain", self.final_gain), ("final_bias", self.final_bias),
                ("head", self.head)]
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_lora_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for name in sorted(self.adapters):
            ad = self.adapters[name]
            out += [(f"lora.{name}.a", ad.a), (f"lora.{name}.b", ad.b)]
        return out

    def lora_parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_lora_parameters()]

    def freeze_base(self) -> None:
        for p in self.parameters():
            p.trainable = False

    def attach_lora(self, rank: int = 8, alpha: float = 16.0,
                    rng: RngStream | None = None) -> None:
        """Adapters on every layer's query and value projections; base freezes."""
        if self.adapters:
            raise MergeError("adapters already attached")
        rng = rng or RngStream(0)
        lrng = rng.spawn("lora-init")
        c = self.config
        for i, layer in enumerate(self.layers):
            for field_name in ("wq", "wv"):
                target = f"layer{i}.{field_name}"
                self.adapters[target] = LoRAAdapter.create(c.d2, c.d2, rank, alpha, target, lrng)
        self.freeze_base()

    def merge_all_lora(self) -> None:
        for name, ad in sorted(self.adapters.items()):
            layer = self.layers[int(name.split(".")[0].removeprefix("layer"))]
            lora_merge(getattr(layer, name.split(".")[1]), ad)

    def unmerge_all_lora(self) -> None:
        for name, ad in sorted(self.adapters.items()):
            layer = self.layers[int(name.split(".")[0].removeprefix("layer"))]
            lora_unmerge(getattr(layer, name.split(".")[1]), ad)

    # -- forward ----------------------------------------------------------

    def _attention(self, x: Tensor, layer: DecoderLayer, index: int, mask: Tensor) -> Tensor:
        c = self.config
        n = x.shape[0]
        dh = c.d2 // c.heads
        q = lora_apply(x, layer.wq, self.adapters.get(f"layer{index}.wq"))
        k = matmul(x, layer.wk)
        v = lora_apply(x, layer.wv, self.adapters.get(f"layer{index}.wv"))

        def split(t):
            return transpose(reshape(t, (n, c.heads, dh)), (1, 0, 2))

        scores = matmul(split(q), transpose(split(k), (0, 2, 1))) * (1.0 / math.sqrt(dh))
        weights = softmax_rows(scores + mask)
        out = reshape(transpose(matmul(weights, split(v)), (1, 0, 2)), (n, c.d2))
        return matmul(out, layer.wo)

    def hidden_states(self, embedded: Tensor, mode: str = "eval",
                      rng: RngStream | None = None) -> Tensor:
        """Final-norm hidden states for an already-embedded (T, d2) sequence."""
        c = self.config
        n = embedded.shape[0]
        if n > c.context_len:
            raise ContextError(f"sequence length {n} exceeds context_len {c.context_len}")
        causal = np.tril(np.ones((n, n), dtype=bool))
        mask = Tensor(np.where(causal, 0.0, MASK_FILL).astype(np.float32))
        x = embedded + take(self.pos_emb, slice(0, n))
        for i, layer in enumerate(self.layers):
            attn = x + dropout(
                self._attention(layer_norm(x, layer.ln1_gain, layer.ln1_bias, c.ln_eps),
                                layer, i, mask),
                c.dropout, mode, rng)
            ffn_in = layer_norm(attn, layer.ln2_gain, layer.ln2_bias, c.ln_eps)
            ffn = matmul(relu(matmul(ffn_in, layer.w1) + layer.b1), layer.w2) + layer.b2
            x = attn + dropout(ffn, c.dropout, mode, rng)
        return layer_norm(x, self.final_gain, self.final_bias, c.ln_eps)

    def decoder_forward(self, embedded: Tensor, mode: str = "eval",
                        rng: RngStream | None = None) -> Tensor:
        """Full-vocabulary logits (T, vocab_size)."""
        return matmul(self.hidden_states(embedded, mode, rng), self.head)

    def embed_tokens(self, ids: list[int] | np.ndarray) -> Tensor:
        return embedding(self.tok_emb, np.asarray(ids, dtype=np.int64))


def predict_yes_prob(embedded: Tensor, model: TinyDecoder, mode: str = "eval",
                     rng: RngStream | None = None) -> Tensor:
    """P(answer = yes): two-way softmax over the yes/no logits at the end.

    Only the two head columns are touched, so training never pays for the
    full-vocabulary projection.
    """
    c = model.config
    h = model.hidden_states(embedded, mode, rng)
    last = reshape(take(h, slice(embedded.shape[0] - 1, embedded.shape[0])), (1, c.d2))
    cols = take(model.head, (slice(None), np.array([c.yes_token, c.no_token])))
    pair = softmax_rows(matmul(last, cols))
    return reshape(pair, (2,))[0]
