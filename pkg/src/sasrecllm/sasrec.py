"""Self-attentive sequential encoder over item-interaction histories.

Item + positional embeddings feed a stack of pre-norm transformer blocks
(causal multi-head attention, then a position-wise two-layer FFN, each
wrapped as x + Dropout(sublayer(LayerNorm(x)))). The final hidden state of a
user's padded history doubles as the user's collaborative embedding; an
item's collaborative embedding is its table row. Pretraining is next-item
prediction with one sampled negative per position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream
from .tensor import (
    MASK_FILL,
    Parameter,
    Tensor,
    bce_loss,
    dropout,
    embedding,
    layer_norm,
    matmul,
    mul,
    no_grad,
    reshape,
    sigmoid,
    softmax_rows,
    transpose,
    tsum,
)

PAD_ITEM = 0


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class SasrecConfig:
    num_items: int
    d1: int = 64
    n: int = 25
    blocks: int = 2
    heads: int = 4
    dropout: float = 0.2
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d1 % self.heads != 0:
            raise ValueError(f"d1={self.d1} not divisible by heads={self.heads}")
        if self.n < 1 or self.blocks < 0 or self.num_items < 1:
            raise ValueError("num_items and n must be >= 1, blocks >= 0")


@dataclass(frozen=True)
class InteractionSequence:
    """Fixed-length item id row (0 = pad, left prefix) with next-item targets."""

    user: int
    items: np.ndarray
    targets: np.ndarray

    @property
    def valid_mask(self) -> np.ndarray:
        return self.items != PAD_ITEM


def standardize_sequence(raw: list[int], n: int, user: int = -1) -> InteractionSequence:
    """Right-align the most recent events and shift by one for targets.

    The inputs are events 1..k-1 and the targets events 2..k, so every
    target is strictly in the input's future; a single event has no
    (input, target) pair and is rejected.
    """
    if not raw:
        raise SequenceError("empty interaction sequence")
    if len(raw) < 2:
        raise SequenceError("a single event yields no (input, target) pair")
    inputs = list(raw[:-1])[-n:]
    targets = list(raw[1:])[-n:]
    pad = n - len(inputs)
    items = np.array([PAD_ITEM] * pad + inputs, dtype=np.int64)
    tgts = np.array([PAD_ITEM] * pad + targets, dtype=np.int64)
    return InteractionSequence(user=user, items=items, targets=tgts)


def encoding_sequence(raw: list[int], n: int, user: int = -1) -> InteractionSequence:
    """Inference-time padding: the full recent history, no target shift.

    An empty history encodes as the all-pad sequence (cold fallback).
    """
    inputs = list(raw)[-n:]
    pad = n - len(inputs)
    items = np.array([PAD_ITEM] * pad + inputs, dtype=np.int64)
    return InteractionSequence(user=user, items=items, targets=np.zeros(n, dtype=np.int64))


@dataclass
class BlockWeights:
    wq: Parameter
    wk: Parameter
    wv: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    ln1_gain: Parameter
    ln1_bias: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter


def attention_mask(items: np.ndarray) -> Tensor:
    """Additive (n, n) mask: position t sees keys j <= t that are not pads."""
    n = items.shape[0]
    causal = np.tril(np.ones((n, n), dtype=bool))
    key_ok = (items != PAD_ITEM)[None, :]
    allowed = causal & key_ok
    return Tensor(np.where(allowed, 0.0, MASK_FILL).astype(np.float32))


def attention_block(x: Tensor, w: BlockWeights, heads: int, mask: Tensor) -> Tensor:
    """Multi-head causal self-attention, per-head scaling 1/sqrt(d1/heads)."""
    n, d1 = x.shape
    dh = d1 // heads
    q = matmul(x, w.wq)
    k = matmul(x, w.wk)
    v = matmul(x, w.wv)

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (n, heads, dh)), (1, 0, 2))

    qh, kh, vh = split(q), split(k), split(v)
    scores = matmul(qh, transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    weights = softmax_rows(scores + mask)
    out = matmul(weights, vh)
    return reshape(transpose(out, (1, 0, 2)), (n, d1))


def ffn_pointwise(s: Tensor, w1: Parameter, b1: Parameter, w2: Parameter, b2: Parameter) -> Tensor:
    """ReLU(s W1 + b1) W2 + b2 applied identically at every position."""
    from .tensor import relu

    return matmul(relu(matmul(s, w1) + b1), w2) + b2


def residual_sublayer(x: Tensor, sublayer, gain, bias, rate, mode, rng, eps=1e-5) -> Tensor:
    """x + Dropout(sublayer(LayerNorm(x))) — pre-norm wiring."""
    return x + dropout(sublayer(layer_norm(x, gain, bias, eps)), rate, mode, rng)


class SasrecModel:
    """Weights plus the forward passes of the sequential encoder."""

    def __init__(self, config: SasrecConfig, rng: RngStream):
        self.config = config
        c = config
        init = rng.spawn("sasrec-init")
        emb = init.normal(((c.num_items + 1), c.d1), std=0.02).astype(np.float32)
        emb[PAD_ITEM] = 0.0
        self.item_emb = Parameter(emb)
        self.pos_emb = Parameter(init.normal((c.n, c.d1), std=0.02).astype(np.float32))
        proj_std = 1.0 / math.sqrt(c.d1)
        self.blocks: list[BlockWeights] = []
        for _ in range(c.blocks):
            self.blocks.append(
                BlockWeights(
                    wq=Parameter(init.normal((c.d1, c.d1), std=proj_std).astype(np.float32)),
                    wk=Parameter(init.normal((c.d1, c.d1), std=proj_std).astype(np.float32)),
                    wv=Parameter(init.normal((c.d1, c.d1), std=proj_std).astype(np.float32)),
                    w1=Parameter(init.normal((c.d1, c.d1), std=proj_std).astype(np.float32)),
                    b1=Parameter(np.zeros(c.d1, dtype=np.float32)),
                    w2=Parameter(init.normal((c.d1, c.d1), std=proj_std).astype(np.float32)),
                    b2=Parameter(np.zeros(c.d1, dtype=np.float32)),
                    ln1_gain=Parameter(np.ones(c.d1, dtype=np.float32)),
                    ln1_bias=Parameter(np.zeros(c.d1, dtype=np.float32)),
                    ln2_gain=Parameter(np.ones(c.d1, dtype=np.float32)),
                    ln2_bias=Parameter(np.zeros(c.d1, dtype=np.float32)),
                )
            )
        # train-split histories for encode_user lookups (plug-in, not weights)
        self.user_histories: dict[int, list[int]] = {}

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = [("item_emb", self.item_emb), ("pos_emb", self.pos_emb)]
        for i, b in enumerate(self.blocks):
            for f in ("wq", "wk", "wv", "w1", "b1", "w2", "b2",
                      "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
                out.append((f"block{i}.{f}", getattr(b, f)))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    # -- forward ----------------------------------------------------------

    def embed_sequence(self, seq: InteractionSequence) -> Tensor:
        """Row t = item_emb[items[t]] + pos_emb[t]; pads masked downstream."""
        if seq.items.min() < 0 or seq.items.max() > self.config.num_items:
            raise IndexError(
                f"item id outside [0, {self.config.num_items}]: "
                f"min={seq.items.min()}, max={seq.items.max()}"
            )
        return embedding(self.item_emb, seq.items) + self.pos_emb

    def forward_hidden(self, seq: InteractionSequence, mode: str = "eval",
                       rng: RngStream | None = None) -> Tensor:
        """Hidden states (n, d1) after all blocks; row t encodes items <= t."""
        c = self.config
        x = self.embed_sequence(seq)
        mask = attention_mask(seq.items)
        for b in self.blocks:
            x = residual_sublayer(
                x, lambda h, b=b: attention_block(h, b, c.heads, mask),
                b.ln1_gain, b.ln1_bias, c.dropout, mode, rng, c.ln_eps,
            )
            x = residual_sublayer(
                x, lambda h, b=b: ffn_pointwise(h, b.w1, b.b1, b.w2, b.b2),
                b.ln2_gain, b.ln2_bias, c.dropout, mode, rng, c.ln_eps,
            )
        return x

    def relevance_scores(self, hidden_t: Tensor) -> Tensor:
        """Dot products against every real item's embedding; index i-1 = item i."""
        table = embedding(self.item_emb, np.arange(1, self.config.num_items + 1))
        return reshape(matmul(reshape(hidden_t, (1, -1)), transpose(table)),
                       (self.config.num_items,))

    def encode_item(self, item: int) -> Tensor:
        """Collaborative item embedding: the table row."""
        if not 1 <= item <= self.config.num_items:
            raise IndexError(f"item id {item} outside [1, {self.config.num_items}]")
        return embedding(self.item_emb, np.array([item]))[0]

    def encode_user(self, history: list[int], mode: str = "eval",
                    rng: RngStream | None = None) -> Tensor:
        """Final non-pad hidden state of the padded history.

        An empty or unknown history falls back to the all-pad encoding.
        """
        seq = encoding_sequence(history, self.config.n)
        hidden = self.forward_hidden(seq, mode=mode, rng=rng)
        return hidden[self.config.n - 1]

    def encode_user_by_id(self, user: int, mode: str = "eval",
                          rng: RngStream | None = None) -> Tensor:
        return self.encode_user(self.user_histories.get(user, []), mode=mode, rng=rng)

    # -- pretraining --------------------------------------------------------

    def predict_proba(self, history: list[int], item: int) -> float:
        """Standalone recommender head: sigmoid of <user encoding, item row>."""
        with no_grad():
            u = self.encode_user(history)
            i = self.encode_item(item)
            score = tsum(mul(u, i))
            return float(sigmoid(score).data)

    def sequence_loss(self, seq: InteractionSequence, mode: str, rng: RngStream) -> tuple[Tensor, int]:
        """Summed next-item BCE over valid positions (positive + one negative each)."""
        c = self.config
        valid = np.nonzero(seq.targets != PAD_ITEM)[0]
        if valid.size == 0:
            raise SequenceError("sequence has no supervised positions")
        hidden = self.forward_hidden(seq, mode=mode, rng=rng)
        pos_ids = seq.targets[valid]
        # uniform negative over [1, num_items] excluding the target
        draws = rng.randint(1, c.num_items, (valid.size,)) if c.num_items > 1 else pos_ids.copy()
        neg_ids = np.where(draws >= pos_ids, draws + 1, draws) if c.num_items > 1 else pos_ids
        rows = hidden[valid]
        pos_scores = tsum(mul(rows, embedding(self.item_emb, pos_ids)), axis=1)
        neg_scores = tsum(mul(rows, embedding(self.item_emb, neg_ids)), axis=1)
        loss = tsum(bce_loss(sigmoid(pos_scores), 1.0)) + tsum(bce_loss(sigmoid(neg_scores), 0.0))
        return loss, int(valid.size)


def pretrain_step(batch: list[InteractionSequence], model: SasrecModel, optimizer,
                  rng: RngStream) -> float:
    """One optimizer step on a batch of sequences; returns the mean position loss."""
    if not batch:
        raise SequenceError("empty pretraining batch")
    optimizer.zero_grad()
    losses = []
    counts = 0
    for seq in batch:
        loss, k = model.sequence_loss(seq, mode="train", rng=rng)
        losses.append((loss, k))
        counts += k
    total = 0.0
    for loss, _ in losses:
        loss.backward(seed=1.0 / counts)
        total += float(loss.data)
    optimizer.step()
    return total / counts
