"""Comparison recommenders trained on the same split bundle as the hybrid.

MF and NCF consume bare (user, item, label) triples; MC and the recurrent
baseline consume the per-example liked-item history. All four produce
probabilities scored by the shared metrics module, and all are deterministic
under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledExample
from .metrics import MetricReport, ScoredExample, evaluate_examples
from .optim import AdamW
from .rng import RngStream
from .tensor import (
    Parameter,
    Tensor,
    bce_loss,
    concat,
    embedding,
    matmul,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    tanh,
    tsum,
)


@dataclass(frozen=True)
class BaselineConfig:
    factors: int = 16
    hidden: tuple[int, int] = (64, 32)  # NCF head widths
    rnn_hidden: int = 64
    max_history: int = 25
    epochs: int = 60
    batch_size: int = 128
    lr: float = 1e-2
    weight_decay: float = 0.0
    seed: int = 0


def _scored(model, split: list[LabeledExample]) -> list[ScoredExample]:
    with no_grad():
        return [
            ScoredExample(user=e.user, label=e.label, score=model.predict_proba(e))
            for e in split
        ]


def _evaluate(model, splits: dict[str, list[LabeledExample]]) -> dict[str, MetricReport]:
    return {name: evaluate_examples(_scored(model, split))
            for name, split in splits.items() if split}


class MfModel:
    """Biased matrix factorization: sigmoid(u.v + b_u + b_i + b0).

    Users/items unseen in training fall back to the remaining bias terms.
    """

    def __init__(self, num_users: int, num_items: int, config: BaselineConfig,
                 rng: RngStream):
        k = config.factors
        init = rng.spawn("mf-init")
        self.user_factors = Parameter(init.normal((num_users + 1, k), std=0.05).astype(np.float32))
        self.item_factors = Parameter(init.normal((num_items + 1, k), std=0.05).astype(np.float32))
        self.user_bias = Parameter(np.zeros((num_users + 1, 1), dtype=np.float32))
        self.item_bias = Parameter(np.zeros((num_items + 1, 1), dtype=np.float32))
        self.global_bias = Parameter(np.zeros((1,), dtype=np.float32))
        self.seen_users: set[int] = set()
        self.seen_items: set[int] = set()

    def parameters(self) -> list[Parameter]:
        return [self.user_factors, self.item_factors, self.user_bias,
                self.item_bias, self.global_bias]

    def batch_logits(self, users: np.ndarray, items: np.ndarray) -> Tensor:
        uf = embedding(self.user_factors, users)
        vf = embedding(self.item_factors, items)
        dots = tsum(mul(uf, vf), axis=1)
        ub = reshape(embedding(self.user_bias, users), (len(users),))
        ib = reshape(embedding(self.item_bias, items), (len(items),))
        return dots + ub + ib + self.global_bias

    def predict_proba(self, e: LabeledExample) -> float:
        user_ok = e.user in self.seen_users
        item_ok = e.item in self.seen_items
        logit = float(self.global_bias.data[0])
        if user_ok:
            logit += float(self.user_bias.data[e.user, 0])
        if item_ok:
            logit += float(self.item_bias.data[e.item, 0])
        if user_ok and item_ok:
            logit += float(self.user_factors.data[e.user] @ self.item_factors.data[e.item])
        return float(1.0 / (1.0 + np.exp(-logit)))


class NcfModel:
    """Embeddings concatenated into a two-hidden-layer ReLU head."""

    def __init__(self, num_users: int, num_items: int, config: BaselineConfig,
                 rng: RngStream):
        k = config.factors
        h1, h2 = config.hidden
        init = rng.spawn("ncf-init")
        self.user_emb = Parameter(init.normal((num_users + 1, k), std=0.05).astype(np.float32))
        self.item_emb = Parameter(init.normal((num_items + 1, k), std=0.05).astype(np.float32))
        self.w1 = Parameter(init.normal((2 * k, h1), std=(2 * k) ** -0.5).astype(np.float32))
        self.b1 = Parameter(np.zeros(h1, dtype=np.float32))
        self.w2 = Parameter(init.normal((h1, h2), std=h1**-0.5).astype(np.float32))
        self.b2 = Parameter(np.zeros(h2, dtype=np.float32))
        self.w3 = Parameter(init.normal((h2, 1), std=h2**-0.5).astype(np.float32))
        self.b3 = Parameter(np.zeros(1, dtype=np.float32))
        self.seen_users: set[int] = set()
        self.seen_items: set[int] = set()

    def parameters(self) -> list[Parameter]:
        return [self.user_emb, self.item_emb, self.w1, self.b1,
                self.w2, self.b2, self.w3, self.b3]

    def batch_logits(self, users: np.ndarray, items: np.ndarray) -> Tensor:
        x = concat([embedding(self.user_emb, users), embedding(self.item_emb, items)], axis=1)
        h = relu(matmul(x, self.w1) + self.b1)
        h = relu(matmul(h, self.w2) + self.b2)
        return reshape(matmul(h, self.w3) + self.b3, (len(users),))

    def predict_proba(self, e: LabeledExample) -> float:
        # unseen ids keep their (random, untrained) embeddings
        users = np.array([e.user if e.user < self.user_emb.data.shape[0] else 0])
        items = np.array([e.item if e.item < self.item_emb.data.shape[0] else 0])
        logit = self.batch_logits(users, items)
        return float(sigmoid(logit).data[0])


def _train_pointwise(model, train: list[LabeledExample], config: BaselineConfig) -> None:
    """Shared BCE/AdamW loop over (user, item, label) triples."""
    users = np.array([e.user for e in train], dtype=np.int64)
    items = np.array([e.item for e in train], dtype=np.int64)
    labels = np.array([e.label for e in train], dtype=np.float64)
    model.seen_users = set(users.tolist())
    model.seen_items = set(items.tolist())
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = RngStream(config.seed).spawn("pointwise-train")
    for _ in range(config.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(train), config.batch_size):
            idx = order[start : start + config.batch_size]
            opt.zero_grad()
            probs = sigmoid(model.batch_logits(users[idx], items[idx]))
            pos = np.nonzero(labels[idx] == 1)[0]
            neg = np.nonzero(labels[idx] == 0)[0]
            loss_terms = []
            if pos.size:
                loss_terms.append(tsum(bce_loss(probs[pos], 1.0)))
            if neg.size:
                loss_terms.append(tsum(bce_loss(probs[neg], 0.0)))
            total = loss_terms[0] if len(loss_terms) == 1 else loss_terms[0] + loss_terms[1]
            total.backward(seed=1.0 / len(idx))
            opt.step()


def baseline_mf(train: list[LabeledExample], eval_splits: dict[str, list[LabeledExample]],
                config: BaselineConfig, num_users: int, num_items: int) -> tuple[MfModel, dict[str, MetricReport]]:
    model = MfModel(num_users, num_items, config, RngStream(config.seed))
    _train_pointwise(model, train, config)
    return model, _evaluate(model, eval_splits)


def baseline_ncf(train: list[LabeledExample], eval_splits: dict[str, list[LabeledExample]],
                 config: BaselineConfig, num_users: int, num_items: int) -> tuple[NcfModel, dict[str, MetricReport]]:
    model = NcfModel(num_users, num_items, config, RngStream(config.seed))
    _train_pointwise(model, train, config)
    return model, _evaluate(model, eval_splits)


class McModel:
    """First-order transition counts over consecutive liked items."""

    def __init__(self, num_items: int):
        self.num_items = num_items
        self.counts: dict[int, dict[int, int]] = {}
        self.last_item: dict[int, int] = {}

    def fit(self, train: list[LabeledExample]) -> "McModel":
        liked: dict[int, list[tuple[int, int]]] = {}
        for e in train:
            if e.label == 1:
                liked.setdefault(e.user, []).append((e.timestamp, e.item))
        for user, events in liked.items():
            seq = [item for _, item in sorted(events)]
            self.last_item[user] = seq[-1]
            for a, b in zip(seq, seq[1:]):
                self.counts.setdefault(a, {})
                self.counts[a][b] = self.counts[a].get(b, 0) + 1
        return self

    def transition_prob(self, prev: int, nxt: int) -> float:
        row = self.counts.get(prev)
        if not row:
            return 1.0 / self.num_items
        return row.get(nxt, 0) / sum(row.values())

    def predict_proba(self, e: LabeledExample) -> float:
        prev = self.last_item.get(e.user)  # last liked train item
        if prev is None:
            return 1.0 / self.num_items
        return self.transition_prob(prev, e.item)


def baseline_mc(train: list[LabeledExample], eval_splits: dict[str, list[LabeledExample]],
                num_items: int) -> tuple[McModel, dict[str, MetricReport]]:
    model = McModel(num_items).fit(train)
    return model, _evaluate(model, eval_splits)


class RnnModel:
    """Gated recurrent encoder over the liked history; score = <h, e_item>.

    Training consumes each example's own strictly-earlier history; evaluation
    encodes the user's train-split snapshot.
    """

    def __init__(self, num_items: int, config: BaselineConfig, rng: RngStream):
        k = config.rnn_hidden
        self.hidden = k
        self.max_history = config.max_history
        self.user_histories: dict[int, list[int]] = {}
        init = rng.spawn("rnn-init")

        def w(shape, s):
            return Parameter(init.normal(shape, std=s).astype(np.float32))

        self.item_emb = w((num_items + 1, k), 0.05)
        std = k**-0.5
        self.wz, self.uz = w((k, k), std), w((k, k), std)
        self.wr, self.ur = w((k, k), std), w((k, k), std)
        self.wh, self.uh = w((k, k), std), w((k, k), std)
        self.bz = Parameter(np.zeros(k, dtype=np.float32))
        self.br = Parameter(np.zeros(k, dtype=np.float32))
        self.bh = Parameter(np.zeros(k, dtype=np.float32))

    def parameters(self) -> list[Parameter]:
        return [self.item_emb, self.wz, self.uz, self.wr, self.ur,
                self.wh, self.uh, self.bz, self.br, self.bh]

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        z = sigmoid(matmul(x, self.wz) + matmul(h, self.uz) + self.bz)
        r = sigmoid(matmul(x, self.wr) + matmul(h, self.ur) + self.br)
        h_tilde = tanh(matmul(x, self.wh) + matmul(mul(r, h), self.uh) + self.bh)
        one_minus_z = z * -1.0 + 1.0
        return mul(one_minus_z, h) + mul(z, h_tilde)

    def encode(self, history: list[int]) -> Tensor:
        h = Tensor(np.zeros((1, self.hidden), dtype=np.float32))
        for item in history[-self.max_history:]:
            x = embedding(self.item_emb, np.array([item]))
            h = self.step(x, h)
        return h

    def logit(self, e: LabeledExample, history: list[int]) -> Tensor:
        h = self.encode(history)
        v = embedding(self.item_emb, np.array([e.item]))
        return tsum(mul(h, v))

    def predict_proba(self, e: LabeledExample) -> float:
        snapshot = self.user_histories.get(e.user, [])
        return float(sigmoid(self.logit(e, snapshot)).data)


def baseline_rnn(train: list[LabeledExample], eval_splits: dict[str, list[LabeledExample]],
                 config: BaselineConfig, num_items: int) -> tuple[RnnModel, dict[str, MetricReport]]:
    from .data import train_histories

    model = RnnModel(num_items, config, RngStream(config.seed))
    model.user_histories = train_histories(train)
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = RngStream(config.seed).spawn("rnn-train")
    for _ in range(config.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(train), config.batch_size):
            idx = order[start : start + config.batch_size]
            opt.zero_grad()
            for i in idx:
                e = train[i]
                loss = bce_loss(sigmoid(model.logit(e, e.history_items())), float(e.label))
                loss.backward(seed=1.0 / len(idx))
            opt.step()
    return model, _evaluate(model, eval_splits)
