"""Bridges the sequential encoder into the language model's token space.

Three pieces: the mapping MLP that expands a d1 collaborative embedding and
reshapes it into pseudo-token vectors of the LM's width d2; the fixed prompt
template with user/item slots; and the hybrid encoder that splices mapped
collaborative embeddings between text-token embeddings. The textual encoder
is the slot-free variant used for LoRA warm-up and the text-only baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .llm import ContextError, TinyDecoder, Vocab, tokenize
from .rng import RngStream
from .sasrec import SasrecModel
from .tensor import Parameter, Tensor, concat, matmul, relu, reshape


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class MappingConfig:
    d1: int
    d2: int
    d_exp: int | None = None
    proj_token_num: int = 1

    def __post_init__(self):
        if self.d1 >= self.d2:
            raise ValueError(f"mapping requires d1 < d2, got d1={self.d1}, d2={self.d2}")
        if self.proj_token_num < 1:
            raise ValueError("proj_token_num must be >= 1")
        if self.d_exp is not None and self.d_exp < self.d1:
            raise ValueError(f"d_exp={self.d_exp} must be >= d1={self.d1}")

    @property
    def expansion_dim(self) -> int:
        return self.d_exp if self.d_exp is not None else 2 * self.d2


class MappingLayer:
    """Two-layer MLP: expand, project to d2 * proj_token_num, reshape to rows."""

    def __init__(self, config: MappingConfig, rng: RngStream):
        self.config = config
        c = config
        init = rng.spawn("mapping-init")
        d_exp = c.expansion_dim
        out_dim = c.d2 * c.proj_token_num
        self.w1 = Parameter(init.normal((c.d1, d_exp), std=c.d1**-0.5).astype(np.float32))
        self.b1 = Parameter(np.zeros(d_exp, dtype=np.float32))
        self.w2 = Parameter(init.normal((d_exp, out_dim), std=d_exp**-0.5).astype(np.float32))
        self.b2 = Parameter(np.zeros(out_dim, dtype=np.float32))

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def map_embedding(self, x: Tensor) -> Tensor:
        """(d1,) collaborative vector -> (proj_token_num, d2) pseudo-tokens."""
        c = self.config
        if x.shape != (c.d1,):
            raise ValueError(f"mapping expects a ({c.d1},) vector, got {x.shape}")
        row = reshape(x, (1, c.d1))
        proj = matmul(relu(matmul(row, self.w1) + self.b1), self.w2) + self.b2
        return reshape(proj, (c.proj_token_num, c.d2))


# -- prompt template --------------------------------------------------------

HISTORY_TITLE_LIMIT = 10

_OPENING = "#Question: A user has given high ratings to the following items: {titles}. "
_USER_CLAUSE = "Additionally, user preferences are encoded in the feature "
_USER_CLAUSE_END = ". "
_QUESTION = (
    "Using all available information, predict whether the user would enjoy "
    "the item titled {title}"
)
_ITEM_CLAUSE = " with the feature "
_CLOSING = '? Answer with "Yes" or "No". #Answer:'


@dataclass(frozen=True)
class TextSpan:
    text: str
    id_clause: bool = False


@dataclass(frozen=True)
class UserSlot:
    user: int


@dataclass(frozen=True)
class ItemSlot:
    item: int


@dataclass(frozen=True)
class FilledPrompt:
    """Template segments plus the item-id history backing the title list."""

    segments: tuple
    history_items: tuple = ()
    answer_anchor: int = -1

    def render(self, include_ids: bool = True) -> str:
        """Prompt text; slots appear as the literal <user>/<item> markers."""
        parts = []
        for seg in self.segments:
            if isinstance(seg, TextSpan):
                if include_ids or not seg.id_clause:
                    parts.append(seg.text)
            elif isinstance(seg, UserSlot):
                if include_ids:
                    parts.append("<user>")
            elif include_ids:
                parts.append("<item>")
        return "".join(parts)


def build_prompt(
    history_titles: list[str],
    target_title: str,
    user: int,
    item: int,
    history_items: list[int] | tuple = (),
) -> FilledPrompt:
    """Instantiate the template; empty histories render the word "none".

    Title lists keep only the HISTORY_TITLE_LIMIT most recent entries to
    bound the context length.
    """
    if not target_title:
        raise PromptError("target item title must be nonempty")
    titles = list(history_titles)[-HISTORY_TITLE_LIMIT:]
    title_list = ", ".join(titles) if titles else "none"
    segments = (
        TextSpan(_OPENING.format(titles=title_list)),
        TextSpan(_USER_CLAUSE, id_clause=True),
        UserSlot(user),
        TextSpan(_USER_CLAUSE_END, id_clause=True),
        TextSpan(_QUESTION.format(title=target_title)),
        TextSpan(_ITEM_CLAUSE, id_clause=True),
        ItemSlot(item),
        TextSpan(_CLOSING),
    )
    return FilledPrompt(
        segments=segments,
        history_items=tuple(history_items),
        answer_anchor=len(segments) - 1,
    )


# -- encodings ---------------------------------------------------------------

TEXT_PROVENANCE = "text"
USER_PROVENANCE = "user-collab"
ITEM_PROVENANCE = "item-collab"


@dataclass(frozen=True)
class HybridSequence:
    """Embedded prompt: a (L, d2) tensor plus per-position provenance.

    Provenance entries are (kind, token_id_or_None).
    """

    embeddings: Tensor
    provenance: tuple = field(default=())

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def counts(self) -> dict[str, int]:
        out = {TEXT_PROVENANCE: 0, USER_PROVENANCE: 0, ITEM_PROVENANCE: 0}
        for kind, _ in self.provenance:
            out[kind] += 1
        return out


def hybrid_encode(
    prompt: FilledPrompt,
    sasrec: SasrecModel,
    mapping: MappingLayer,
    llm: TinyDecoder,
    vocab: Vocab,
    mode: str = "eval",
    rng: RngStream | None = None,
) -> HybridSequence:
    """Text spans embed through the LM table; slots splice mapped collaborative
    embeddings (user = encoded history, item = table row)."""
    parts: list[Tensor] = []
    provenance: list[tuple] = []
    for seg in prompt.segments:
        if isinstance(seg, TextSpan):
            ids = tokenize(seg.text, vocab)
            if ids:
                parts.append(llm.embed_tokens(ids))
                provenance.extend((TEXT_PROVENANCE, t) for t in ids)
        elif isinstance(seg, UserSlot):
            u = sasrec.encode_user(list(prompt.history_items), mode=mode, rng=rng)
            parts.append(mapping.map_embedding(u))
            provenance.extend((USER_PROVENANCE, None) for _ in range(mapping.config.proj_token_num))
        else:
            i = sasrec.encode_item(seg.item)
            parts.append(mapping.map_embedding(i))
            provenance.extend((ITEM_PROVENANCE, None) for _ in range(mapping.config.proj_token_num))
    embedded = concat(parts, axis=0)
    if embedded.shape[0] > llm.config.context_len:
        raise ContextError(
            f"hybrid sequence length {embedded.shape[0]} exceeds "
            f"context_len {llm.config.context_len}"
        )
    return HybridSequence(embeddings=embedded, provenance=tuple(provenance))


def textual_encode(
    prompt: FilledPrompt,
    llm: TinyDecoder,
    vocab: Vocab,
) -> HybridSequence:
    """Slot-free encoding: the ID clauses and both slots are omitted entirely."""
    parts: list[Tensor] = []
    provenance: list[tuple] = []
    for seg in prompt.segments:
        if isinstance(seg, TextSpan) and not seg.id_clause:
            ids = tokenize(seg.text, vocab)
            if ids:
                parts.append(llm.embed_tokens(ids))
                provenance.extend((TEXT_PROVENANCE, t) for t in ids)
    embedded = concat(parts, axis=0)
    if embedded.shape[0] > llm.config.context_len:
        raise ContextError(
            f"textual sequence length {embedded.shape[0]} exceeds "
            f"context_len {llm.config.context_len}"
        )
    return HybridSequence(embeddings=embedded, provenance=tuple(provenance))
