"""Synthetic ratings with controllable collaborative and textual signal.

Items belong to latent groups and carry a quality word in their title; users
prefer their own group. The like probability is
sigmoid(collab_strength * group_match + text_strength * quality), so the
collaborative part is only recoverable from interaction patterns (group
membership never appears in text) while the textual part is only in the
title. Cold users receive all their events in the final slice of the
timeline, which drops them out of the train split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RatingRecord
from .rng import RngStream

POSITIVE_WORDS = ["amazing", "brilliant", "delightful", "superb", "stirring"]
NEGATIVE_WORDS = ["dreary", "tedious", "clumsy", "hollow", "bland"]
NOUNS = ["saga", "story", "tale", "mystery", "voyage"]

TIME_HORIZON = 1_000_000
COLD_TAIL_START = 0.87  # cold users' events live in the last 13% of time


@dataclass(frozen=True)
class SyntheticConfig:
    num_users: int = 120
    num_items: int = 60
    groups: int = 4
    cold_fraction: float = 0.25
    fresh_item_fraction: float = 0.2  # items that only ever appear in the tail
    fresh_mix: float = 0.5  # tail-period probability of drawing a fresh item
    events_warm: tuple[int, int] = (14, 24)
    events_cold: tuple[int, int] = (2, 5)
    in_group_prob: float = 0.6
    chain_prob: float = 0.7
    collab_strength: float = 2.0
    text_strength: float = 1.6
    base_logit: float = -1.0  # offsets the in-group-match skew toward likes
    seed: int = 0

    def __post_init__(self):
        if self.groups < 1 or self.num_items < self.groups:
            raise ValueError("need at least one item per group")

    def fresh_cutoff(self) -> int:
        """Items above the cutoff are fresh: absent from the early timeline,
        so no split built on it ever trains their embeddings."""
        return self.num_items - int(round(self.num_items * self.fresh_item_fraction))


def item_group(item: int, config: SyntheticConfig) -> int:
    return (item - 1) % config.groups


def item_quality(item: int, config: SyntheticConfig) -> int:
    """Alternating within each group, so quality and group are independent."""
    return ((item - 1) // config.groups) % 2


def item_title(item: int, config: SyntheticConfig) -> str:
    words = POSITIVE_WORDS if item_quality(item, config) else NEGATIVE_WORDS
    word = words[(item - 1) % len(words)]
    noun = NOUNS[((item - 1) // len(words)) % len(NOUNS)]
    return f"{word} {noun} n{item:03d}"


def generate_synthetic(config: SyntheticConfig) -> list[RatingRecord]:
    rng = RngStream(config.seed).spawn("synthetic")
    n_cold = int(round(config.num_users * config.cold_fraction))
    cutoff = config.fresh_cutoff()
    records: list[RatingRecord] = []
    group_items: list[list[int]] = [
        [i for i in range(1, cutoff + 1) if item_group(i, config) == g]
        for g in range(config.groups)
    ]
    fresh_items: list[list[int]] = [
        [i for i in range(cutoff + 1, config.num_items + 1) if item_group(i, config) == g]
        for g in range(config.groups)
    ]
    for user in range(1, config.num_users + 1):
        cold = user > config.num_users - n_cold
        g = int(rng.randint(0, config.groups))
        lo, hi = config.events_cold if cold else config.events_warm
        n_events = int(rng.randint(lo, hi + 1))
        if cold:
            times = COLD_TAIL_START + (1.0 - COLD_TAIL_START) * rng.uniform((n_events,))
        else:
            times = rng.uniform((n_events,)) * COLD_TAIL_START
        times = np.sort(times)
        own = group_items[g]
        prev_idx = int(rng.randint(0, len(own)))
        for ts01 in times:
            in_tail = ts01 >= COLD_TAIL_START
            if in_tail and fresh_items[g] and rng.uniform() < config.fresh_mix:
                if rng.uniform() < config.in_group_prob:
                    item = fresh_items[g][int(rng.randint(0, len(fresh_items[g])))]
                else:
                    item = int(rng.randint(cutoff + 1, config.num_items + 1))
            elif rng.uniform() < config.in_group_prob:
                if rng.uniform() < config.chain_prob:
                    prev_idx = (prev_idx + 1) % len(own)
                else:
                    prev_idx = int(rng.randint(0, len(own)))
                item = own[prev_idx]
            else:
                item = int(rng.randint(1, cutoff + 1))
            match = 1.0 if item_group(item, config) == g else -1.0
            quality = 1.0 if item_quality(item, config) else -1.0
            logit = (config.base_logit
                     + config.collab_strength * match
                     + config.text_strength * quality)
            liked = rng.uniform() < 1.0 / (1.0 + np.exp(-logit))
            rating = int(rng.randint(4, 6)) if liked else int(rng.randint(1, 4))
            # millisecond-ish spacing keeps timestamps unique per user
            ts = int(ts01 * TIME_HORIZON) * config.num_users + user
            records.append(RatingRecord(user, item, rating, ts, item_title(item, config)))
    records.sort(key=lambda r: (r.timestamp, r.user, r.item))
    return records


def corpus_texts(config: SyntheticConfig) -> list[str]:
    """All item titles, for vocabulary building."""
    return [item_title(i, config) for i in range(1, config.num_items + 1)]
