"""Dataset ingestion, labeling, chronological splitting, warm/cold carving.

Ratings join with item titles, binarize at the like threshold (rating >= 4),
and split globally by timestamp into 8:1:1 train/validation/test so nothing
in a later split predates anything in an earlier one. Each example carries
its user's liked-item history strictly before its own timestamp, which is
what both the prompt title list and the sequential encoder consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .sasrec import InteractionSequence, standardize_sequence

LIKE_THRESHOLD = 4
AMAZON_MAX_ID = 4000
WARM_MIN_TRAIN_INTERACTIONS = 3  # strictly more than this is warm


class DataError(ValueError):
    pass


class SplitError(DataError):
    pass


@dataclass(frozen=True)
class RatingRecord:
    user: int
    item: int
    rating: int
    timestamp: int
    title: str


@dataclass(frozen=True)
class LabeledExample:
    user: int
    item: int
    label: int
    timestamp: int
    title: str
    history: tuple = ()  # ((item, title), ...) liked, strictly earlier

    def history_items(self) -> list[int]:
        return [i for i, _ in self.history]

    def history_titles(self) -> list[str]:
        return [t for _, t in self.history]


@dataclass
class ParseStats:
    read: int = 0
    kept: int = 0
    rejected: int = 0

    def check_quality(self, source: str) -> None:
        if self.read and self.rejected / self.read > 0.01:
            raise DataError(
                f"{source}: {self.rejected}/{self.read} lines rejected (>1%)"
            )


def _clean_title(raw: str) -> str:
    return " ".join(raw.replace("\t", " ").split())


def parse_movielens(ratings_path: str | Path, movies_path: str | Path) -> tuple[list[RatingRecord], ParseStats]:
    """`UserID::MovieID::Rating::Timestamp` + `MovieID::Title::Genres` join.

    The movies file is Latin-1, ratings ASCII. Out-of-range ratings,
    malformed lines, and ratings without a matching movie are rejected and
    counted; more than 1% rejects aborts.
    """
    ratings_path, movies_path = Path(ratings_path), Path(movies_path)
    for p in (ratings_path, movies_path):
        if not p.exists():
            raise DataError(f"missing input file: {p}")
    titles: dict[int, str] = {}
    for line in movies_path.read_text(encoding="latin-1").splitlines():
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 3:
            continue
        try:
            titles[int(parts[0])] = _clean_title(parts[1])
        except ValueError:
            continue
    stats = ParseStats()
    records = []
    for line in ratings_path.read_text(encoding="ascii").splitlines():
        if not line.strip():
            continue
        stats.read += 1
        parts = line.split("::")
        try:
            user, item, rating, ts = int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])
        except (ValueError, IndexError):
            stats.rejected += 1
            continue
        if not (1 <= rating <= 5) or ts < 0 or len(parts) != 4:
            stats.rejected += 1
            continue
        title = titles.get(item, "")
        if not title:
            stats.rejected += 1
            continue
        records.append(RatingRecord(user, item, rating, ts, title))
        stats.kept += 1
    stats.check_quality(str(ratings_path))
    return records, stats


AMAZON_COLUMN_ALIASES = {
    "user": ("user_id", "user", "reviewerid"),
    "item": ("item_id", "id", "book_id", "asin"),
    "rating": ("rating", "review/score", "score", "overall"),
    "timestamp": ("timestamp", "review/time", "time", "unixreviewtime"),
    "title": ("title", "book_title"),
}


def parse_amazon_books(csv_path: str | Path) -> tuple[list[RatingRecord], ParseStats]:
    """RFC-4180 CSV with user/item/rating/time/title columns.

    String user and item IDs map to dense 1-based integers in first-seen
    order (the reduction step cuts on those dense IDs).
    """
    import csv

    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise DataError(f"missing input file: {csv_path}")
    with csv_path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: empty file") from None
        lower = [h.strip().lower() for h in header]
        cols: dict[str, int] = {}
        for logical, aliases in AMAZON_COLUMN_ALIASES.items():
            for alias in aliases:
                if alias in lower:
                    cols[logical] = lower.index(alias)
                    break
            else:
                raise DataError(f"{csv_path}: no column for {logical!r} in header {header}")
        users: dict[str, int] = {}
        items: dict[str, int] = {}
        stats = ParseStats()
        records = []
        for row in reader:
            stats.read += 1
            try:
                raw_user = row[cols["user"]].strip()
                raw_item = row[cols["item"]].strip()
                rating = int(float(row[cols["rating"]]))
                ts = int(float(row[cols["timestamp"]]))
                title = _clean_title(row[cols["title"]])
            except (ValueError, IndexError):
                stats.rejected += 1
                continue
            if not raw_user or not raw_item or not title or not (1 <= rating <= 5) or ts < 0:
                stats.rejected += 1
                continue
            user = users.setdefault(raw_user, len(users) + 1)
            item = items.setdefault(raw_item, len(items) + 1)
            records.append(RatingRecord(user, item, rating, ts, title))
            stats.kept += 1
    stats.check_quality(str(csv_path))
    return records, stats


def reduce_amazon(records: list[RatingRecord]) -> list[RatingRecord]:
    """Keep user and item IDs <= 4000 (IDs greater than 4000 are cut)."""
    kept = [r for r in records if r.user <= AMAZON_MAX_ID and r.item <= AMAZON_MAX_ID]
    if records and not kept:
        import warnings

        warnings.warn("reduce_amazon removed every record", stacklevel=2)
    return kept


def binarize(records: list[RatingRecord]) -> list[LabeledExample]:
    """Label = rating >= 4; history = liked items strictly earlier in time."""
    per_user: dict[int, list[RatingRecord]] = {}
    for r in records:
        per_user.setdefault(r.user, []).append(r)
    examples = []
    for user in sorted(per_user):
        recs = sorted(per_user[user], key=lambda r: (r.timestamp, r.item))
        committed: list[tuple[int, str]] = []
        pending: list[tuple[int, str]] = []
        cur_ts: int | None = None
        for r in recs:
            if r.timestamp != cur_ts:
                committed.extend(pending)
                pending = []
                cur_ts = r.timestamp
            examples.append(
                LabeledExample(
                    user=r.user,
                    item=r.item,
                    label=1 if r.rating >= LIKE_THRESHOLD else 0,
                    timestamp=r.timestamp,
                    title=r.title,
                    history=tuple(committed),
                )
            )
            if r.rating >= LIKE_THRESHOLD:
                pending.append((r.item, r.title))
    examples.sort(key=lambda e: (e.timestamp, e.user, e.item))
    return examples


@dataclass
class SplitBundle:
    train: list[LabeledExample] = field(default_factory=list)
    validation: list[LabeledExample] = field(default_factory=list)
    test: list[LabeledExample] = field(default_factory=list)
    warm_test: list[LabeledExample] = field(default_factory=list)
    cold_test: list[LabeledExample] = field(default_factory=list)

    @property
    def num_users(self) -> int:
        return max((e.user for e in self.all_examples()), default=0)

    @property
    def num_items(self) -> int:
        return max(
            max((e.item for e in self.all_examples()), default=0),
            max((i for e in self.all_examples() for i, _ in e.history), default=0),
        )

    def all_examples(self):
        for split in (self.train, self.validation, self.test):
            yield from split

    def split(self, name: str) -> list[LabeledExample]:
        table = {
            "train": self.train,
            "validation": self.validation,
            "test": self.test,
            "warm_test": self.warm_test,
            "cold_test": self.cold_test,
        }
        if name not in table:
            raise DataError(f"unknown split {name!r}")
        return table[name]

    def stats(self) -> dict:
        def side(name, split):
            pos = sum(e.label for e in split)
            return {
                f"{name}_examples": len(split),
                f"{name}_positives": pos,
                f"{name}_users": len({e.user for e in split}),
            }

        out = {
            "num_users": self.num_users,
            "num_items": self.num_items,
        }
        for name in ("train", "validation", "test", "warm_test", "cold_test"):
            out.update(side(name, self.split(name)))
        return out

    # -- serialization (newline-delimited, tab-separated, UTF-8) ----------

    def save(self, path: str | Path) -> None:
        lines = []
        titles: dict[int, str] = {}
        for e in self.all_examples():
            titles.setdefault(e.item, e.title)
            for i, t in e.history:
                titles.setdefault(i, t)
        for item in sorted(titles):
            lines.append(f"I\t{item}\t{titles[item]}")
        warm_keys = {(e.user, e.item, e.timestamp) for e in self.warm_test}
        for split_name in ("train", "validation", "test"):
            for e in self.split(split_name):
                if split_name == "test":
                    zone = "warm" if (e.user, e.item, e.timestamp) in warm_keys else "cold"
                else:
                    zone = "-"
                hist = ",".join(str(i) for i, _ in e.history)
                lines.append(
                    f"E\t{split_name}\t{zone}\t{e.user}\t{e.item}\t{e.label}"
                    f"\t{e.timestamp}\t{hist}"
                )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SplitBundle":
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing bundle file: {path}")
        titles: dict[int, str] = {}
        bundle = cls()
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if parts[0] == "I":
                titles[int(parts[1])] = parts[2]
            elif parts[0] == "E":
                _, split_name, zone, user, item, label, ts, hist = parts
                history = tuple(
                    (int(h), titles.get(int(h), "")) for h in hist.split(",") if h
                )
                e = LabeledExample(
                    user=int(user), item=int(item), label=int(label),
                    timestamp=int(ts), title=titles.get(int(item), ""),
                    history=history,
                )
                bundle.split(split_name).append(e)
                if split_name == "test":
                    (bundle.warm_test if zone == "warm" else bundle.cold_test).append(e)
            else:
                raise DataError(f"{path}:{lineno}: unknown record kind {parts[0]!r}")
        return bundle


def split_8_1_1(examples: list[LabeledExample]) -> SplitBundle:
    """Global chronological 8:1:1 cut (ties broken by user then item)."""
    if len(examples) < 10:
        raise SplitError(f"need at least 10 examples to split, got {len(examples)}")
    ordered = sorted(examples, key=lambda e: (e.timestamp, e.user, e.item))
    n = len(ordered)
    n_train = math.floor(0.8 * n)
    n_val = math.floor(0.1 * n)
    return SplitBundle(
        train=ordered[:n_train],
        validation=ordered[n_train : n_train + n_val],
        test=ordered[n_train + n_val :],
    )


def build_warm_cold(bundle: SplitBundle) -> SplitBundle:
    """Warm test examples belong to users with > 3 train interactions."""
    counts: dict[int, int] = {}
    for e in bundle.train:
        counts[e.user] = counts.get(e.user, 0) + 1
    bundle.warm_test = [
        e for e in bundle.test if counts.get(e.user, 0) > WARM_MIN_TRAIN_INTERACTIONS
    ]
    bundle.cold_test = [
        e for e in bundle.test if counts.get(e.user, 0) <= WARM_MIN_TRAIN_INTERACTIONS
    ]
    return bundle


def build_sequences(train: list[LabeledExample], n: int) -> list[InteractionSequence]:
    """Per-user chronological liked-item sequences from the train split only."""
    liked: dict[int, list[tuple[int, int, int]]] = {}
    for e in train:
        if e.label == 1:
            liked.setdefault(e.user, []).append((e.timestamp, e.item, e.user))
    sequences = []
    for user in sorted(liked):
        events = [item for _, item, _ in sorted(liked[user])]
        if len(events) >= 2:
            sequences.append(standardize_sequence(events, n, user=user))
    return sequences


def train_histories(train: list[LabeledExample]) -> dict[int, list[int]]:
    """Full liked-item history per user, for inference-time encoding."""
    liked: dict[int, list[tuple[int, int]]] = {}
    for e in train:
        if e.label == 1:
            liked.setdefault(e.user, []).append((e.timestamp, e.item))
    return {u: [item for _, item in sorted(evs)] for u, evs in liked.items()}
