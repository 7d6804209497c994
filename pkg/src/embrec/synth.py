"""Synthetic marketplace corpus and impression datasets.

The generator stands in for proprietary click logs. Every user holds one to
three latent shopping interests; items are listings of products, products
belong to interests, and titles are drawn from interest-specific token pools.
Users browse in sessions ("missions"), recommendation modules are impressed
during sessions, and clicks favour the current mission. The latent truth is
kept on :class:`Corpus` so tests can build oracles against it.
"""

from __future__ import annotations

import bisect
import json
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, DuplicateIdError, EmptyDatasetError, MissingItemError, ParseError

DAY = 86_400
THIRTY_DAYS = 30 * DAY


class EventType(str, Enum):
    ITEM_VIEW = "item_view"
    SEARCH_QUERY = "search_query"

    @property
    def row(self) -> int:
        """Row of the event-type embedding table."""
        return 0 if self is EventType.ITEM_VIEW else 1


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    title: str
    category_id: int
    aspects: tuple[str, ...] = ()

    def __post_init__(self):
        if not isinstance(self.item_id, str) or not self.item_id or "\n" in self.item_id:
            raise ValueError(f"invalid item_id {self.item_id!r}")
        if not isinstance(self.category_id, int) or self.category_id < 0:
            raise ValueError(f"category_id must be a non-negative integer, got {self.category_id!r}")
        if not isinstance(self.title, str):
            raise ValueError("title must be a string")
        object.__setattr__(self, "aspects", tuple(self.aspects))
        if not all(isinstance(a, str) for a in self.aspects):
            raise ValueError("aspects must be strings")


@dataclass(frozen=True)
class UserEvent:
    user_id: str
    timestamp: int
    event_type: EventType
    item_id: str | None = None
    query_text: str | None = None
    query_category_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "event_type", EventType(self.event_type))
        if not isinstance(self.timestamp, int) or self.timestamp < 0:
            raise ValueError(f"timestamp must be a non-negative integer, got {self.timestamp!r}")
        if self.event_type is EventType.ITEM_VIEW:
            if not self.item_id or self.query_text is not None or self.query_category_id is not None:
                raise ValueError("item_view events carry item_id and nothing else")
        else:
            if self.item_id is not None or self.query_text is None:
                raise ValueError("search_query events carry query_text and no item_id")
            if self.query_category_id is not None and (
                not isinstance(self.query_category_id, int) or self.query_category_id < 0
            ):
                raise ValueError("query_category_id must be a non-negative integer")


@dataclass(frozen=True)
class ImpressionRecord:
    user_id: str
    impression_time: int
    positive_item_ids: tuple[str, ...]
    negative_item_ids: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "positive_item_ids", tuple(self.positive_item_ids))
        object.__setattr__(self, "negative_item_ids", tuple(self.negative_item_ids))
        if not self.positive_item_ids:
            raise ValueError("impression needs at least one positive")
        if set(self.positive_item_ids) & set(self.negative_item_ids):
            raise ValueError("positives and negatives overlap")
        if not isinstance(self.impression_time, int) or self.impression_time < 0:
            raise ValueError("impression_time must be a non-negative integer")


@dataclass(frozen=True)
class UserHistory:
    events: tuple[UserEvent, ...]
    reference_time: int

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        ts = [e.timestamp for e in self.events]
        if any(a > b for a, b in zip(ts, ts[1:])):
            raise ValueError("history events must be time-ordered")
        if ts and ts[-1] >= self.reference_time:
            raise ValueError("history events must precede the reference time")

    def __len__(self):
        return len(self.events)


@dataclass
class CorpusConfig:
    n_users: int = 1000
    n_items: int = 5000
    n_categories: int = 40
    n_latent_interests: int = 10
    events_per_user_range: tuple[int, int] = (20, 60)
    impressions_per_user: int = 3
    history_window_seconds: int = THIRTY_DAYS
    rng_seed: int = 0
    span_seconds: int = 60 * DAY
    listings_per_product: int = 20
    impressed_per_module: int = 12
    # probability that a click follows the current session's product
    mission_follow_prob: float = 0.85
    revisit_prob: float = 0.05
    # probability that a session continues the previous session's mission
    journey_continue_prob: float = 0.5
    # probability that a new session switches away from the previous session's interest
    session_switch_prob: float = 0.0
    # variant: every session switches interest and clicks follow the last one
    last_interest_dominant: bool = False

    def validate(self) -> None:
        for name in ("n_users", "n_items", "n_categories", "n_latent_interests",
                     "impressions_per_user", "history_window_seconds", "span_seconds",
                     "listings_per_product", "impressed_per_module"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, f"must be > 0, got {getattr(self, name)}")
        lo, hi = self.events_per_user_range
        if lo <= 0 or hi < lo:
            raise ConfigError("events_per_user_range", f"need 0 < lo <= hi, got {(lo, hi)}")
        for name in ("mission_follow_prob", "revisit_prob", "journey_continue_prob",
                     "session_switch_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(name, "must lie in [0, 1]")
        if self.n_items < self.n_latent_interests:
            raise ConfigError("n_items", "need at least one item per latent interest")


@dataclass(frozen=True)
class DatasetSplit:
    train: list[tuple[UserHistory, ImpressionRecord]]
    validation: list[tuple[UserHistory, ImpressionRecord]]
    test: list[tuple[UserHistory, ImpressionRecord]]


@dataclass
class Corpus:
    items: list[ItemRecord]
    events: list[UserEvent]
    impressions: list[ImpressionRecord]
    # latent truth, for oracles only
    item_interest: dict[str, int] = field(default_factory=dict)
    item_product: dict[str, int] = field(default_factory=dict)
    user_interests: dict[str, dict[int, float]] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# generation

_GENERIC = ("new", "used", "lot", "free", "shipping", "sale", "genuine", "original",
            "vintage", "rare", "set", "pack", "fast", "authentic", "mint", "bundle",
            "great", "condition", "oem", "sealed")
_COLORS = ("Black", "White", "Red", "Blue", "Green", "Silver", "Gold", "Pink", "Grey")
_CONDITIONS = ("New", "Used", "Open box", "Refurbished", "For parts")
_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "cr", "dr", "gl", "pl", "st", "tr", "sk")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou", "ee")


class _Words:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.used: set[str] = set(_GENERIC)

    def word(self, syllables: int = 2) -> str:
        while True:
            w = "".join(
                _ONSETS[self.rng.integers(len(_ONSETS))] + _VOWELS[self.rng.integers(len(_VOWELS))]
                for _ in range(syllables)
            )
            if w not in self.used:
                self.used.add(w)
                return w

    def words(self, n: int, syllables: int = 2) -> list[str]:
        return [self.word(syllables) for _ in range(n)]


def _zipf_weights(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


def _pick(rng: np.random.Generator, seq: Sequence, p=None):
    return seq[int(rng.choice(len(seq), p=p))]


@dataclass
class _Product:
    interest: int
    category: int
    brand: str
    tokens: tuple[str, str]
    listings: list[str] = field(default_factory=list)


def _build_items(cfg: CorpusConfig, rng: np.random.Generator, words: _Words):
    n_int = cfg.n_latent_interests
    interest_tokens = [words.words(15) for _ in range(n_int)]
    interest_brands = [words.words(4, 3) for _ in range(n_int)]
    cats_by_interest = [
        [c for c in range(cfg.n_categories) if c % n_int == i] or [i % cfg.n_categories]
        for i in range(n_int)
    ]
    n_products = max(n_int, round(cfg.n_items / cfg.listings_per_product))
    products = []
    for p in range(n_products):
        i = p % n_int
        products.append(_Product(
            interest=i,
            category=_pick(rng, cats_by_interest[i]),
            brand=_pick(rng, interest_brands[i]),
            tokens=tuple(words.words(2)),
        ))
    token_p = _zipf_weights(15)
    assignment = rng.permutation(np.arange(cfg.n_items) % n_products)
    items = []
    for k in range(cfg.n_items):
        prod = products[int(assignment[k])]
        item_id = f"it{k:06d}"
        parts = [prod.brand.capitalize(), f"{prod.tokens[0].upper()}-{prod.tokens[1]}"]
        parts += [_pick(rng, interest_tokens[prod.interest], token_p) for _ in range(2)]
        if rng.random() < 0.5:
            parts.append(_pick(rng, _GENERIC))
        if rng.random() < 0.3:
            parts.append(f"{int(rng.integers(1, 9)) * 16}GB")
        sep = _pick(rng, (" ", ", ", " - ", " | "))
        title = sep.join(parts[:2]) + " " + " ".join(parts[2:])
        if rng.random() < 0.2:
            title += "!"
        aspects = [f"Brand:{prod.brand.capitalize()}",
                   f"Condition:{_pick(rng, _CONDITIONS)}",
                   f"Color:{_pick(rng, _COLORS)}"]
        if rng.random() < 0.5:
            aspects.append(f"Model:{prod.tokens[0]}")
        items.append(ItemRecord(item_id, title, prod.category, tuple(aspects)))
        prod.listings.append(item_id)
    return items, products, interest_tokens


def generate_corpus_with_truth(cfg: CorpusConfig) -> Corpus:
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    words = _Words(rng)
    items, products, interest_tokens = _build_items(cfg, rng, words)
    products_by_interest = defaultdict(list)
    for idx, prod in enumerate(products):
        if prod.listings:
            products_by_interest[prod.interest].append(idx)
    live_interests = sorted(products_by_interest)

    item_interest = {}
    item_product = {}
    for idx, prod in enumerate(products):
        for iid in prod.listings:
            item_interest[iid] = prod.interest
            item_product[iid] = idx
    all_item_ids = [it.item_id for it in items]

    events: list[UserEvent] = []
    impressions: list[ImpressionRecord] = []
    user_interests: dict[str, dict[int, float]] = {}
    follow_prob = 1.0 if cfg.last_interest_dominant else cfg.mission_follow_prob

    for u in range(cfg.n_users):
        user_id = f"u{u:05d}"
        max_int = min(3, len(live_interests))
        n_u = int(rng.integers(1, max_int + 1))
        interests = [live_interests[j] for j in rng.choice(len(live_interests), size=n_u, replace=False)]
        weights = rng.dirichlet(np.full(n_u, 2.0))
        user_interests[user_id] = {i: float(w) for i, w in zip(interests, weights)}
        favourites = {
            i: [int(p) for p in rng.choice(products_by_interest[i],
                                           size=min(3, len(products_by_interest[i])), replace=False)]
            for i in interests
        }

        # sessions: (mission interest, mission product, event timestamps)
        n_events = int(rng.integers(cfg.events_per_user_range[0], cfg.events_per_user_range[1] + 1))
        sizes = []
        while sum(sizes) < n_events:
            sizes.append(int(rng.integers(4, 13)))
        starts = np.sort(rng.integers(0, cfg.span_seconds - DAY, size=len(sizes)))
        user_events: list[UserEvent] = []
        sessions = []
        prev = None
        for size, start in zip(sizes, starts):
            if cfg.last_interest_dominant and prev is not None and n_u > 1:
                interest = _pick(rng, [i for i in interests if i != prev[0]])
            elif prev is not None and n_u > 1 and rng.random() < cfg.session_switch_prob:
                others = [i for i in interests if i != prev[0]]
                w = np.array([weights[interests.index(i)] for i in others])
                interest = others[int(rng.choice(len(others), p=w / w.sum()))]
            elif prev is not None and rng.random() < cfg.journey_continue_prob:
                interest = prev[0]
            else:
                interest = interests[int(rng.choice(n_u, p=weights))]
            if prev is not None and interest == prev[0] and not cfg.last_interest_dominant:
                product = prev[1]
            elif rng.random() < 0.7:
                product = _pick(rng, favourites[interest])
            else:
                product = _pick(rng, products_by_interest[interest])
            prev = (interest, product)
            t = int(start)
            session = {"interest": interest, "product": product, "views": [], "start": int(start)}
            for _ in range(size):
                t += 30 + int(rng.exponential(120))
                if rng.random() < 0.2:
                    prod = products[product]
                    if rng.random() < 0.6:
                        toks = list(prod.tokens)
                    else:
                        toks = list(rng.choice(interest_tokens[interest], size=2, replace=False))
                    if rng.random() < 0.3:
                        toks.insert(0, prod.brand)
                    ev = UserEvent(user_id, t, EventType.SEARCH_QUERY,
                                   query_text=" ".join(toks).title(),
                                   query_category_id=prod.category if rng.random() < 0.9 else None)
                else:
                    if rng.random() < 0.6:
                        prod = products[product]
                    else:
                        prod = products[_pick(rng, products_by_interest[interest])]
                    ev = UserEvent(user_id, t, EventType.ITEM_VIEW, item_id=_pick(rng, prod.listings))
                    session["views"].append((len(user_events), ev))
                user_events.append(ev)
            sessions.append(session)

        # impressions: a module shown right after a view inside a session
        # only sessions with an earlier session inside the history window, so a
        # skipped-history view of the impression is rarely empty
        eligible = [s for k, s in enumerate(sessions)
                    if len(s["views"]) >= 2 and k > 0
                    and s["start"] - sessions[k - 1]["start"] < cfg.history_window_seconds - DAY]
        n_imp = min(cfg.impressions_per_user, len(eligible))
        chosen = sorted(rng.choice(len(eligible), size=n_imp, replace=False)) if n_imp else []
        extra_views = []
        for si in chosen:
            session = eligible[int(si)]
            views = session["views"]
            seed_pos = int(rng.integers(1, len(views)))
            _, seed_ev = views[seed_pos]
            imp_time = seed_ev.timestamp + 1 + int(rng.integers(0, 10))
            seed_prod = products[item_product[seed_ev.item_id]]
            impressed = _impressed_items(rng, cfg, seed_ev.item_id, seed_prod,
                                         products, products_by_interest, all_item_ids)
            if rng.random() < follow_prob:
                target = session["product"]
            else:
                target_interest = interests[int(rng.choice(n_u, p=weights))]
                target = _pick(rng, favourites[target_interest])
            positive = None
            earlier = [ev.item_id for _, ev in views[:seed_pos] if ev.item_id != seed_ev.item_id]
            if earlier and rng.random() < cfg.revisit_prob:
                positive = _pick(rng, earlier)
            else:
                options = [i for i in products[target].listings if i != seed_ev.item_id]
                in_module = [i for i in options if i in impressed]
                if in_module:
                    positive = _pick(rng, in_module)
                elif options:
                    positive = _pick(rng, options)
            if positive is None:
                continue
            if positive not in impressed:
                impressed[int(rng.integers(len(impressed)))] = positive
            positives = [positive]
            same = [i for i in impressed if i != positive and item_product[i] == item_product[positive]]
            if same and rng.random() < 0.1:
                positives.append(_pick(rng, same))
            negatives = [i for i in impressed if i not in positives]
            impressions.append(ImpressionRecord(user_id, imp_time, tuple(positives), tuple(negatives)))
            extra_views.append(UserEvent(user_id, imp_time + 2, EventType.ITEM_VIEW, item_id=positive))

        user_events.extend(extra_views)
        user_events.sort(key=lambda e: e.timestamp)
        events.extend(user_events)

    return Corpus(items, events, impressions, item_interest, item_product, user_interests)


def _impressed_items(rng, cfg, seed_item, seed_prod, products, products_by_interest, all_item_ids):
    """Listing-page module around the seed item: mostly look-alikes."""
    n = cfg.impressed_per_module
    chosen: list[str] = []

    def add(candidates, k):
        pool = [c for c in candidates if c != seed_item and c not in chosen]
        if pool and k > 0:
            take = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
            chosen.extend(pool[int(j)] for j in take)

    add(seed_prod.listings, n // 3)
    same_interest = [i for p in products_by_interest[seed_prod.interest]
                     for i in products[p].listings if products[p] is not seed_prod]
    add(same_interest, n - n // 4 - len(chosen))
    while len(chosen) < n:
        cand = all_item_ids[int(rng.integers(len(all_item_ids)))]
        if cand != seed_item and cand not in chosen:
            chosen.append(cand)
        elif len(all_item_ids) <= n + 1:
            break
    return chosen


def generate_corpus(cfg: CorpusConfig):
    c = generate_corpus_with_truth(cfg)
    return c.items, c.events, c.impressions


# ---------------------------------------------------------------------------
# dataset construction

def split_boundaries(cfg: CorpusConfig, fractions=(0.7, 0.85)) -> tuple[int, int]:
    return int(cfg.span_seconds * fractions[0]), int(cfg.span_seconds * fractions[1])


def events_by_user(events: Iterable[UserEvent]) -> dict[str, list[UserEvent]]:
    out: dict[str, list[UserEvent]] = defaultdict(list)
    for ev in events:
        out[ev.user_id].append(ev)
    for evs in out.values():
        evs.sort(key=lambda e: e.timestamp)
    return out


def history_before(user_events: list[UserEvent], times: list[int], reference_time: int,
                   window: int) -> UserHistory:
    """Events inside ``[reference_time - window, reference_time)``."""
    lo = bisect.bisect_left(times, reference_time - window)
    hi = bisect.bisect_left(times, reference_time)
    return UserHistory(tuple(user_events[lo:hi]), reference_time)


def build_dataset(items, events, impressions, cfg: CorpusConfig,
                  boundaries: tuple[int, int] | None = None) -> DatasetSplit:
    """Time-split impressions, keep the earliest impression per user per split,
    and attach each user's history window."""
    if not impressions:
        raise EmptyDatasetError("no impressions to build a dataset from")
    t_val, t_test = boundaries if boundaries is not None else split_boundaries(cfg)
    known = {it.item_id for it in items}
    by_user = events_by_user(events)
    times = {u: [e.timestamp for e in evs] for u, evs in by_user.items()}

    splits: list[dict[str, ImpressionRecord]] = [{}, {}, {}]
    for imp in impressions:
        for iid in (*imp.positive_item_ids, *imp.negative_item_ids):
            if iid not in known:
                raise MissingItemError(iid)
        t = imp.impression_time
        part = splits[0] if t < t_val else splits[1] if t < t_test else splits[2]
        kept = part.get(imp.user_id)
        if kept is None or t < kept.impression_time:
            part[imp.user_id] = imp

    def attach(part):
        rows = []
        for user_id in sorted(part, key=lambda u: (part[u].impression_time, u)):
            imp = part[user_id]
            hist = history_before(by_user.get(user_id, []), times.get(user_id, []),
                                  imp.impression_time, cfg.history_window_seconds)
            rows.append((hist, imp))
        return rows

    return DatasetSplit(attach(splits[0]), attach(splits[1]), attach(splits[2]))


# ---------------------------------------------------------------------------
# JSON-lines IO

def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def item_to_json(it: ItemRecord) -> dict:
    return {"item_id": it.item_id, "title": it.title, "category_id": it.category_id,
            "aspects": list(it.aspects)}


def event_to_json(ev: UserEvent) -> dict:
    out = {"user_id": ev.user_id, "timestamp": ev.timestamp, "event_type": ev.event_type.value}
    if ev.item_id is not None:
        out["item_id"] = ev.item_id
    if ev.query_text is not None:
        out["query_text"] = ev.query_text
    if ev.query_category_id is not None:
        out["query_category_id"] = ev.query_category_id
    return out


def impression_to_json(imp: ImpressionRecord) -> dict:
    return {"user_id": imp.user_id, "impression_time": imp.impression_time,
            "positive_item_ids": list(imp.positive_item_ids),
            "negative_item_ids": list(imp.negative_item_ids)}


def _write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(_dumps(row))
            fh.write("\n")


def save_items(items, path):
    _write_jsonl(path, (item_to_json(i) for i in items))


def save_events(events, path):
    _write_jsonl(path, (event_to_json(e) for e in events))


def save_impressions(impressions, path):
    _write_jsonl(path, (impression_to_json(i) for i in impressions))


def _read_jsonl(path):
    try:
        fh = open(path, encoding="utf-8")  # universal newlines: CRLF == LF
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    with fh:
        line_no = 0
        try:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(path, line_no, f"invalid JSON ({exc.msg})") from None
                if not isinstance(obj, dict):
                    raise ParseError(path, line_no, "expected a JSON object")
                yield line_no, obj
        except UnicodeDecodeError:
            raise ParseError(path, line_no + 1, "not valid UTF-8") from None


def _require(obj, key, kind, path, line_no):
    if key not in obj:
        raise ParseError(path, line_no, f"missing field {key!r}")
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ParseError(path, line_no, f"field {key!r} must be an integer")
    if kind is not int and not isinstance(value, kind):
        raise ParseError(path, line_no, f"field {key!r} has the wrong type")
    return value


def load_items(path) -> list[ItemRecord]:
    items, seen = [], set()
    for line_no, obj in _read_jsonl(path):
        try:
            rec = ItemRecord(
                _require(obj, "item_id", str, path, line_no),
                _require(obj, "title", str, path, line_no),
                _require(obj, "category_id", int, path, line_no),
                tuple(_require(obj, "aspects", list, path, line_no)),
            )
        except ValueError as exc:
            raise ParseError(path, line_no, str(exc)) from None
        if rec.item_id in seen:
            raise DuplicateIdError(rec.item_id)
        seen.add(rec.item_id)
        items.append(rec)
    return items


def load_events(path) -> list[UserEvent]:
    events = []
    for line_no, obj in _read_jsonl(path):
        kind = _require(obj, "event_type", str, path, line_no)
        try:
            events.append(UserEvent(
                _require(obj, "user_id", str, path, line_no),
                _require(obj, "timestamp", int, path, line_no),
                EventType(kind),
                obj.get("item_id"),
                obj.get("query_text"),
                obj.get("query_category_id"),
            ))
        except ValueError as exc:
            raise ParseError(path, line_no, str(exc)) from None
    return events


def load_impressions(path) -> list[ImpressionRecord]:
    out = []
    for line_no, obj in _read_jsonl(path):
        try:
            out.append(ImpressionRecord(
                _require(obj, "user_id", str, path, line_no),
                _require(obj, "impression_time", int, path, line_no),
                tuple(_require(obj, "positive_item_ids", list, path, line_no)),
                tuple(_require(obj, "negative_item_ids", list, path, line_no)),
            ))
        except ValueError as exc:
            raise ParseError(path, line_no, str(exc)) from None
    return out
