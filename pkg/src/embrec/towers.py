"""Item and user towers.

Items are encoded purely from content (title, aspects, category); the
encoder never sees an item id. Users are encoded from their event history,
either as a bag of events fed through an MLP or by averaging GRU outputs.
Search queries enter the user tower as pseudo-items.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import nn
from .errors import (CompatibilityError, ContractError, EmptyHistoryError, FormatError,
                     IntegrityError, MissingItemError)
from .synth import EventType, ItemRecord, UserEvent, UserHistory
from .text import Vocabulary, aspect_tokens, encode, tokenize

MAX_HISTORY = 200
CBOE = "cboe"
RECURRENT = "recurrent"
USER_TOWERS = (CBOE, RECURRENT)


@dataclass(frozen=True)
class ItemFeatures:
    title_ids: tuple[int, ...]
    aspect_ids: tuple[int, ...]
    category_id: int

    def __post_init__(self):
        object.__setattr__(self, "title_ids", tuple(int(i) for i in self.title_ids))
        object.__setattr__(self, "aspect_ids", tuple(int(i) for i in self.aspect_ids))


@dataclass(frozen=True)
class EncodedEvent:
    vector: np.ndarray
    timestamp: int


@dataclass
class Featurizer:
    """Raw records to token ids. Category rows are ``0..n_categories-1`` plus UNKNOWN."""

    title_vocab: Vocabulary
    aspect_vocab: Vocabulary
    n_categories: int

    @property
    def unknown_category(self) -> int:
        return self.n_categories

    @property
    def category_rows(self) -> int:
        return self.n_categories + 1

    def category(self, category_id: int | None) -> int:
        if category_id is None or not 0 <= category_id < self.n_categories:
            return self.unknown_category
        return category_id

    def item_features(self, item: ItemRecord) -> ItemFeatures:
        return ItemFeatures(
            tuple(encode(self.title_vocab, tokenize(item.title))),
            tuple(encode(self.aspect_vocab, aspect_tokens(item.aspects))),
            self.category(item.category_id),
        )

    def pseudo_item_from_query(self, event: UserEvent) -> ItemFeatures:
        """Query text stands in for the title, aspects stay empty."""
        if event.event_type is not EventType.SEARCH_QUERY:
            raise ContractError("pseudo_item_from_query needs a search_query event")
        return ItemFeatures(
            tuple(encode(self.title_vocab, tokenize(event.query_text or ""))),
            (),
            self.category(event.query_category_id),
        )

    def check_params(self, params: nn.ModelParams) -> None:
        expected = (len(self.title_vocab), len(self.aspect_vocab), self.category_rows)
        if params.vocab_sizes != expected:
            raise CompatibilityError(
                f"checkpoint tables {params.vocab_sizes} do not match vocabularies {expected}")


def pseudo_item_from_query(event: UserEvent, featurizer: Featurizer) -> ItemFeatures:
    return featurizer.pseudo_item_from_query(event)


class FeatureBank:
    """Deduplicated feature rows with cached sparse CBOW matrices.

    Feature-identical items share one row, so row equality is feature identity.
    """

    def __init__(self, featurizer: Featurizer, dtype=np.float32):
        self.featurizer = featurizer
        self.dtype = np.dtype(dtype)
        self.rows: list[ItemFeatures] = []
        self._row_of: dict[ItemFeatures, int] = {}
        self.item_row: dict[str, int] = {}
        self._mats = None

    def __len__(self):
        return len(self.rows)

    def add(self, feats: ItemFeatures) -> int:
        row = self._row_of.get(feats)
        if row is None:
            row = len(self.rows)
            self.rows.append(feats)
            self._row_of[feats] = row
            self._mats = None
        return row

    def add_items(self, items: Iterable[ItemRecord]) -> None:
        for it in items:
            self.item_row[it.item_id] = self.add(self.featurizer.item_features(it))

    def row_for_event(self, event: UserEvent) -> int:
        if event.event_type is EventType.ITEM_VIEW:
            row = self.item_row.get(event.item_id)
            if row is None:
                raise MissingItemError(event.item_id)
            return row
        return self.add(self.featurizer.pseudo_item_from_query(event))

    def matrices(self):
        if self._mats is None:
            tv, av = len(self.featurizer.title_vocab), len(self.featurizer.aspect_vocab)
            self._mats = (
                nn.cbow_matrix([f.title_ids for f in self.rows], tv, self.dtype),
                nn.cbow_matrix([f.aspect_ids for f in self.rows], av, self.dtype),
                np.array([f.category_id for f in self.rows], dtype=np.int64),
            )
        return self._mats

    def inputs(self, rows):
        title, aspect, cats = self.matrices()
        rows = np.asarray(rows, dtype=np.int64)
        return title[rows], aspect[rows], cats[rows]


# ---------------------------------------------------------------------------
# batched forward / backward

def item_forward(params: nn.ModelParams, title_m, aspect_m, cats):
    """Item embeddings for a batch of CBOW matrices. Returns (V, cache)."""
    z = np.concatenate([
        np.asarray(title_m @ params["title_table"]),
        np.asarray(aspect_m @ params["aspect_table"]),
        params["category_table"][cats],
    ], axis=1)
    y, acts = nn.mlp_forward(params.layers("item_mlp"), z)
    v, norms = nn.l2_normalize_rows(y)
    return v, (title_m, aspect_m, cats, acts, v, norms)


def item_backward(params: nn.ModelParams, cache, dV, grads) -> None:
    title_m, aspect_m, cats, acts, v, norms = cache
    dy = nn.l2_normalize_backward(v, norms, dV)
    names = nn.mlp_names("item_mlp", params.hyper.L + 1)
    dz = nn.mlp_backward(params.layers("item_mlp"), acts, dy, grads, names)
    dt = params.hyper.D_text
    grads["title_table"] += np.asarray(title_m.T @ dz[:, :dt])
    grads["aspect_table"] += np.asarray(aspect_m.T @ dz[:, dt:2 * dt])
    np.add.at(grads["category_table"], cats, dz[:, 2 * dt:])


@dataclass
class HistoryBatch:
    """Left-padded event slots: ``idx`` points into a batch of item rows."""

    idx: np.ndarray     # (B, T) int
    types: np.ndarray   # (B, T) int
    mask: np.ndarray    # (B, T) bool
    lengths: np.ndarray  # (B,)

    @classmethod
    def from_lists(cls, idx_lists: Sequence[Sequence[int]], type_lists: Sequence[Sequence[int]]):
        B = len(idx_lists)
        T = max((len(x) for x in idx_lists), default=0) or 1
        idx = np.zeros((B, T), dtype=np.int64)
        types = np.zeros((B, T), dtype=np.int64)
        mask = np.zeros((B, T), dtype=bool)
        for b, (ix, ty) in enumerate(zip(idx_lists, type_lists)):
            n = len(ix)
            if n:
                idx[b, T - n:] = ix
                types[b, T - n:] = ty
                mask[b, T - n:] = True
        return cls(idx, types, mask, mask.sum(axis=1))


def event_inputs(params: nn.ModelParams, V: np.ndarray, hb: HistoryBatch) -> np.ndarray:
    """``E(z) = concat(v_z, e_z)`` per slot, zero at padding."""
    X = np.concatenate([V[hb.idx], params["event_type_table"][hb.types]], axis=-1)
    return X * hb.mask[..., None].astype(X.dtype)


def event_inputs_backward(params, hb: HistoryBatch, dX, dV, grads) -> None:
    D = params.hyper.D
    m = hb.mask
    np.add.at(dV, hb.idx[m], dX[m][:, :D])
    np.add.at(grads["event_type_table"], hb.types[m], dX[m][:, D:])


def user_forward(params: nn.ModelParams, kind: str, X: np.ndarray, hb: HistoryBatch):
    if np.any(hb.lengths == 0):
        raise EmptyHistoryError("cannot embed a user with an empty history")
    n = hb.lengths[:, None].astype(X.dtype)
    if kind == CBOE:
        mean = X.sum(axis=1) / n
        y, acts = nn.mlp_forward(params.layers("user_mlp"), mean)
        u, norms = nn.l2_normalize_rows(y)
        return u, (kind, acts, u, norms)
    if kind == RECURRENT:
        gru = params.gru()
        B, T, _ = X.shape
        h = np.zeros((B, params.hyper.D), dtype=X.dtype)
        total = np.zeros_like(h)
        caches = []
        for t in range(T):
            h, c = nn.gru_step(gru, X[:, t], h, return_cache=True)
            caches.append(c)
            total += h  # padded slots keep h exactly 0
        u, norms = nn.l2_normalize_rows(total / n)
        return u, (kind, caches, u, norms)
    raise ValueError(f"unknown user tower {kind!r}")


def user_backward(params: nn.ModelParams, cache, dU, hb: HistoryBatch, grads) -> np.ndarray:
    kind = cache[0]
    n = hb.lengths[:, None].astype(dU.dtype)
    if kind == CBOE:
        _, acts, u, norms = cache
        dy = nn.l2_normalize_backward(u, norms, dU)
        names = nn.mlp_names("user_mlp", params.hyper.L + 1)
        dmean = nn.mlp_backward(params.layers("user_mlp"), acts, dy, grads, names)
        return (dmean / n)[:, None, :] * hb.mask[..., None].astype(dU.dtype)
    _, caches, u, norms = cache
    gru = params.gru()
    dmean = nn.l2_normalize_backward(u, norms, dU) / n
    T = len(caches)
    dX = np.zeros((dU.shape[0], T, caches[0][0].shape[-1]), dtype=dU.dtype)
    dh = np.zeros_like(dmean)
    for t in range(T - 1, -1, -1):
        dh = dh + dmean * hb.mask[:, t:t + 1]
        dX[:, t], dh = nn.gru_step_backward(gru, caches[t], dh, grads)
    return dX * hb.mask[..., None].astype(dU.dtype)


# ---------------------------------------------------------------------------
# model facade

class TwoTower:
    """Frozen-parameter encoders for items and users."""

    def __init__(self, params: nn.ModelParams, featurizer: Featurizer, user_tower: str = RECURRENT):
        if user_tower not in USER_TOWERS:
            raise ValueError(f"user_tower must be one of {USER_TOWERS}")
        featurizer.check_params(params)
        self.params = params
        self.featurizer = featurizer
        self.user_tower = user_tower

    @property
    def dim(self) -> int:
        return self.params.hyper.D

    def new_bank(self) -> FeatureBank:
        return FeatureBank(self.featurizer, self.params.hyper.dtype)

    def encode_items_features(self, feats: Sequence[ItemFeatures]) -> np.ndarray:
        bank = self.new_bank()
        rows = [bank.add(f) for f in feats]
        return self._encode_rows(bank, np.arange(len(bank)))[rows]

    def encode_item(self, feats: ItemFeatures) -> np.ndarray:
        return self.encode_items_features([feats])[0]

    def encode_items(self, items: Sequence[ItemRecord], chunk: int = 4096) -> np.ndarray:
        bank = self.new_bank()
        bank.add_items(items)
        V = self._encode_rows(bank, np.arange(len(bank)), chunk)
        return V[[bank.item_row[it.item_id] for it in items]]

    def _encode_rows(self, bank: FeatureBank, rows, chunk: int = 4096) -> np.ndarray:
        out = np.empty((len(rows), self.dim), dtype=self.params.hyper.dtype)
        for s in range(0, len(rows), chunk):
            V, _ = item_forward(self.params, *bank.inputs(rows[s:s + chunk]))
            out[s:s + chunk] = V
        return out

    def encode_event(self, event: UserEvent, items_by_id: Mapping[str, ItemRecord]) -> EncodedEvent:
        if event.event_type is EventType.ITEM_VIEW:
            item = items_by_id.get(event.item_id)
            if item is None:
                raise MissingItemError(event.item_id)
            feats = self.featurizer.item_features(item)
        else:
            feats = self.featurizer.pseudo_item_from_query(event)
        v = self.encode_item(feats)
        e = self.params["event_type_table"][event.event_type.row]
        return EncodedEvent(np.concatenate([v, e]), event.timestamp)

    def encode_user(self, history: UserHistory, items_by_id: Mapping[str, ItemRecord],
                    kind: str | None = None) -> np.ndarray:
        embs, ok = self.encode_users([history], items_by_id, kind=kind, skip_missing=False)
        if not ok[0]:
            raise EmptyHistoryError("user history is empty")
        return embs[0]

    def encode_user_cboe(self, history, items_by_id):
        return self.encode_user(history, items_by_id, kind=CBOE)

    def encode_user_recurrent(self, history, items_by_id):
        return self.encode_user(history, items_by_id, kind=RECURRENT)

    def encode_users(self, histories: Sequence[UserHistory], items_by_id: Mapping[str, ItemRecord],
                     kind: str | None = None, skip_missing: bool = True, chunk: int = 256):
        """Embed many users. Returns (embeddings, ok); rows with ``ok`` False had no usable events."""
        kind = kind or self.user_tower
        bank = self.new_bank()
        bank.add_items(items_by_id.values())
        slots = [history_slots(bank, h.events, skip_missing) for h in histories]
        out = np.zeros((len(histories), self.dim), dtype=self.params.hyper.dtype)
        ok = np.array([len(rows) > 0 for rows, _ in slots], dtype=bool)
        todo = np.flatnonzero(ok)
        for s in range(0, len(todo), chunk):
            part = todo[s:s + chunk]
            out[part] = self._encode_slots(bank, [slots[i] for i in part], kind)
        return out, ok

    def _encode_slots(self, bank, slots, kind):
        all_rows = np.concatenate([np.asarray(r, dtype=np.int64) for r, _ in slots])
        uniq, inv = np.unique(all_rows, return_inverse=True)
        V = self._encode_rows(bank, uniq)
        idx_lists, pos = [], 0
        for rows, _ in slots:
            idx_lists.append(inv[pos:pos + len(rows)])
            pos += len(rows)
        hb = HistoryBatch.from_lists(idx_lists, [t for _, t in slots])
        U, _ = user_forward(self.params, kind, event_inputs(self.params, V, hb), hb)
        return U


def history_slots(bank: FeatureBank, events: Sequence[UserEvent], skip_missing: bool = True,
                  limit: int = MAX_HISTORY):
    """Bank rows and event-type rows for the most recent ``limit`` resolvable events."""
    rows, types = [], []
    for ev in events:
        try:
            rows.append(bank.row_for_event(ev))
        except MissingItemError:
            if not skip_missing:
                raise
            continue
        types.append(ev.event_type.row)
    return rows[-limit:], types[-limit:]


# ---------------------------------------------------------------------------
# embedding files

EMB_MAGIC = b"EEMB1\n"


def save_embeddings(path, ids: Sequence[str], embs: np.ndarray) -> None:
    """``EEMB1`` magic, ``id\\tdim=D`` and ``count=N`` lines, then id line + raw float32 LE per record."""
    embs = np.ascontiguousarray(embs, dtype="<f4")
    if embs.ndim != 2 or embs.shape[0] != len(ids):
        raise ValueError("need one embedding row per id")
    out = bytearray(EMB_MAGIC)
    out += f"id\tdim={embs.shape[1]}\ncount={len(ids)}\n".encode()
    for i, row in zip(ids, embs):
        if "\n" in i:
            raise ValueError(f"id {i!r} contains a newline")
        out += i.encode("utf-8") + b"\n"
        out += row.tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def load_embeddings(path) -> tuple[list[str], np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(EMB_MAGIC):
        raise FormatError(f"{path}: not an EEMB1 embedding file")
    pos = len(EMB_MAGIC)
    line, pos = nn._read_line(buf, pos)
    if not line.startswith("id\tdim="):
        raise IntegrityError("bad embedding header", offset=pos)
    dim = int(line.split("=", 1)[1])
    line, pos = nn._read_line(buf, pos)
    count = int(line.split("=", 1)[1])
    ids = []
    embs = np.empty((count, dim), dtype=np.float32)
    for k in range(count):
        i, pos = nn._read_line(buf, pos)
        if pos + 4 * dim > len(buf):
            raise IntegrityError("truncated embedding record", offset=pos)
        embs[k] = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos)
        pos += 4 * dim
        ids.append(i)
    if pos != len(buf):
        raise IntegrityError("trailing bytes after last record", offset=pos)
    return ids, embs
