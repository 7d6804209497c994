"""Daily batch prediction flow as local stages.

filter candidates -> embed items -> embed users -> build index -> batch
retrieve into a file-backed key/value results store. Every stage writes its
output file before the next one starts, so a failure leaves earlier outputs
intact.
"""

from __future__ import annotations

import json
import os
import struct
import time
import zlib
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import nn
from .errors import ConfigError, ConsistencyError, DataError, FormatError, IntegrityError, RecsysError, StageError
from .retrieval import ClusteredIndex, RetrievalConfig, build_index, load_index, retrieve, save_index
from .synth import (THIRTY_DAYS, EventType, ItemRecord, UserEvent, events_by_user, history_before,
                    load_events, load_items)
from .text import load_vocab, save_vocab
from .towers import RECURRENT, Featurizer, TwoTower, load_embeddings, save_embeddings

FOUR_DAYS = 4 * 86_400
STORE_MAGIC = b"ERST1\n"


@dataclass
class PipelineConfig:
    workdir: str = "work"
    items_path: str = "items.jsonl"
    events_path: str = "events.jsonl"
    impressions_path: str = "impressions.jsonl"
    title_vocab_path: str = "vocab_title.txt"
    aspect_vocab_path: str = "vocab_aspect.txt"
    checkpoint_path: str = "model.ettw"
    candidates_path: str = "candidates.txt"
    item_embeddings_path: str = "items.eemb"
    user_embeddings_path: str = "users.eemb"
    cold_users_path: str = "cold_users.txt"
    index_path: str = "index.ecix"
    results_path: str = "results.erst"
    report_path: str = "pipeline_report.json"
    candidate_min_clicks: int = 2
    candidate_click_window_seconds: int = FOUR_DAYS
    user_activity_window_seconds: int = THIRTY_DAYS
    N: int = 12
    M: int = 10
    K: int | None = None
    fallback_top_popular: int = 12
    reference_time: int | None = None
    index_seed: int = 0

    def validate(self) -> None:
        for name in ("candidate_click_window_seconds", "user_activity_window_seconds"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be > 0")
        for name in ("candidate_min_clicks", "fallback_top_popular"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        self.retrieval.validate()

    @property
    def retrieval(self) -> RetrievalConfig:
        return RetrievalConfig(self.N, self.M, self.K)

    def path(self, name: str) -> Path:
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.workdir) / p


# ---------------------------------------------------------------------------
# candidates

def click_events(events: Iterable[UserEvent]) -> list[tuple[str, int]]:
    """Item views are the click stream (a click opens the listing page)."""
    return [(e.item_id, e.timestamp) for e in events if e.event_type is EventType.ITEM_VIEW]


def click_counts(clicks: Iterable[tuple[str, int]], reference_time: int, window: int) -> Counter:
    """Clicks inside ``[reference_time - window, reference_time)``."""
    lo = reference_time - window
    return Counter(i for i, t in clicks if lo <= t < reference_time)


def filter_candidates(items: Sequence[ItemRecord], clicks: Iterable[tuple[str, int]],
                      cfg: PipelineConfig, reference_time: int) -> set[str]:
    counts = click_counts(clicks, reference_time, cfg.candidate_click_window_seconds)
    return {it.item_id for it in items if counts.get(it.item_id, 0) >= cfg.candidate_min_clicks}


def popular_candidates(candidates: Iterable[str], counts: Mapping[str, int], n: int) -> list[tuple[str, float]]:
    ranked = sorted(candidates, key=lambda i: (-counts.get(i, 0), i))[:n]
    return [(i, float(np.float32(counts.get(i, 0)))) for i in ranked]


def reference_time_for(events: Sequence[UserEvent], cfg: PipelineConfig) -> int:
    if cfg.reference_time is not None:
        return cfg.reference_time
    return max((e.timestamp for e in events), default=0) + 1


# ---------------------------------------------------------------------------
# model loading

def load_model(cfg: PipelineConfig) -> TwoTower:
    for name in ("checkpoint_path", "title_vocab_path", "aspect_vocab_path"):
        if not cfg.path(name).exists():
            raise DataError(f"{name} {cfg.path(name)} not found; train a model first")
    params, extra = nn.load_checkpoint(cfg.path("checkpoint_path"))
    featurizer = Featurizer(load_vocab(cfg.path("title_vocab_path")), load_vocab(cfg.path("aspect_vocab_path")),
                            int(extra.get("n_categories", params.vocab_sizes[2] - 1)))
    featurizer.check_params(params)
    return TwoTower(params, featurizer, extra.get("user_tower", RECURRENT))


def save_model(model: TwoTower, cfg: PipelineConfig, extra: Mapping | None = None) -> None:
    save_vocab(model.featurizer.title_vocab, cfg.path("title_vocab_path"))
    save_vocab(model.featurizer.aspect_vocab, cfg.path("aspect_vocab_path"))
    nn.save_checkpoint(model.params, cfg.path("checkpoint_path"),
                       {"user_tower": model.user_tower, "n_categories": model.featurizer.n_categories,
                        **(extra or {})})


# ---------------------------------------------------------------------------
# batch embedding

def batch_embed_items(model: TwoTower, items: Sequence[ItemRecord], out_path) -> tuple[list[str], np.ndarray]:
    ids = [it.item_id for it in items]
    embs = model.encode_items(items) if items else np.zeros((0, model.dim), dtype=np.float32)
    save_embeddings(out_path, ids, embs)
    return ids, embs


def batch_embed_users(model: TwoTower, user_ids: Sequence[str], events: Sequence[UserEvent],
                      items_by_id: Mapping[str, ItemRecord], reference_time: int, window: int,
                      out_path, cold_path) -> tuple[list[str], np.ndarray, list[str]]:
    """Embed every user with usable events in ``[reference_time - window, reference_time)``.

    Users without any are skipped and listed, one per line, in ``cold_path``.
    """
    by_user = events_by_user(events)
    histories = []
    for u in user_ids:
        evs = by_user.get(u, [])
        histories.append(history_before(evs, [e.timestamp for e in evs], reference_time, window))
    embs, ok = model.encode_users(histories, items_by_id) if histories else (np.zeros((0, model.dim)), np.zeros(0, bool))
    warm = [u for u, k in zip(user_ids, ok) if k]
    cold = [u for u, k in zip(user_ids, ok) if not k]
    save_embeddings(out_path, warm, embs[ok])
    _atomic_write(cold_path, "".join(f"{u}\n" for u in cold).encode())
    return warm, embs[ok], cold


# ---------------------------------------------------------------------------
# results store

@dataclass
class StoreEntry:
    source: str                      # "model" or "fallback"
    items: list[tuple[str, float]]


@dataclass
class ResultsStore:
    entries: dict[str, StoreEntry]
    generated_at: int = 0


@dataclass
class LookupResult:
    status: str                       # "found" or "not_found"
    items: list[tuple[str, float]] = field(default_factory=list)
    source: str | None = None


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def encode_store(store: ResultsStore) -> bytes:
    out = bytearray(STORE_MAGIC)
    out += f"generated_at={store.generated_at}\nusers={len(store.entries)}\n".encode()
    for user_id, entry in store.entries.items():
        out += user_id.encode("utf-8") + b"\n"
        out += f"{entry.source} {len(entry.items)}\n".encode()
        for item_id, score in entry.items:
            out += item_id.encode("utf-8") + b"\n" + struct.pack("<f", score)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_store(store: ResultsStore, path) -> None:
    """Write to a temp file and rename, so readers never see a partial store."""
    _atomic_write(path, encode_store(store))


def load_store(path) -> ResultsStore:
    buf = Path(path).read_bytes()
    if not buf.startswith(STORE_MAGIC):
        raise FormatError(f"{path}: not an ERST1 results store")
    if len(buf) < len(STORE_MAGIC) + 4 or struct.unpack("<I", buf[-4:])[0] != zlib.crc32(buf[:-4]):
        raise IntegrityError("results store checksum mismatch", offset=max(0, len(buf) - 4))
    body = buf[:-4]
    pos = len(STORE_MAGIC)
    line, pos = nn._read_line(body, pos)
    generated_at = int(line.split("=", 1)[1])
    line, pos = nn._read_line(body, pos)
    n_users = int(line.split("=", 1)[1])
    entries = {}
    for _ in range(n_users):
        user_id, pos = nn._read_line(body, pos)
        line, pos = nn._read_line(body, pos)
        source, count = line.split()
        items = []
        for _ in range(int(count)):
            item_id, pos = nn._read_line(body, pos)
            if pos + 4 > len(body):
                raise IntegrityError("truncated score", offset=pos)
            (score,) = struct.unpack_from("<f", body, pos)
            pos += 4
            items.append((item_id, score))
        entries[user_id] = StoreEntry(source, items)
    if pos != len(body):
        raise IntegrityError("trailing bytes in results store", offset=pos)
    return ResultsStore(entries, generated_at)


def batch_retrieve(index: ClusteredIndex, user_ids: Sequence[str], user_embs: np.ndarray,
                   cold_users: Sequence[str], popular: Sequence[tuple[str, float]],
                   cfg: PipelineConfig, out_path, generated_at: int = 0,
                   item_universe: Iterable[str] | None = None) -> ResultsStore:
    """KNN results for every embedded user plus the popularity list for cold users."""
    if item_universe is not None and set(item_universe) != index.item_ids():
        raise ConsistencyError("index items differ from the embedded candidate set")
    if len(user_ids) and user_embs.shape[1] != index.dim:
        raise ConsistencyError(f"user embeddings have dim {user_embs.shape[1]}, index has {index.dim}")
    rcfg = cfg.retrieval
    rcfg = replace(rcfg, M=min(rcfg.M, index.K))
    entries: dict[str, StoreEntry] = {}
    for u, emb in zip(user_ids, user_embs):
        entries[u] = StoreEntry("model", retrieve(index, emb, rcfg).items)
    for u in cold_users:
        if u in entries:
            raise ConsistencyError(f"user {u!r} is both embedded and cold")
        entries[u] = StoreEntry("fallback", list(popular))
    store = ResultsStore(entries, generated_at)
    save_store(store, out_path)
    return store


def lookup(store_path, user_id: str) -> LookupResult:
    store = load_store(store_path)
    entry = store.entries.get(user_id)
    if entry is None:
        return LookupResult("not_found")
    return LookupResult("found", entry.items, entry.source)


# ---------------------------------------------------------------------------
# file-backed stages; each reads what earlier stages wrote

def write_candidates(path, candidates: Sequence[str], counts: Mapping[str, int], reference_time: int) -> None:
    lines = [f"# reference_time={reference_time}\n"] + [f"{i}\t{counts.get(i, 0)}\n" for i in candidates]
    _atomic_write(path, "".join(lines).encode())


def read_candidates(path) -> tuple[list[str], dict[str, int], int]:
    """Candidate ids in file order, their click counts and the reference time."""
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError:
        raise DataError(f"candidate file {path} not found; run the filter stage first") from None
    if not lines or not lines[0].startswith("# reference_time="):
        raise FormatError(f"{path}: missing reference_time header")
    ref = int(lines[0].split("=", 1)[1])
    ids, counts = [], {}
    for line in lines[1:]:
        item_id, n = line.split("\t")
        ids.append(item_id)
        counts[item_id] = int(n)
    return ids, counts, ref


def read_lines(path) -> list[str]:
    try:
        return [line for line in Path(path).read_text().splitlines() if line]
    except FileNotFoundError:
        raise DataError(f"{path} not found") from None


def stage_filter_candidates(cfg: PipelineConfig) -> dict:
    items = load_items(cfg.path("items_path"))
    events = load_events(cfg.path("events_path"))
    ref = reference_time_for(events, cfg)
    clicks = click_events(events)
    keep = filter_candidates(items, clicks, cfg, ref)
    counts = click_counts(clicks, ref, cfg.candidate_click_window_seconds)
    write_candidates(cfg.path("candidates_path"), [it.item_id for it in items if it.item_id in keep], counts, ref)
    return {"items": len(items), "candidates": len(keep), "reference_time": ref}


def stage_embed_items(cfg: PipelineConfig, model: TwoTower | None = None) -> dict:
    ids, _, _ = read_candidates(cfg.path("candidates_path"))
    model = model or load_model(cfg)
    by_id = {it.item_id: it for it in load_items(cfg.path("items_path"))}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ConsistencyError(f"{len(missing)} candidate ids are not in the item catalog, e.g. {missing[0]!r}")
    ids, _ = batch_embed_items(model, [by_id[i] for i in ids], cfg.path("item_embeddings_path"))
    return {"embedded": len(ids)}


def stage_embed_users(cfg: PipelineConfig, model: TwoTower | None = None) -> dict:
    _, _, ref = read_candidates(cfg.path("candidates_path"))
    model = model or load_model(cfg)
    events = load_events(cfg.path("events_path"))
    items_by_id = {it.item_id: it for it in load_items(cfg.path("items_path"))}
    user_ids = sorted({e.user_id for e in events})
    warm, _, cold = batch_embed_users(model, user_ids, events, items_by_id, ref, cfg.user_activity_window_seconds,
                                      cfg.path("user_embeddings_path"), cfg.path("cold_users_path"))
    return {"users": len(user_ids), "embedded": len(warm), "cold": len(cold)}


def stage_build_index(cfg: PipelineConfig) -> dict:
    ids, embs = load_embeddings(cfg.path("item_embeddings_path"))
    if not ids:
        raise ConsistencyError("no candidate items to index")
    _, ref = read_candidates(cfg.path("candidates_path"))[1:]
    params, _ = nn.load_checkpoint(cfg.path("checkpoint_path"))
    K = min(cfg.retrieval.cluster_count(len(ids)), len(ids))
    index = build_index(ids, embs, K, params.hyper.tau, cfg.index_seed, built_at=ref)
    save_index(index, cfg.path("index_path"))
    return {"clusters": index.K, "items": len(index)}


def stage_batch_retrieve(cfg: PipelineConfig) -> dict:
    index = load_index(cfg.path("index_path"))
    item_ids, _ = load_embeddings(cfg.path("item_embeddings_path"))
    candidates, counts, ref = read_candidates(cfg.path("candidates_path"))
    if set(item_ids) != set(candidates):
        raise ConsistencyError("item embeddings do not cover the candidate set")
    user_ids, user_embs = load_embeddings(cfg.path("user_embeddings_path"))
    cold = read_lines(cfg.path("cold_users_path"))
    popular = popular_candidates(candidates, counts, cfg.fallback_top_popular)
    store = batch_retrieve(index, user_ids, user_embs, cold, popular, cfg, cfg.path("results_path"),
                           generated_at=ref, item_universe=item_ids)
    return {"users": len(store.entries), "fallback": len(cold)}


STAGES = (
    ("filter_candidates", stage_filter_candidates),
    ("embed_items", stage_embed_items),
    ("embed_users", stage_embed_users),
    ("build_index", stage_build_index),
    ("batch_retrieve", stage_batch_retrieve),
)


def run_all(cfg: PipelineConfig) -> dict:
    """Run the five stages in order (numbered from 1; stage 0 is the input corpus).

    The JSON report is written even when a stage fails; the failure is then
    re-raised as a :class:`StageError` naming the stage.
    """
    cfg.validate()
    Path(cfg.workdir).mkdir(parents=True, exist_ok=True)
    report = {"status": "ok", "stages": []}
    for number, (name, fn) in enumerate(STAGES, start=1):
        t0 = time.perf_counter()
        try:
            counts = fn(cfg)
        except (RecsysError, OSError) as exc:
            cause = exc if isinstance(exc, RecsysError) else DataError(str(exc))
            report["status"] = "failed"
            report["stages"].append({"stage": number, "name": name, "status": "failed", "error": str(exc),
                                     "wall_ms": int((time.perf_counter() - t0) * 1000)})
            _atomic_write(cfg.path("report_path"), json.dumps(report, indent=2).encode())
            raise StageError(name, cause) from exc
        report["stages"].append({"stage": number, "name": name, "status": "ok", **counts,
                                 "wall_ms": int((time.perf_counter() - t0) * 1000)})
    _atomic_write(cfg.path("report_path"), json.dumps(report, indent=2).encode())
    return report
