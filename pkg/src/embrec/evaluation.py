"""Offline evaluation: Recall@k over a full candidate pool, the recently-viewed
baseline, and the missing-history ablation curve."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import CoverageError
from .synth import EventType, ItemRecord, UserHistory
from .towers import TwoTower
from .training import apply_history_skip

K_VALUES = (1, 5, 10, 20, 40)


class RVI:
    """Recently-viewed-items baseline, usable wherever a model is expected."""

    name = "rvi"


@dataclass
class EvalReport:
    recall_at_k: dict[int, float]
    impression_count: int
    candidate_pool_size: int
    fallback_count: int = 0
    excluded_count: int = 0
    label: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        d["recall_at_k"] = {str(k): v for k, v in self.recall_at_k.items()}
        return json.dumps(d, sort_keys=True)


@dataclass
class AblationCurve:
    points: list[tuple[float, float]]
    model_skip_minutes: float
    fallback_counts: list[int] = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        xs = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("missing_minutes must be strictly increasing")

    def auc(self) -> float:
        return curve_auc(self)

    def to_json(self) -> str:
        return json.dumps({"points": [list(p) for p in self.points],
                           "model_skip_minutes": self.model_skip_minutes,
                           "fallback_counts": self.fallback_counts,
                           "auc": self.auc(), "label": self.label}, sort_keys=True)


# ---------------------------------------------------------------------------
# ranking primitives

def _sort_keys(ids: Sequence[str]) -> np.ndarray:
    """Integer keys whose order matches the ids' string order."""
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    keys = np.empty(len(ids), dtype=np.int64)
    keys[order] = np.arange(len(ids))
    return keys


def rank_candidates(user_emb, candidate_ids: Sequence[str], candidate_embs) -> list[str]:
    """Descending dot product, ties by item id ascending."""
    if len(candidate_ids) == 0:
        raise ValueError("no candidates to rank")
    scores = scores_for(candidate_embs, user_emb)
    order = sorted(range(len(candidate_ids)), key=lambda i: (-scores[i], candidate_ids[i]))
    return [candidate_ids[i] for i in order]


def scores_for(embs, user_emb) -> np.ndarray:
    """Row-wise dot products accumulated in float64; each row's value depends only on that row."""
    embs = np.asarray(embs, dtype=np.float64)
    return (embs * np.asarray(user_emb, dtype=np.float64)).sum(axis=-1)


def rank_of(scores: np.ndarray, keys: np.ndarray, targets) -> np.ndarray:
    """0-based ranks of the candidates at positions ``targets``.

    Order is descending score, then ascending ``keys`` (keys sort like item ids).
    """
    targets = np.asarray(targets, dtype=np.int64)
    s = scores[targets][:, None]
    k = np.asarray(keys)[targets][:, None]
    ahead = (scores[None, :] > s) | ((scores[None, :] == s) & (np.asarray(keys)[None, :] < k))
    return ahead.sum(axis=1)


def recall_at_k(rankings: Sequence[Sequence[str]], relevants: Sequence[set], k: int,
                counters: dict | None = None) -> float:
    """Mean over impressions of |relevant ∩ top-k| / |relevant|; empty relevant sets are skipped."""
    if k < 1:
        raise ValueError("k must be >= 1")
    total = 0.0
    n = 0
    for ranked, rel in zip(rankings, relevants):
        rel = set(rel)
        if not rel:
            if counters is not None:
                counters["empty_relevant"] = counters.get("empty_relevant", 0) + 1
            continue
        total += len(rel.intersection(ranked[:k])) / len(rel)
        n += 1
    return total / n if n else 0.0


def last_view_times(history: UserHistory) -> dict[str, int]:
    seen: dict[str, int] = {}
    for ev in history.events:
        if ev.event_type is EventType.ITEM_VIEW:
            seen[ev.item_id] = max(ev.timestamp, seen.get(ev.item_id, ev.timestamp))
    return seen


def rvi_rank(history: UserHistory, candidate_ids: Sequence[str]) -> list[str]:
    """Viewed candidates most recent first, then the never-viewed ones by id."""
    seen = last_view_times(history)
    viewed = sorted((c for c in set(candidate_ids) if c in seen), key=lambda c: (-seen[c], c))
    rest = sorted(c for c in set(candidate_ids) if c not in seen)
    return viewed + rest


# ---------------------------------------------------------------------------
# evaluation

def _rvi_ranks(history: UserHistory, pool_set: set, id_rank_all: dict, targets: Sequence[str]):
    """Ranks of ``targets`` under rvi_rank without materialising the full list."""
    seen = {c: t for c, t in last_view_times(history).items() if c in pool_set}
    viewed = sorted(seen, key=lambda c: (-seen[c], c))
    pos = {c: i for i, c in enumerate(viewed)}
    viewed_keys = np.sort(np.array([id_rank_all[c] for c in viewed], dtype=np.int64))
    out = []
    for t in targets:
        if t in pos:
            out.append(pos[t])
        else:
            k = id_rank_all[t]
            # never-viewed items ahead of t in id order
            out.append(len(viewed) + k - int(np.searchsorted(viewed_keys, k)))
    return np.array(out, dtype=np.int64)


def evaluate(model, test_split, candidate_pool: Sequence[ItemRecord],
             items_by_id: Mapping[str, ItemRecord] | None = None, skip_window: int = 0,
             ks: Sequence[int] = K_VALUES, label: str = "") -> EvalReport:
    """Rank the whole pool for every test impression and aggregate Recall@k.

    ``model`` is a :class:`TwoTower` or :class:`RVI`. Impressions whose history
    is empty after the skip window fall back to the recently-viewed ranking
    (pure id order) and are counted in ``fallback_count``.
    """
    pool_ids = [it.item_id for it in candidate_pool]
    pool_set = set(pool_ids)
    missing = {p for _, imp in test_split for p in imp.positive_item_ids if p not in pool_set}
    if missing:
        raise CoverageError(missing)
    items_by_id = items_by_id if items_by_id is not None else {it.item_id: it for it in candidate_pool}
    keys = _sort_keys(pool_ids)
    id_rank = dict(zip(pool_ids, keys.tolist()))
    position = {c: i for i, c in enumerate(pool_ids)}
    histories = [apply_history_skip(h, imp.impression_time, skip_window) if skip_window else h
                 for h, imp in test_split]

    use_model = isinstance(model, TwoTower)
    if use_model:
        V = model.encode_items(candidate_pool).astype(np.float64)
        U, ok = model.encode_users(histories, items_by_id)
    else:
        ok = np.zeros(len(histories), dtype=bool)

    sums = {k: 0.0 for k in ks}
    n = fallback = excluded = 0
    for i, ((_, imp), hist) in enumerate(zip(test_split, histories)):
        positives = list(dict.fromkeys(imp.positive_item_ids))
        if not positives:
            excluded += 1
            continue
        if use_model and ok[i]:
            scores = (V * U[i].astype(np.float64)).sum(axis=1)
            ranks = rank_of(scores, keys, [position[p] for p in positives])
        else:
            if use_model:
                fallback += 1
            ranks = _rvi_ranks(hist, pool_set, id_rank, positives)
        for k in ks:
            sums[k] += float(np.sum(ranks < k)) / len(positives)
        n += 1
    recall = {k: (sums[k] / n if n else 0.0) for k in ks}
    return EvalReport(recall, n, len(pool_ids), fallback, excluded, label)


def ablation_curve(model, test_split, candidate_pool, missing_windows: Sequence[float],
                   items_by_id=None, model_skip_minutes: float = 0.0, label: str = "") -> AblationCurve:
    """Recall@20 when the most recent ``w`` minutes of history are missing at prediction time."""
    points, fallbacks = [], []
    for w in missing_windows:
        rep = evaluate(model, test_split, candidate_pool, items_by_id, skip_window=int(round(w * 60)),
                       ks=(20,))
        points.append((float(w), rep.recall_at_k[20]))
        fallbacks.append(rep.fallback_count)
    return AblationCurve(points, model_skip_minutes, fallbacks, label)


def curve_auc(curve: AblationCurve) -> float:
    """Trapezoidal area under the (minutes, Recall@20) points."""
    xs = np.array([p[0] for p in curve.points], dtype=np.float64)
    ys = np.array([p[1] for p in curve.points], dtype=np.float64)
    if len(xs) < 2:
        return 0.0
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2))


def select_by_auc(curves: Sequence[AblationCurve]) -> int:
    """Index of the curve with the largest AUC; ties go to the smaller training skip."""
    best = None
    for i, c in enumerate(curves):
        key = (-c.auc(), c.model_skip_minutes)
        if best is None or key < best[0]:
            best = (key, i)
    if best is None:
        raise ValueError("no curves to select from")
    return best[1]


def format_table(baseline: EvalReport, model: EvalReport) -> str:
    """Fixed-width k / baseline / model / delta% table."""
    lines = [f"{'Recall@k':>8}  {'RVI':>8}  {'Model':>8}  {'delta%':>8}"]
    for k in baseline.recall_at_k:
        b, m = baseline.recall_at_k[k], model.recall_at_k.get(k, float("nan"))
        delta = (m - b) / b * 100 if b > 0 else float("nan")
        lines.append(f"{k:>8d}  {b:>8.4f}  {m:>8.4f}  {delta:>8.1f}")
    return "\n".join(lines)
