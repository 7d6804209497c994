"""Sampled-softmax training of the two towers.

Each training example pairs a user history with one clicked item. The loss is
the softmax negative log-likelihood of the clicked item against sampled
negatives, with affinity ``dot(v, u) / tau``. Negatives come either from the
other examples in the minibatch (impressed but un-clicked items) or from the
example's own un-clicked impressions.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .errors import ConfigError, EmptyDatasetError, NumericError, SamplingError
from .synth import DatasetSplit, ItemRecord, UserHistory
from .text import build_vocab, aspect_tokens, tokenize
from .towers import (RECURRENT, USER_TOWERS, FeatureBank, Featurizer, HistoryBatch, ItemFeatures,
                     TwoTower, event_inputs, event_inputs_backward, history_slots, item_backward,
                     item_forward, user_backward, user_forward)

log = logging.getLogger(__name__)

IN_BATCH = "in_batch"
OBSERVED = "observed"
NEGATIVE_MODES = (IN_BATCH, OBSERVED)


@dataclass
class TrainConfig:
    hyperparams: nn.HyperParams = field(default_factory=nn.HyperParams)
    user_tower: str = RECURRENT
    negative_mode: str = IN_BATCH
    skip_window_seconds: int = 600
    epochs: int | None = None
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    observed_negatives: int = 8
    val_pool_size: int = 1000

    def validate(self) -> None:
        self.hyperparams.validate()
        if self.user_tower not in USER_TOWERS:
            raise ConfigError("user_tower", f"must be one of {USER_TOWERS}")
        if self.negative_mode not in NEGATIVE_MODES:
            raise ConfigError("negative_mode", f"must be one of {NEGATIVE_MODES}")
        if self.skip_window_seconds < 0:
            raise ConfigError("skip_window_seconds", "must be >= 0")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")

    @property
    def n_epochs(self) -> int:
        return self.hyperparams.epochs if self.epochs is None else self.epochs


@dataclass
class TrainExample:
    user_id: str
    history: UserHistory
    positive: ItemFeatures
    impression_negatives: tuple[ItemFeatures, ...]
    impression_time: int
    positive_id: str
    negative_ids: tuple[str, ...]
    # compiled against a FeatureBank
    event_rows: np.ndarray
    event_types: np.ndarray
    event_times: np.ndarray
    positive_row: int
    positive_index: int
    negative_index: np.ndarray
    impression_index: np.ndarray


@dataclass
class TrainResult:
    model: TwoTower
    metrics: list[dict]
    best_epoch: int
    counters: dict[str, int]


# ---------------------------------------------------------------------------
# vocabulary / featurizer from an item corpus

def build_featurizer(items: Sequence[ItemRecord], title_max: int = 400_000, aspect_max: int = 100_000,
                     min_frequency: int = 1) -> Featurizer:
    title_vocab = build_vocab((t for it in items for t in tokenize(it.title)), title_max, min_frequency)
    aspect_vocab = build_vocab((t for it in items for t in aspect_tokens(it.aspects)), aspect_max, min_frequency)
    n_categories = max((it.category_id for it in items), default=-1) + 1
    return Featurizer(title_vocab, aspect_vocab, n_categories)


class ItemUniverse:
    """Integer indices for item ids plus their FeatureBank rows."""

    def __init__(self, items: Sequence[ItemRecord], bank: FeatureBank):
        self.items = list(items)
        self.by_id = {it.item_id: it for it in self.items}
        self.index = {it.item_id: k for k, it in enumerate(self.items)}
        bank.add_items(self.items)
        self.bank = bank
        self.rows = np.array([bank.item_row[it.item_id] for it in self.items], dtype=np.int64)
        order = sorted(range(len(self.items)), key=lambda i: self.items[i].item_id)
        self.id_keys = np.empty(len(self.items), dtype=np.int64)
        self.id_keys[order] = np.arange(len(self.items))

    def ids(self, indices) -> list[str]:
        return [self.items[int(k)].item_id for k in indices]


def compile_examples(rows, universe: ItemUniverse, counters: dict | None = None) -> list[TrainExample]:
    """One TrainExample per (impression, positive); events that cannot be resolved are dropped."""
    counters = counters if counters is not None else {}
    bank = universe.bank
    out = []
    for hist, imp in rows:
        kept = [ev for ev in hist.events
                if ev.item_id is None or ev.item_id in universe.by_id]
        counters["missing_event_items"] = counters.get("missing_event_items", 0) + len(hist.events) - len(kept)
        ev_rows, ev_types = history_slots(bank, kept, skip_missing=False, limit=len(kept) or 1)
        times = np.array([ev.timestamp for ev in kept], dtype=np.int64)
        neg_ids = tuple(i for i in imp.negative_item_ids if i in universe.index)
        neg_feats = tuple(bank.rows[bank.item_row[i]] for i in neg_ids)
        imp_index = np.array([universe.index[i] for i in (*imp.positive_item_ids, *neg_ids)
                              if i in universe.index], dtype=np.int64)
        for pid in imp.positive_item_ids:
            if pid not in universe.index:
                counters["missing_positive"] = counters.get("missing_positive", 0) + 1
                continue
            out.append(TrainExample(
                user_id=imp.user_id, history=hist, positive=bank.rows[bank.item_row[pid]],
                impression_negatives=neg_feats, impression_time=imp.impression_time,
                positive_id=pid, negative_ids=neg_ids,
                event_rows=np.asarray(ev_rows, dtype=np.int64), event_types=np.asarray(ev_types, dtype=np.int64),
                event_times=times, positive_row=bank.item_row[pid], positive_index=universe.index[pid],
                negative_index=np.array([universe.index[i] for i in neg_ids], dtype=np.int64),
                impression_index=imp_index,
            ))
    return out


# ---------------------------------------------------------------------------
# history skip

def apply_history_skip(history: UserHistory, impression_time: int, skip_window: int) -> UserHistory:
    """Drop the most recent events: keep only timestamps <= impression_time - skip_window."""
    if skip_window < 0:
        raise ValueError("skip_window must be >= 0")
    cutoff = impression_time - skip_window
    kept = tuple(ev for ev in history.events if ev.timestamp <= cutoff)
    return UserHistory(kept, history.reference_time)


def _skip_mask(times: np.ndarray, impression_time: int, skip_window: int) -> np.ndarray:
    return times <= impression_time - skip_window


# ---------------------------------------------------------------------------
# negative sampling

def _in_batch_indices(batch: Sequence[TrainExample], per_positive: int, rng: np.random.Generator,
                      item_rows: np.ndarray):
    if len(batch) < 2:
        raise SamplingError("in-batch sampling needs at least two examples")
    owners = np.concatenate([np.full(len(ex.negative_index), b) for b, ex in enumerate(batch)])
    pool = np.concatenate([ex.negative_index for ex in batch])
    out = np.empty((len(batch), per_positive), dtype=np.int64)
    for b, ex in enumerate(batch):
        ok = (owners != b) & ~np.isin(pool, ex.impression_index)
        cand = pool[ok]
        if cand.size:
            cand = cand[item_rows[cand] != ex.positive_row]
        if cand.size == 0:
            raise SamplingError(f"no in-batch negatives available for example {b} ({ex.user_id})")
        out[b] = cand[rng.integers(cand.size, size=per_positive)]
    return out


def sample_in_batch_negatives(batch: Sequence[TrainExample], per_positive: int,
                              rng: np.random.Generator, universe: ItemUniverse) -> list[list[str]]:
    """Uniform draws, with replacement, from the other examples' un-clicked items.

    Items from the example's own impression and items feature-identical to its
    positive are never drawn. Multiplicity in the pool is kept, so an item
    impressed twice in the batch is twice as likely.
    """
    idx = _in_batch_indices(batch, per_positive, rng, universe.rows)
    return [universe.ids(row) for row in idx]


def sample_observed_negatives(example: TrainExample, per_positive: int = 8,
                              counters: dict | None = None) -> list[str]:
    if not example.negative_ids and counters is not None:
        counters["no_observed_negatives"] = counters.get("no_observed_negatives", 0) + 1
    return list(example.negative_ids[:per_positive])


# ---------------------------------------------------------------------------
# loss

def softmax_nll(user: np.ndarray, pos: np.ndarray, negs: np.ndarray, tau: float, neg_mask=None):
    """Batched NLL of the positive against its negatives.

    ``user`` (B, D), ``pos`` (B, D), ``negs`` (B, n, D). Returns mean loss and
    gradients with respect to the three inputs.
    """
    if negs.shape[1] < 1:
        raise ValueError("need at least one negative")
    B = user.shape[0]
    logits = np.concatenate([np.sum(user * pos, axis=1, keepdims=True),
                             np.einsum("bd,bnd->bn", user, negs)], axis=1) / tau
    if neg_mask is not None:
        logits[:, 1:] = np.where(neg_mask, logits[:, 1:], -np.inf)
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    z = ex.sum(axis=1, keepdims=True)
    losses = (np.log(z) + mx)[:, 0] - logits[:, 0]
    loss = float(np.mean(losses, dtype=np.float64))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    dlog = ex / z
    dlog[:, 0] -= 1
    dlog /= B * tau
    d_user = dlog[:, :1] * pos + np.einsum("bn,bnd->bd", dlog[:, 1:], negs)
    d_pos = dlog[:, :1] * user
    d_negs = dlog[:, 1:, None] * user[:, None, :]
    return loss, d_user, d_pos, d_negs


def nll_loss(model: TwoTower, user_emb: np.ndarray, positive: ItemFeatures,
             negatives: Sequence[ItemFeatures], tau: float):
    """Loss for one user embedding; gradients reach the item tower.

    Returns ``(loss, grads)`` where ``grads`` holds every item-tower parameter
    block plus ``"user_emb"``.
    """
    if not negatives:
        raise ValueError("need at least one negative")
    params = model.params
    bank = model.new_bank()
    rows = [bank.add(positive)] + [bank.add(f) for f in negatives]
    V, cache = item_forward(params, *bank.inputs(np.arange(len(bank))))
    u = np.asarray(user_emb, dtype=V.dtype)[None]
    loss, d_u, d_pos, d_negs = softmax_nll(u, V[rows[:1]], V[rows[1:]][None], tau)
    grads = params.zeros_like()
    dV = np.zeros_like(V)
    np.add.at(dV, rows[:1], d_pos)
    np.add.at(dV, rows[1:], d_negs[0])
    item_backward(params, cache, dV, grads)
    grads["user_emb"] = d_u[0]
    return loss, grads


def batch_loss_and_grads(params: nn.ModelParams, kind: str, bank: FeatureBank, examples,
                         histories, neg_rows: np.ndarray, neg_mask: np.ndarray | None = None):
    """Full two-tower forward/backward for a minibatch.

    ``histories`` holds (rows, types) per example; ``neg_rows`` is (B, n) bank rows.
    """
    pos_rows = np.array([ex.positive_row for ex in examples], dtype=np.int64)
    hist_rows = np.concatenate([r for r, _ in histories])
    needed = np.concatenate([hist_rows, pos_rows, neg_rows.reshape(-1)])
    uniq, inv = np.unique(needed, return_inverse=True)
    n_hist = len(hist_rows)
    B = len(examples)
    hist_inv = inv[:n_hist]
    pos_idx = inv[n_hist:n_hist + B]
    neg_idx = inv[n_hist + B:].reshape(neg_rows.shape)

    V, icache = item_forward(params, *bank.inputs(uniq))
    idx_lists, p = [], 0
    for r, _ in histories:
        idx_lists.append(hist_inv[p:p + len(r)])
        p += len(r)
    hb = HistoryBatch.from_lists(idx_lists, [t for _, t in histories])
    X = event_inputs(params, V, hb)
    U, ucache = user_forward(params, kind, X, hb)
    loss, dU, dP, dN = softmax_nll(U, V[pos_idx], V[neg_idx], params.hyper.tau, neg_mask)

    grads = params.zeros_like()
    dV = np.zeros_like(V)
    np.add.at(dV, pos_idx, dP)
    np.add.at(dV, neg_idx.reshape(-1), dN.reshape(-1, dN.shape[-1]))
    dX = user_backward(params, ucache, dU, hb, grads)
    event_inputs_backward(params, hb, dX, dV, grads)
    item_backward(params, icache, dV, grads)
    return loss, grads


# ---------------------------------------------------------------------------
# training loop

def _histories(examples, skip_window):
    out = []
    for ex in examples:
        keep = _skip_mask(ex.event_times, ex.impression_time, skip_window)
        rows, types = ex.event_rows[keep], ex.event_types[keep]
        out.append((rows[-200:], types[-200:]))
    return out


def _negatives(cfg: TrainConfig, batch, universe, rng, counters):
    hp = cfg.hyperparams
    if cfg.negative_mode == IN_BATCH:
        idx = _in_batch_indices(batch, hp.negatives_per_positive, rng, universe.rows)
        return universe.rows[idx], None
    k = cfg.observed_negatives
    rows = np.zeros((len(batch), k), dtype=np.int64)
    mask = np.zeros((len(batch), k), dtype=bool)
    for b, ex in enumerate(batch):
        ids = sample_observed_negatives(ex, k, counters)
        rows[b, :len(ids)] = universe.rows[ex.negative_index[:len(ids)]]
        mask[b, :len(ids)] = True
    return rows, mask


def validation_recall(model: TwoTower, examples: Sequence[TrainExample], universe: ItemUniverse,
                      pool: np.ndarray, k: int = 20, skip_window: int = 0) -> float:
    """Recall@k where each impression ranks its positives against a shared sampled pool."""
    from .evaluation import rank_of

    if not examples:
        return 0.0
    groups: dict[tuple, list[TrainExample]] = {}
    for ex in examples:
        groups.setdefault((ex.user_id, ex.impression_time), []).append(ex)
    firsts = [g[0] for g in groups.values()]
    hists = _histories(firsts, skip_window)
    has = [len(r) > 0 for r, _ in hists]
    V = model._encode_rows(universe.bank, universe.rows)
    total, n = 0.0, 0
    live = [i for i, h in enumerate(has) if h]
    if live:
        U = _encode_from_slots(model, universe.bank, [hists[i] for i in live])
    pool_ids = np.asarray(pool)
    for j, i in enumerate(live):
        group = list(groups.values())[i]
        pos = np.array([ex.positive_index for ex in group])
        cand = np.union1d(pool_ids, pos)
        scores = (V[cand].astype(np.float64) * U[j]).sum(axis=1)
        ranks = rank_of(scores, universe.id_keys[cand], np.searchsorted(cand, pos))
        total += float(np.mean(ranks < k))
        n += 1
    return total / n if n else 0.0


def _encode_from_slots(model, bank, slots, chunk=256):
    out = []
    for s in range(0, len(slots), chunk):
        out.append(model._encode_slots(bank, slots[s:s + chunk], model.user_tower))
    return np.concatenate(out)


def train(dataset: DatasetSplit, config: TrainConfig, items: Sequence[ItemRecord],
          featurizer: Featurizer | None = None, log_path=None) -> TrainResult:
    """Minibatch Adam with global-norm clipping; returns the epoch with best validation Recall@20."""
    config.validate()
    hp = config.hyperparams
    if not dataset.train:
        raise EmptyDatasetError("training split is empty")
    featurizer = featurizer or build_featurizer(items)
    params = nn.ModelParams.init(hp, len(featurizer.title_vocab), len(featurizer.aspect_vocab),
                                 featurizer.category_rows)
    model = TwoTower(params, featurizer, config.user_tower)
    bank = model.new_bank()
    universe = ItemUniverse(items, bank)
    counters: dict[str, int] = {}
    train_ex = compile_examples(dataset.train, universe, counters)
    val_ex = compile_examples(dataset.validation, universe, {})
    if not train_ex:
        raise EmptyDatasetError("no usable training examples")

    rng = np.random.default_rng(hp.rng_seed)
    val_rng = np.random.default_rng(hp.rng_seed + 1)
    pool = np.sort(val_rng.choice(len(universe.items), size=min(config.val_pool_size, len(universe.items)),
                                  replace=False))
    opt = nn.Adam(hp.learning_rate)
    metrics: list[dict] = []
    best = (-1.0, 0, params.copy())
    step = 0
    for epoch in range(1, config.n_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_ex))
        losses = []
        for s in range(0, len(order), hp.batch_size):
            batch = [train_ex[i] for i in order[s:s + hp.batch_size]]
            hists = _histories(batch, config.skip_window_seconds)
            keep = [i for i, (r, _) in enumerate(hists) if len(r) > 0]
            counters["empty_history"] = counters.get("empty_history", 0) + len(batch) - len(keep)
            batch = [batch[i] for i in keep]
            hists = [hists[i] for i in keep]
            if config.negative_mode == IN_BATCH and len(batch) < 2:
                counters["tiny_batch"] = counters.get("tiny_batch", 0) + 1
                continue
            if not batch:
                continue
            neg_rows, neg_mask = _negatives(config, batch, universe, rng, counters)
            if neg_mask is not None:
                has_neg = neg_mask.any(axis=1)
                if not has_neg.all():
                    batch = [b for b, h in zip(batch, has_neg) if h]
                    hists = [b for b, h in zip(hists, has_neg) if h]
                    neg_rows, neg_mask = neg_rows[has_neg], neg_mask[has_neg]
                if not batch:
                    continue
            try:
                loss, grads = batch_loss_and_grads(params, config.user_tower, bank, batch, hists,
                                                   neg_rows, neg_mask)
                nn.clip_gradients(grads, hp.grad_clip)
            except NumericError:
                # raised before the update, so params still hold the last finite state
                if config.checkpoint_path:
                    nn.save_checkpoint(params, config.checkpoint_path)
                raise
            opt.step(params.tensors, grads)
            step += 1
            losses.append(loss)
            if config.checkpoint_every and config.checkpoint_path and step % config.checkpoint_every == 0:
                nn.save_checkpoint(params, config.checkpoint_path)
        val = validation_recall(model, val_ex, universe, pool, skip_window=config.skip_window_seconds)
        entry = {"epoch": epoch, "step": step,
                 "train_loss": float(np.mean(losses)) if losses else float("nan"),
                 "val_recall_at_20": val, "wall_ms": int((time.perf_counter() - t0) * 1000)}
        metrics.append(entry)
        log.info("epoch %d loss %.4f val R@20 %.4f", epoch, entry["train_loss"], val)
        if log_path is not None:
            import json
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
        if val > best[0]:
            best = (val, epoch, params.copy())
    if config.n_epochs == 0:
        best = (0.0, 0, params.copy())
    final = TwoTower(best[2], featurizer, config.user_tower)
    return TrainResult(final, metrics, best[1], counters)
