"""Shared builders for the test suite."""

from __future__ import annotations

import functools
from types import SimpleNamespace

import numpy as np

from embrec import nn
from embrec.synth import CorpusConfig, build_dataset, generate_corpus_with_truth
from embrec.text import build_vocab
from embrec.towers import FeatureBank, Featurizer, ItemFeatures
from embrec.training import batch_loss_and_grads

MICRO_FEATURES = [
    ItemFeatures((2, 3), (2,), 0),      # history
    ItemFeatures((4,), (3,), 1),        # history
    ItemFeatures((5, 6, 2), (), 2),     # history (query-like, no aspects)
    ItemFeatures((3,), (2, 3), 0),      # positive
    ItemFeatures((6,), (), 3),          # negative, UNKNOWN category
    ItemFeatures((2, 4), (3,), 1),      # negative
]


def micro_featurizer() -> Featurizer:
    titles = build_vocab(["red", "shoe", "lamp", "oak", "wool"], 7)
    aspects = build_vocab(["color:red", "brand:acme"], 4)
    return Featurizer(titles, aspects, 3)


def micro_problem(precision: str = "float32", kind: str = "recurrent", seed: int = 0):
    """D=8, L=1, H=8 model; one user with a 3-event history, 2 negatives.

    Returns ``(params, loss_fn)`` where ``loss_fn(tensors) -> (loss, grads)``.
    """
    hp = nn.HyperParams(D=8, D_text=8, D_category=8, L=1, H=8, precision=precision, rng_seed=seed)
    f = micro_featurizer()
    params = nn.ModelParams.init(hp, len(f.title_vocab), len(f.aspect_vocab), f.category_rows)
    bank = FeatureBank(f, dtype=hp.dtype)
    rows = [bank.add(x) for x in MICRO_FEATURES]
    examples = [SimpleNamespace(positive_row=rows[3])]
    histories = [(np.array(rows[:3]), np.array([0, 1, 1]))]
    negatives = np.array([[rows[4], rows[5]]])

    def loss_fn(tensors):
        params.tensors = tensors
        return batch_loss_and_grads(params, kind, bank, examples, histories, negatives)

    return params, loss_fn


def desk_config(seed: int, **kw) -> CorpusConfig:
    """Corpus used by the learning-signal acceptance checks."""
    base = dict(n_users=4000, n_items=5000, n_latent_interests=10, rng_seed=seed)
    base.update(kw)
    return CorpusConfig(**base)


@functools.lru_cache(maxsize=8)
def corpus_and_split(cfg_items: tuple):
    cfg = CorpusConfig(**dict(cfg_items))
    corpus = generate_corpus_with_truth(cfg)
    return cfg, corpus, build_dataset(corpus.items, corpus.events, corpus.impressions, cfg)


def small_world(seed: int = 0, n_users: int = 200, n_items: int = 600, **kw):
    items = dict(n_users=n_users, n_items=n_items, n_latent_interests=6, rng_seed=seed, **kw)
    return corpus_and_split(tuple(sorted(items.items())))


def desk_hyper(seed: int = 0, **kw) -> nn.HyperParams:
    base = dict(negatives_per_positive=50, batch_size=64, epochs=15, rng_seed=seed)
    base.update(kw)
    return nn.HyperParams(**base)
