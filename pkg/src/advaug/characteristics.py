"""Per-sample training characteristics feeding the perturbation network.

Fifteen detached scalars per sample describing learning difficulty, class
distribution, and noise signals. Extraction is pure; all running state
(per-sample EMAs, feature normalization statistics) lives in History and
changes only through update_history. Nothing here sees the noise mask or
any test data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stats import ClassStats

CHARACTERISTIC_NAMES = (
    "loss",
    "loss_ema",
    "loss_zscore",
    "margin",
    "margin_ema",
    "entropy",
    "true_class_prob",
    "correct",
    "correct_ema",
    "grad_norm",
    "class_prior",
    "log_class_prior",
    "class_mean_distance",
    "progress",
    "class_loss_rank",
)

NUM_CHARACTERISTICS = len(CHARACTERISTIC_NAMES)
_LOSS, _MARGIN, _CORRECT = 0, 3, 7  # raw columns mirrored into the EMAs


@dataclass
class BatchView:
    """Detached per-batch ingredients for extraction."""

    ids: np.ndarray  # indices into the history tables
    h: np.ndarray  # n x H features
    logits: np.ndarray  # n x C plain logits
    labels: np.ndarray
    grad_h: np.ndarray  # n x H detached CE gradient
    progress: float  # t / T2 in [0, 1]


@dataclass
class CharacteristicsBatch:
    raw: np.ndarray  # n x 15
    normalized: np.ndarray  # n x 15, z-scored and clipped to [-5, 5]


class History:
    """Per-sample EMA trajectories plus feature-normalization EMAs."""

    def __init__(self, capacity: int, decay: float = 0.9):
        self.capacity = capacity
        self.decay = decay
        self.seen = np.zeros(capacity, dtype=bool)
        self.counts = np.zeros(capacity, dtype=np.intp)
        self.loss_ema = np.zeros(capacity)
        self.margin_ema = np.zeros(capacity)
        self.correct_ema = np.zeros(capacity)
        self.norm_count = 0
        self.norm_mean = np.zeros(NUM_CHARACTERISTICS)
        self.norm_sq = np.ones(NUM_CHARACTERISTICS)

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        if self.norm_count == 0:
            return np.clip(raw, -5.0, 5.0)
        var = np.maximum(self.norm_sq - self.norm_mean ** 2, 0.0)
        return np.clip((raw - self.norm_mean) / np.sqrt(var + 1e-12),
                       -5.0, 5.0)


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def extract(view: BatchView, history: History,
            stats: ClassStats) -> CharacteristicsBatch:
    """The 15 raw scalars per sample, plus their normalized variants.

    EMA-based entries fall back to the instantaneous value for samples the
    history has never seen.
    """
    n = view.ids.size
    labels = np.asarray(view.labels, dtype=np.intp)
    z = view.logits
    rows = np.arange(n)
    q = _softmax(z)
    lse = np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1)
    loss = lse - z[rows, labels]
    masked = z.copy()
    masked[rows, labels] = -np.inf
    margin = z[rows, labels] - masked.max(axis=1)
    entropy = -np.sum(q * np.log(np.maximum(q, 1e-300)), axis=1)
    correct = (z.argmax(axis=1) == labels).astype(np.float64)
    seen = history.seen[view.ids]
    loss_ema = np.where(seen, history.loss_ema[view.ids], loss)
    margin_ema = np.where(seen, history.margin_ema[view.ids], margin)
    correct_ema = np.where(seen, history.correct_ema[view.ids], correct)
    zscore = (loss - loss.mean()) / (loss.std() + 1e-12)
    grad_norm = np.linalg.norm(view.grad_h, axis=1)
    prior = stats.priors[labels]
    mean_dist = np.empty(n)
    for c in np.unique(labels):
        sel = labels == c
        spread = np.sqrt(np.trace(stats.covariance(int(c))) + 1e-12)
        mean_dist[sel] = np.linalg.norm(
            view.h[sel] - stats.means[c], axis=1) / spread
    rank = np.empty(n)
    for c in np.unique(labels):
        sel = np.flatnonzero(labels == c)
        if sel.size == 1:
            rank[sel] = 0.5
        else:
            order = np.argsort(np.argsort(loss[sel], kind="stable"),
                               kind="stable")
            rank[sel] = order / (sel.size - 1)
    raw = np.stack([
        loss, loss_ema, zscore, margin, margin_ema, entropy,
        q[rows, labels], correct, correct_ema, grad_norm, prior,
        np.log(prior), mean_dist, np.full(n, view.progress), rank,
    ], axis=1)
    return CharacteristicsBatch(raw, history.normalize(raw))


def update_history(history: History, ids: np.ndarray,
                   raw: np.ndarray) -> History:
    """Fold one extracted batch into the EMAs (decay 0.9, init-to-first)."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= history.capacity):
        raise KeyError(f"sample id out of range 0..{history.capacity - 1}")
    d = history.decay
    for table, col in [(history.loss_ema, _LOSS),
                       (history.margin_ema, _MARGIN),
                       (history.correct_ema, _CORRECT)]:
        old = table[ids]
        fresh = ~history.seen[ids]
        value = raw[:, col]
        table[ids] = np.where(fresh, value, d * old + (1 - d) * value)
    history.counts[ids] += 1
    history.seen[ids] = True
    if history.norm_count == 0:
        history.norm_mean = raw.mean(axis=0)
        history.norm_sq = (raw ** 2).mean(axis=0)
    else:
        history.norm_mean = d * history.norm_mean + (1 - d) * raw.mean(axis=0)
        history.norm_sq = d * history.norm_sq + (1 - d) * (raw ** 2).mean(axis=0)
    history.norm_count += 1
    return history
