"""FIFO embedding queue providing cross-video negatives.

Two crops count as a negative pair only when they come from different
videos, so selection always filters by the anchor's video id before
ranking by similarity. Entries are stored values detached from any
gradient flow; only the single-owner trainer mutates the queue, strictly
between optimization steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import UNIT_NORM_TOL, DegenerateVectorError, NegativeSelection, ShapeMismatchError


@dataclass(frozen=True)
class QueueEntry:
    embedding: np.ndarray
    video_id: int
    insertion_index: int


@dataclass(frozen=True)
class NegativeSelectionResult:
    """Up to k negatives for one anchor, ranked per the selection mode."""

    embeddings: np.ndarray  # (d, k') columns in rank order
    shortfall: bool         # fewer than k eligible entries existed


class NegativeQueue:
    """Fixed-capacity FIFO of (embedding, video id) entries.

    Eviction always removes the oldest entries first. Ranking ties are
    broken by insertion order (oldest first) so selection is
    deterministic.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        if dim < 2:
            raise ValueError(f"embedding dimension must be >= 2, got {dim}")
        self.capacity = capacity
        self.dim = dim
        self._embeddings = np.zeros((capacity, dim))
        self._video_ids = np.zeros(capacity, dtype=np.int64)
        self._insertion = np.zeros(capacity, dtype=np.int64)
        self._start = 0
        self._size = 0
        self._next_index = 0

    def __len__(self) -> int:
        return self._size

    @property
    def insertion_count(self) -> int:
        return self._next_index

    def _order(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        return (self._start + np.arange(self._size)) % self.capacity

    def entries(self) -> list[QueueEntry]:
        """Current entries oldest to newest (test and inspection surface)."""
        order = self._order()
        return [
            QueueEntry(
                embedding=self._embeddings[i].copy(),
                video_id=int(self._video_ids[i]),
                insertion_index=int(self._insertion[i]),
            )
            for i in order
        ]

    def enqueue(self, embeddings: np.ndarray, video_ids: np.ndarray) -> int:
        """Append a batch of unit-norm columns; returns how many entries
        were evicted to make room."""
        embeddings = np.asarray(embeddings, dtype=np.float64)
        video_ids = np.asarray(video_ids, dtype=np.int64)
        if embeddings.ndim != 2 or embeddings.shape[0] != self.dim:
            raise ShapeMismatchError(
                f"expected ({self.dim}, b) embeddings, got {embeddings.shape}"
            )
        b = embeddings.shape[1]
        if video_ids.shape != (b,):
            raise ShapeMismatchError(f"expected {b} video ids, got {video_ids.shape}")
        if b == 0:
            return 0
        norms = np.linalg.norm(embeddings, axis=0)
        if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
            raise DegenerateVectorError("queue entries must be unit-norm within 1e-6")

        evicted = max(0, self._size + b - self.capacity)
        if b >= self.capacity:
            # Only the newest ``capacity`` survive.
            keep = b - self.capacity
            self._embeddings[:] = embeddings[:, keep:].T
            self._video_ids[:] = video_ids[keep:]
            self._insertion[:] = self._next_index + np.arange(keep, b)
            self._start = 0
            self._size = self.capacity
        else:
            positions = (self._start + self._size) % self.capacity
            idx = (positions + np.arange(b)) % self.capacity
            self._embeddings[idx] = embeddings.T
            self._video_ids[idx] = video_ids
            self._insertion[idx] = self._next_index + np.arange(b)
            self._size = min(self._size + b, self.capacity)
            self._start = (self._start + evicted) % self.capacity
        self._next_index += b
        return evicted

    def _selection_order(self, sims: np.ndarray, eligible: np.ndarray,
                         mode: NegativeSelection) -> np.ndarray:
        keys = -sims if mode is NegativeSelection.MOST_SIMILAR else sims.copy()
        keys[~eligible] = np.inf
        return np.argsort(keys, kind="stable")

    def select_negatives(self, anchor: np.ndarray, anchor_video: int, k: int,
                         mode: NegativeSelection) -> NegativeSelectionResult:
        """Pick the k extreme-similarity entries from other videos.

        most_dissimilar returns the k lowest dot products, most_similar the
        k highest. Fewer than k eligible entries returns all of them with
        the shortfall flag set; an empty result is flagged the same way.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        anchor = np.asarray(anchor, dtype=np.float64)
        if anchor.shape != (self.dim,):
            raise ShapeMismatchError(f"anchor must have shape ({self.dim},)")
        mode = NegativeSelection(mode)
        order = self._order()
        eligible = self._video_ids[order] != anchor_video
        count = int(eligible.sum())
        if count == 0:
            return NegativeSelectionResult(
                embeddings=np.zeros((self.dim, 0)), shortfall=True
            )
        sims = self._embeddings[order] @ anchor
        ranked = self._selection_order(sims, eligible, mode)[: min(k, count)]
        return NegativeSelectionResult(
            embeddings=self._embeddings[order[ranked]].T.copy(),
            shortfall=count < k,
        )

    def select_negatives_batch(self, anchors: np.ndarray, anchor_videos: np.ndarray,
                               k: int, mode: NegativeSelection) -> list[NegativeSelectionResult]:
        """Vectorized ``select_negatives`` for a batch of anchor columns."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        anchors = np.asarray(anchors, dtype=np.float64)
        anchor_videos = np.asarray(anchor_videos, dtype=np.int64)
        if anchors.ndim != 2 or anchors.shape[0] != self.dim:
            raise ShapeMismatchError(f"expected ({self.dim}, m) anchors, got {anchors.shape}")
        m = anchors.shape[1]
        if anchor_videos.shape != (m,):
            raise ShapeMismatchError(f"expected {m} anchor video ids")
        mode = NegativeSelection(mode)
        if self._size == 0 or m == 0:
            return [
                NegativeSelectionResult(embeddings=np.zeros((self.dim, 0)), shortfall=True)
                for _ in range(m)
            ]
        order = self._order()
        stored = self._embeddings[order]
        videos = self._video_ids[order]
        sims = anchors.T @ stored.T  # (m, size)
        eligible = videos[None, :] != anchor_videos[:, None]
        keys = -sims if mode is NegativeSelection.MOST_SIMILAR else sims.copy()
        keys[~eligible] = np.inf
        ranked = np.argsort(keys, axis=1, kind="stable")
        counts = eligible.sum(axis=1)
        results = []
        for i in range(m):
            take = int(min(k, counts[i]))
            picks = ranked[i, :take]
            results.append(
                NegativeSelectionResult(
                    embeddings=stored[picks].T.copy(),
                    shortfall=counts[i] < k,
                )
            )
        return results
