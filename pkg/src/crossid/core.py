"""Shared numeric containers, configuration records, and seeded randomness.

Everything in the loss and matching path uses 64-bit floats so that the
numerical property checks can run at tight tolerances. All containers
are immutable after construction and all functions here are pure.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

UNIT_NORM_TOL = 1e-6
ZERO_NORM_FLOOR = 1e-12


class DegenerateVectorError(ValueError):
    """Raised when a vector with (near-)zero norm cannot be normalized."""


class ShapeMismatchError(ValueError):
    """Raised when operands do not agree on a shared dimension."""


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm, preserving its direction.

    Raises:
        DegenerateVectorError: if the norm is below 1e-12.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ShapeMismatchError(f"expected a non-empty vector, got shape {v.shape}")
    norm = float(np.linalg.norm(v))
    if norm < ZERO_NORM_FLOOR:
        raise DegenerateVectorError(f"cannot normalize vector with norm {norm!r}")
    return v / norm


def l2_normalize_columns(a: np.ndarray, clamp: bool = False) -> np.ndarray:
    """Normalize each column of ``a`` to unit norm.

    With ``clamp=True`` the denominator is floored at 1e-12 instead of
    raising, which is the guard the encoder uses on its pre-normalization
    activations.
    """
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=0)
    if clamp:
        return a / np.maximum(norms, ZERO_NORM_FLOOR)
    if np.any(norms < ZERO_NORM_FLOOR):
        raise DegenerateVectorError("zero-norm column encountered")
    return a / norms


@dataclass(frozen=True)
class FeatureMatrix:
    """d x m column set of unit-norm embeddings for one frame's crops.

    Column order mirrors the originating frame. Every column must have
    Euclidean norm 1 within 1e-6; d >= 2 and m >= 0.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        data = _freeze(self.data)
        if data.ndim != 2:
            raise ShapeMismatchError(f"feature matrix must be 2-d, got {data.ndim}-d")
        d, m = data.shape
        if d < 2:
            raise ShapeMismatchError(f"embedding dimension must be >= 2, got {d}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature matrix contains non-finite entries")
        if m > 0:
            norms = np.linalg.norm(data, axis=0)
            if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
                raise DegenerateVectorError(
                    "feature matrix columns must be unit-norm within 1e-6"
                )
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def num_columns(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_raw(cls, columns: np.ndarray) -> "FeatureMatrix":
        """Build a FeatureMatrix by normalizing each column of ``columns``."""
        return cls(l2_normalize_columns(np.asarray(columns, dtype=np.float64)))


@dataclass(frozen=True)
class AssociationMatrix:
    """Boolean m x n matching between two frames' crop sets.

    Every row sums to exactly 1, every column to 0 or 1, and m <= n.
    """

    entries: np.ndarray

    def __post_init__(self) -> None:
        entries = np.array(self.entries, dtype=bool, copy=True)
        if entries.ndim != 2:
            raise ShapeMismatchError("association matrix must be 2-d")
        m, n = entries.shape
        if m > n:
            raise ShapeMismatchError(f"association requires m <= n, got {m} x {n}")
        if m > 0:
            if not np.all(entries.sum(axis=1) == 1):
                raise ValueError("every row must contain exactly one match")
            if np.any(entries.sum(axis=0) > 1):
                raise ValueError("every column may be matched at most once")
        entries.flags.writeable = False
        object.__setattr__(self, "entries", entries)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def matched_columns(self) -> np.ndarray:
        """Column index matched to each row, as an (m,) int array."""
        return np.argmax(self.entries, axis=1)

    @classmethod
    def from_matched_columns(cls, columns: np.ndarray, num_columns: int) -> "AssociationMatrix":
        columns = np.asarray(columns, dtype=np.int64)
        entries = np.zeros((columns.size, num_columns), dtype=bool)
        entries[np.arange(columns.size), columns] = True
        return cls(entries)


class NegativeSelection(str, Enum):
    """How queue negatives are ranked against an anchor."""

    MOST_SIMILAR = "most_similar"
    MOST_DISSIMILAR = "most_dissimilar"


class Modulation(str, Enum):
    """Which per-pair weighting the contrastive loss applies."""

    RELIABILITY_STOPGRAD = "reliability_stopgrad"
    RELIABILITY_KEPT = "reliability_kept"
    FOCAL = "focal"
    NONE = "none"


@dataclass(frozen=True)
class LossConfig:
    """Hyper-parameters of the training objective.

    tau: softmax temperature of the reliability score, > 0.
    gamma: strictness of the reliability weighting, >= 0.
    k: negatives drawn from the queue per anchor, >= 1.
    lam: weight of the queue loss in the total objective, >= 0.
    """

    tau: float = 0.1
    gamma: float = 6.0
    k: int = 16
    lam: float = 5.0
    negative_selection: NegativeSelection = NegativeSelection.MOST_SIMILAR
    modulation: Modulation = Modulation.RELIABILITY_STOPGRAD

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        object.__setattr__(self, "negative_selection", NegativeSelection(self.negative_selection))
        object.__setattr__(self, "modulation", Modulation(self.modulation))


def cosine_cost(x: FeatureMatrix, y: FeatureMatrix) -> np.ndarray:
    """Pairwise cosine distance 1 - x_i . y_j between two column sets.

    Entries lie in [0, 2] for unit-norm inputs. The transpose of
    cosine_cost(x, y) equals cosine_cost(y, x).
    """
    if x.dim != y.dim:
        raise ShapeMismatchError(f"dimension mismatch: {x.dim} vs {y.dim}")
    return 1.0 - x.data.T @ y.data


def derive_seed(seed: int, purpose: str) -> int:
    """Derive a stable 64-bit sub-seed from a root seed and a purpose label.

    Uses SHA-256 so the mapping is identical across platforms and runs.
    """
    digest = hashlib.sha256(f"{int(seed)}|{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, purpose: str = "") -> np.random.Generator:
    """Deterministic generator; identical (seed, purpose) gives identical streams."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, purpose)))
