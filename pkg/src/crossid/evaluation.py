"""Retrieval evaluation over held-out videos: CMC Rank-k and mAP.

Protocol: single gallery instance per identity, no camera filtering
(the synthetic world has no camera ids distinct from video ids);
cross-video retrieval is enforced by drawing a query's gallery instance
from a different video than the query itself. Average precision uses
the plain precision-at-each-correct-position form with no interpolation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FeatureMatrix
from .data import CropRecord, FrameSet, SyntheticDataset
from .encoder import Encoder
from .matching import EmptyFrameError, mine_positive_pairs


@dataclass(frozen=True)
class RetrievalSplit:
    """Query and gallery crop sets with hidden identity labels for scoring."""

    query: tuple[CropRecord, ...]
    gallery: tuple[CropRecord, ...]

    def __post_init__(self) -> None:
        gallery_ids = {c.true_identity for c in self.gallery}
        for crop in self.query:
            if crop.true_identity not in gallery_ids:
                raise ValueError(
                    f"query identity {crop.true_identity} is absent from the gallery"
                )
        if any(q is g for q in self.query for g in self.gallery):
            raise ValueError("query and gallery crops must be distinct records")


@dataclass(frozen=True)
class EvalReport:
    rank_1: float
    rank_5: float
    rank_10: float
    map: float
    per_query_ap: tuple[float, ...]
    num_queries: int
    num_excluded: int

    def as_row(self) -> dict[str, float | int]:
        return {
            "rank_1": self.rank_1,
            "rank_5": self.rank_5,
            "rank_10": self.rank_10,
            "map": self.map,
            "num_queries": self.num_queries,
            "num_excluded": self.num_excluded,
        }


def build_retrieval_split(dataset: SyntheticDataset, holdout_video_ids: list[int],
                          rng: np.random.Generator,
                          max_queries_per_identity: int = 2) -> RetrievalSplit:
    """Build a cross-video query/gallery split from held-out videos.

    Identities seen in at least two held-out videos get one gallery crop
    from one rng-chosen video and queries from the others. Identities seen
    in a single video contribute one gallery distractor each.
    """
    by_identity: dict[int, dict[int, list[CropRecord]]] = {}
    for vid in holdout_video_ids:
        for frame in dataset.videos[vid]:
            for crop in frame.crops:
                by_identity.setdefault(crop.true_identity, {}).setdefault(vid, []).append(crop)

    gallery: list[CropRecord] = []
    query: list[CropRecord] = []
    for identity in sorted(by_identity):
        videos = by_identity[identity]
        vids = sorted(videos)
        if len(vids) >= 2:
            gallery_vid = vids[int(rng.integers(len(vids)))]
            crops = videos[gallery_vid]
            gallery.append(crops[int(rng.integers(len(crops)))])
            others = [v for v in vids if v != gallery_vid]
            rng.shuffle(others)
            for qv in others[:max_queries_per_identity]:
                crops = videos[qv]
                query.append(crops[int(rng.integers(len(crops)))])
        else:
            crops = videos[vids[0]]
            gallery.append(crops[int(rng.integers(len(crops)))])
    order = rng.permutation(len(gallery))
    gallery = [gallery[i] for i in order]
    return RetrievalSplit(query=tuple(query), gallery=tuple(gallery))


def _stack_observations(crops: tuple[CropRecord, ...]) -> np.ndarray:
    return np.stack([np.asarray(c.observation, dtype=np.float64) for c in crops], axis=1)


def evaluate(encoder: Encoder, split: RetrievalSplit) -> EvalReport:
    """Rank the gallery per query by descending cosine similarity and score.

    Ties break deterministically by gallery index. CMC rank-k is the
    fraction of queries with a correct match in the top k; AP per query
    averages precision at each correct position; queries whose identity
    is missing from the gallery are excluded and counted.
    """
    if not split.query or not split.gallery:
        raise ValueError("split must contain at least one query and one gallery crop")
    q = encoder.embed(_stack_observations(split.query))
    g = encoder.embed(_stack_observations(split.gallery))
    query_ids = np.array([c.true_identity for c in split.query])
    gallery_ids = np.array([c.true_identity for c in split.gallery])

    sims = q.T @ g
    order = np.argsort(-sims, axis=1, kind="stable")
    matches = gallery_ids[order] == query_ids[:, None]

    hits = {1: 0, 5: 0, 10: 0}
    aps = []
    excluded = 0
    for row in matches:
        if not row.any():
            excluded += 1
            continue
        cumulative = np.cumsum(row)
        for k in hits:
            if cumulative[min(k, row.size) - 1] >= 1:
                hits[k] += 1
        positions = np.flatnonzero(row)
        precision_at = cumulative[positions] / (positions + 1)
        aps.append(float(precision_at.mean()))

    scored = len(aps)
    if scored == 0:
        raise ValueError("every query identity was absent from the gallery")
    return EvalReport(
        rank_1=hits[1] / scored,
        rank_5=hits[5] / scored,
        rank_10=hits[10] / scored,
        map=float(np.mean(aps)),
        per_query_ap=tuple(aps),
        num_queries=scored,
        num_excluded=excluded,
    )


def mining_precision(encoder: Encoder,
                     frame_pairs: list[tuple[FrameSet, FrameSet]]) -> float | None:
    """Fraction of mined positive pairs whose hidden identities agree.

    Returns None for an empty pair list. Only possible with synthetic
    ground truth; used for diagnostics and step logging.
    """
    agree = 0
    total = 0
    for frame_x, frame_y in frame_pairs:
        if not frame_x.crops or not frame_y.crops:
            continue
        fx = FeatureMatrix.from_raw(
            encoder.embed(_stack_observations(frame_x.crops))
        )
        fy = FeatureMatrix.from_raw(
            encoder.embed(_stack_observations(frame_y.crops))
        )
        try:
            assoc, swapped = mine_positive_pairs(fx, fy)
        except EmptyFrameError:
            continue
        rows, cols = (frame_y, frame_x) if swapped else (frame_x, frame_y)
        matched = assoc.matched_columns()
        for i, j in enumerate(matched):
            total += 1
            if rows.crops[i].true_identity == cols.crops[int(j)].true_identity:
                agree += 1
    if total == 0:
        return None
    return agree / total


def match_identity_agreement(row_identities: np.ndarray, col_identities: np.ndarray,
                             matched_columns: np.ndarray) -> tuple[int, int]:
    """(agreeing pairs, total pairs) for one mined association."""
    agree = int(
        (np.asarray(row_identities) == np.asarray(col_identities)[matched_columns]).sum()
    )
    return agree, int(len(matched_columns))


def export_embeddings(encoder: Encoder, crops: list[CropRecord], path: str | Path) -> None:
    """Write identity-labeled embeddings as CSV: id, video_id, d floats.

    Floats are printed with repr precision so a round-trip read is
    bit-exact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = encoder.embedding_dim
    header = ["id", "video_id"] + [f"e{i}" for i in range(dim)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        if crops:
            embeddings = encoder.embed(_stack_observations(tuple(crops)))
            for idx, crop in enumerate(crops):
                writer.writerow(
                    [crop.true_identity, crop.video_id]
                    + [format(x, ".17g") for x in embeddings[:, idx]]
                )
