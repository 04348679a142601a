"""Synthetic video streams of pedestrian-crop observation vectors.

Each world holds a pool of unit-norm identity prototypes. Every video
draws a fixed identity subset and its own camera transform (a shared
base map plus a per-video perturbation); a crop's observation is the
camera transform applied to the identity's current latent state plus
isotropic noise. Identity presence follows a per-identity Markov chain
whose marginal matches ``presence_prob``, and a slow latent drift makes
nearby frames look alike while distant frames diverge; together these
give the world an identity-turnover timescale, so the maximum pair
interval trades off contrast against mismatches. Frame dropout removes
one present identity from a fraction of frames, creating pedestrians
with no cross-frame partner.

Generation is deterministic: per-video substreams are derived from the
world seed, so video v is bit-identical across worlds that share a seed,
and the on-disk format (JSON manifest plus raw little-endian float32
observations) is byte-stable across platforms.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import make_rng

MANIFEST_NAME = "manifest.json"
OBSERVATIONS_NAME = "observations.f32"
DATASET_FORMAT = "crossid-dataset-v1"


class NoEligiblePairError(ValueError):
    """Raised when a video has no frame pair within the interval bound."""


@dataclass(frozen=True)
class WorldConfig:
    """All knobs of the synthetic world.

    presence_dwell_frames sets the Markov persistence of identity
    presence (mean consecutive present frames); drift_scale and
    drift_correlation_frames control the slow per-identity latent drift.
    Both give the stream its turnover timescale.
    """

    num_identities: int = 200
    identity_dim: int = 16
    obs_dim: int = 48
    num_videos: int = 100
    identities_per_video: int = 8
    frames_per_video: int = 40
    frame_interval_seconds: float = 7.0 / 30.0
    presence_prob: float = 0.85
    appearance_noise_sigma: float = 0.05
    camera_shift_sigma: float = 0.4
    dropout_rate: float = 0.0
    seed: int = 0
    presence_dwell_frames: float = 8.0
    drift_scale: float = 0.6
    drift_correlation_frames: float = 6.0

    def __post_init__(self) -> None:
        if self.identities_per_video > self.num_identities:
            raise ValueError(
                f"identities_per_video ({self.identities_per_video}) exceeds "
                f"num_identities ({self.num_identities})"
            )
        if self.obs_dim < self.identity_dim:
            raise ValueError(
                f"obs_dim ({self.obs_dim}) must be >= identity_dim ({self.identity_dim})"
            )
        if not 0.0 < self.presence_prob <= 1.0:
            raise ValueError(f"presence_prob must be in (0, 1], got {self.presence_prob}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        for name in ("num_identities", "identity_dim", "num_videos",
                     "identities_per_video", "frames_per_video"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.frame_interval_seconds <= 0:
            raise ValueError("frame_interval_seconds must be positive")
        if self.presence_dwell_frames < 1.0:
            raise ValueError("presence_dwell_frames must be >= 1")
        if self.drift_correlation_frames < 1.0:
            raise ValueError("drift_correlation_frames must be >= 1")


@dataclass(frozen=True)
class CropRecord:
    """One detected crop: observation vector plus hidden ground truth.

    ``true_identity`` exists only for evaluation and diagnostics; the
    learner never sees it.
    """

    observation: np.ndarray  # (obs_dim,) float32
    video_id: int
    frame_index: int
    timestamp_seconds: float
    true_identity: int


@dataclass(frozen=True)
class FrameSet:
    video_id: int
    frame_index: int
    timestamp_seconds: float
    crops: tuple[CropRecord, ...]


@dataclass(frozen=True)
class SyntheticDataset:
    config: WorldConfig
    videos: tuple[tuple[FrameSet, ...], ...]  # videos[v][t]

    @property
    def num_videos(self) -> int:
        return len(self.videos)


def _presence_transition(presence_prob: float, dwell_frames: float) -> tuple[float, float]:
    """Markov chain (stay-present, become-present) with the requested
    stationary presence probability and mean present dwell."""
    if presence_prob >= 1.0:
        return 1.0, 1.0
    stay = 1.0 - 1.0 / dwell_frames
    become = presence_prob * (1.0 - stay) / (1.0 - presence_prob)
    if become > 1.0:
        become = 1.0
        stay = (2.0 * presence_prob - 1.0) / presence_prob
    return stay, become


def _generate_video(cfg: WorldConfig, prototypes: np.ndarray, base_camera: np.ndarray,
                    video_id: int) -> tuple[FrameSet, ...]:
    rng = make_rng(cfg.seed, f"video-{video_id}")
    ids = np.sort(rng.choice(cfg.num_identities, size=cfg.identities_per_video, replace=False))
    camera = base_camera + cfg.camera_shift_sigma * rng.normal(
        size=base_camera.shape
    ) / np.sqrt(cfg.obs_dim)

    stay, become = _presence_transition(cfg.presence_prob, cfg.presence_dwell_frames)
    present = rng.random(cfg.identities_per_video) < cfg.presence_prob

    # Scales are expressed as vector norms relative to the unit-norm
    # identity prototype: a drift_scale of 0.5 means the drift vector has
    # expected norm half the identity signal.
    drift_sigma = cfg.drift_scale / np.sqrt(cfg.identity_dim)
    noise_sigma = cfg.appearance_noise_sigma / np.sqrt(cfg.obs_dim)
    rho = float(np.exp(-1.0 / cfg.drift_correlation_frames))
    drift = drift_sigma * rng.normal(size=(cfg.identities_per_video, cfg.identity_dim))

    frames = []
    for t in range(cfg.frames_per_video):
        if t > 0:
            stay_draw = rng.random(cfg.identities_per_video)
            present = np.where(present, stay_draw < stay, stay_draw < become)
            drift = rho * drift + cfg.drift_scale * np.sqrt(1.0 - rho * rho) * rng.normal(
                size=drift.shape
            )
        visible = present.copy()
        if cfg.dropout_rate > 0 and rng.random() < cfg.dropout_rate:
            on = np.flatnonzero(visible)
            if on.size:
                visible[on[rng.integers(on.size)]] = False

        crops = []
        timestamp = t * cfg.frame_interval_seconds
        for slot in np.flatnonzero(visible):
            latent = prototypes[:, ids[slot]] + drift[slot]
            obs = camera @ latent + cfg.appearance_noise_sigma * rng.normal(size=cfg.obs_dim)
            crops.append(
                CropRecord(
                    observation=obs.astype(np.float32),
                    video_id=video_id,
                    frame_index=t,
                    timestamp_seconds=timestamp,
                    true_identity=int(ids[slot]),
                )
            )
        frames.append(
            FrameSet(
                video_id=video_id,
                frame_index=t,
                timestamp_seconds=timestamp,
                crops=tuple(crops),
            )
        )
    return tuple(frames)


def generate_world(cfg: WorldConfig) -> SyntheticDataset:
    """Generate the full labeled stream for one world configuration."""
    proto_rng = make_rng(cfg.seed, "prototypes")
    prototypes = proto_rng.normal(size=(cfg.identity_dim, cfg.num_identities))
    prototypes /= np.linalg.norm(prototypes, axis=0)

    camera_rng = make_rng(cfg.seed, "camera-base")
    gaussian = camera_rng.normal(size=(cfg.obs_dim, cfg.identity_dim))
    base_camera, _ = np.linalg.qr(gaussian)

    videos = tuple(
        _generate_video(cfg, prototypes, base_camera, v) for v in range(cfg.num_videos)
    )
    return SyntheticDataset(config=cfg, videos=videos)


def _eligible_pair_windows(video: tuple[FrameSet, ...], delta_max: float) -> np.ndarray:
    """For each frame i, the count of later frames within delta_max."""
    times = np.array([f.timestamp_seconds for f in video])
    counts = np.searchsorted(times, times + delta_max, side="right") - np.arange(len(times)) - 1
    return counts


def sample_frame_pair(video: tuple[FrameSet, ...], delta_max_seconds: float,
                      rng: np.random.Generator) -> tuple[FrameSet, FrameSet]:
    """Two distinct frames with |t1 - t2| <= delta_max, uniform over all
    eligible unordered pairs, returned in time order.

    Raises:
        NoEligiblePairError: when no pair satisfies the bound; callers skip
        the video.
    """
    counts = _eligible_pair_windows(video, delta_max_seconds)
    total = int(counts.sum())
    if total == 0:
        raise NoEligiblePairError("no frame pair within the interval bound")
    draw = int(rng.integers(total))
    cumulative = np.cumsum(counts)
    i = int(np.searchsorted(cumulative, draw, side="right"))
    offset = draw - (int(cumulative[i - 1]) if i else 0)
    return video[i], video[i + 1 + offset]


def sample_frame_triple(video: tuple[FrameSet, ...], delta_max_seconds: float,
                        rng: np.random.Generator) -> tuple[FrameSet, FrameSet, FrameSet] | None:
    """Three distinct frames whose total time span stays within delta_max,
    uniform over eligible triples; None when the video has none.

    A span bound on the triple keeps every one of its three pairs inside
    the interval bound.
    """
    window = _eligible_pair_windows(video, delta_max_seconds)
    triple_counts = window * (window - 1) // 2
    total = int(triple_counts.sum())
    if total == 0:
        return None
    draw = int(rng.integers(total))
    cumulative = np.cumsum(triple_counts)
    i = int(np.searchsorted(cumulative, draw, side="right"))
    inner = draw - (int(cumulative[i - 1]) if i else 0)
    # Decode the inner index into an ordered pair (a, b) within the window.
    w = int(window[i])
    a = 0
    remaining = inner
    while remaining >= w - 1 - a:
        remaining -= w - 1 - a
        a += 1
    b = a + 1 + remaining
    return video[i], video[i + 1 + a], video[i + 1 + b]


@dataclass(frozen=True)
class SuperFrameSide:
    """One side of a merged frame pair, columns sorted by (video, crop)."""

    observations: np.ndarray  # (obs_dim, M) float64
    video_ids: np.ndarray     # (M,)
    identities: np.ndarray    # (M,) hidden ground truth
    video_slices: dict[int, slice] = field(repr=False, default_factory=dict)

    @property
    def num_crops(self) -> int:
        return self.observations.shape[1]


@dataclass(frozen=True)
class SuperFramePair:
    x: SuperFrameSide
    y: SuperFrameSide


def _assemble_side(frames: list[FrameSet], obs_dim: int, budget: int) -> SuperFrameSide:
    frames = sorted(frames, key=lambda f: f.video_id)
    columns: list[np.ndarray] = []
    video_ids: list[int] = []
    identities: list[int] = []
    slices: dict[int, slice] = {}
    for frame in frames:
        start = len(columns)
        for crop in frame.crops:
            if len(columns) >= budget:
                break
            columns.append(np.asarray(crop.observation, dtype=np.float64))
            video_ids.append(crop.video_id)
            identities.append(crop.true_identity)
        if len(columns) > start:
            slices[frame.video_id] = slice(start, len(columns))
        if len(columns) >= budget:
            break
    observations = (
        np.stack(columns, axis=1) if columns else np.zeros((obs_dim, 0))
    )
    return SuperFrameSide(
        observations=observations,
        video_ids=np.array(video_ids, dtype=np.int64),
        identities=np.array(identities, dtype=np.int64),
        video_slices=slices,
    )


def sample_super_frames(videos: list[tuple[FrameSet, ...]], delta_max_seconds: float,
                        rng: np.random.Generator, frames_per_video: int = 3,
                        budget: int = 80) -> list[SuperFramePair]:
    """Merge per-video frame pairs from several videos into super-frame pairs.

    Each eligible video contributes ``frames_per_video`` sampled frames
    teamed into all pairwise combinations; pair slot t of every video is
    merged into super-frame pair t. Sides are capped at ``budget`` crops
    with truncation ordered by (video id, crop index). Videos with no
    eligible frame set are skipped. Positive mining stays within-video.
    """
    if frames_per_video != 3:
        raise ValueError("frame teaming is defined for 3 frames per video")
    per_video_pairs: list[list[tuple[FrameSet, FrameSet]]] = []
    for video in videos:
        triple = sample_frame_triple(video, delta_max_seconds, rng)
        if triple is None:
            continue
        a, b, c = triple
        per_video_pairs.append([(a, b), (a, c), (b, c)])
    if not per_video_pairs:
        return []
    obs_dim = len(per_video_pairs[0][0][0].crops[0].observation) if any(
        p[0][0].crops for p in per_video_pairs
    ) else 0
    pairs = []
    for slot in range(3):
        x_frames = [p[slot][0] for p in per_video_pairs]
        y_frames = [p[slot][1] for p in per_video_pairs]
        pairs.append(
            SuperFramePair(
                x=_assemble_side(x_frames, obs_dim, budget),
                y=_assemble_side(y_frames, obs_dim, budget),
            )
        )
    return pairs


def holdout_split(dataset: SyntheticDataset, holdout_videos: int) -> tuple[list[int], list[int]]:
    """(train video ids, held-out video ids); the last ids are held out."""
    if not 0 <= holdout_videos < dataset.num_videos:
        raise ValueError(
            f"holdout_videos must be in [0, {dataset.num_videos}), got {holdout_videos}"
        )
    cut = dataset.num_videos - holdout_videos
    return list(range(cut)), list(range(cut, dataset.num_videos))


def save_dataset(dataset: SyntheticDataset, out_dir: str | Path) -> None:
    """Write the manifest and raw observation binary; byte-stable per seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    video_table = []
    blocks = []
    count = 0
    for video in dataset.videos:
        frame_table = []
        for frame in video:
            for crop in frame.crops:
                blocks.append(np.asarray(crop.observation, dtype="<f4"))
            count += len(frame.crops)
            frame_table.append(
                {
                    "frame_index": frame.frame_index,
                    "timestamp_seconds": frame.timestamp_seconds,
                    "identities": [c.true_identity for c in frame.crops],
                }
            )
        video_table.append({"video_id": video[0].video_id, "frames": frame_table})
    manifest = {
        "format": DATASET_FORMAT,
        "world": asdict(dataset.config),
        "observation_count": count,
        "observation_dim": dataset.config.obs_dim,
        "videos": video_table,
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n",
        encoding="utf-8",
    )
    flat = (
        np.concatenate([b.ravel() for b in blocks]) if blocks else np.zeros(0, dtype="<f4")
    )
    (out_dir / OBSERVATIONS_NAME).write_bytes(flat.astype("<f4").tobytes())


def load_dataset(in_dir: str | Path) -> SyntheticDataset:
    """Reconstruct a dataset from its manifest and observation binary."""
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unrecognized dataset format {manifest.get('format')!r}")
    cfg = WorldConfig(**manifest["world"])
    raw = np.frombuffer((in_dir / OBSERVATIONS_NAME).read_bytes(), dtype="<f4")
    expected = manifest["observation_count"] * manifest["observation_dim"]
    if raw.size != expected:
        raise ValueError(
            f"observation binary holds {raw.size} floats, manifest expects {expected}"
        )
    dim = manifest["observation_dim"]
    cursor = 0
    videos = []
    for video_entry in manifest["videos"]:
        frames = []
        vid = video_entry["video_id"]
        for frame_entry in video_entry["frames"]:
            crops = []
            for identity in frame_entry["identities"]:
                obs = raw[cursor : cursor + dim].copy()
                cursor += dim
                crops.append(
                    CropRecord(
                        observation=obs,
                        video_id=vid,
                        frame_index=frame_entry["frame_index"],
                        timestamp_seconds=frame_entry["timestamp_seconds"],
                        true_identity=int(identity),
                    )
                )
            frames.append(
                FrameSet(
                    video_id=vid,
                    frame_index=frame_entry["frame_index"],
                    timestamp_seconds=frame_entry["timestamp_seconds"],
                    crops=tuple(crops),
                )
            )
        videos.append(tuple(frames))
    return SyntheticDataset(config=cfg, videos=tuple(videos))
