"""Training orchestration: super-frame sampling, per-video pair mining,
reliability-weighted losses with queue negatives, optimizer steps, queue
updates, and step logging.

Positive mining always uses the current encoder and stays within-video;
gradients flow into both frames' embeddings. The instance-discrimination
baseline runs the same loop but pairs each crop with a fresh
noise-perturbed copy of itself instead of mining across frames.

``compute_step`` returns, besides the loss and parameter gradients, a
frozen context capturing every discrete or gradient-cutoff decision of
the step (mined matches, modulation weights, the batch scale, the
selected negatives). ``replay_step_value`` re-evaluates the step loss
from fresh parameters under that frozen context, which is exactly what
finite-difference checks of the analytic gradients need.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .core import LossConfig, Modulation, make_rng
from .data import (
    SuperFramePair,
    SuperFrameSide,
    SyntheticDataset,
    holdout_split,
    sample_super_frames,
)
from .encoder import Encoder
from .losses import (
    focal_loss,
    grad_wrt_similarities,
    per_anchor_loss,
    queue_loss,
    rc_batch_loss,
    rc_loss,
    reliability_from_similarities,
    total_loss,
)
from .matching import solve_assignment
from .memqueue import NegativeQueue
from .optim import AdamWState, NonFiniteGradientError, OptimConfig, adamw_step


class Objective(str, Enum):
    ISR = "isr"
    INSTANCE_DISCRIMINATION = "instance_discrimination"
    ISR_NO_RC = "isr_no_rc"
    ISR_NO_QUEUE = "isr_no_queue"
    ISR_FOCAL = "isr_focal"


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = LossConfig()
    delta_max_seconds: float = 4.0
    videos_per_super_frame: int = 4
    super_frame_budget: int = 80
    frames_per_video: int = 3
    epochs: int = 50
    samples_per_video_per_epoch: int = 16
    queue_capacity: int = 8192
    hidden_sizes: tuple[int, ...] = (64,)
    embedding_dim: int = 32
    optimizer: OptimConfig = OptimConfig()
    holdout_videos: int = 20
    seed: int = 0
    objective: Objective = Objective.ISR

    def __post_init__(self) -> None:
        for name in ("delta_max_seconds", "videos_per_super_frame", "super_frame_budget",
                     "frames_per_video", "epochs", "samples_per_video_per_epoch",
                     "queue_capacity", "embedding_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.holdout_videos < 0:
            raise ValueError("holdout_videos must be >= 0")
        object.__setattr__(self, "objective", Objective(self.objective))
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))


def effective_loss_config(cfg: TrainConfig) -> LossConfig:
    """Resolve the objective arm into concrete loss settings."""
    loss = cfg.loss
    if cfg.objective is Objective.ISR_NO_RC:
        return replace(loss, gamma=0.0)
    if cfg.objective is Objective.ISR_NO_QUEUE:
        return replace(loss, lam=0.0)
    if cfg.objective is Objective.ISR_FOCAL:
        return replace(loss, modulation=Modulation.FOCAL)
    return loss


@dataclass(frozen=True)
class StepLog:
    step: int
    epoch: int
    loss_rc: float
    loss_q: float
    loss_total: float
    alpha: float
    reliability_mean: float
    reliability_min: float
    mining_precision: float
    learning_rate: float
    wall_ms: float


STEP_LOG_COLUMNS = (
    "step", "epoch", "loss_rc", "loss_q", "loss_total", "alpha",
    "reliability_mean", "reliability_min", "mining_precision",
    "learning_rate", "wall_ms",
)


def write_step_logs(logs: list[StepLog], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(STEP_LOG_COLUMNS)
        for log in logs:
            writer.writerow([format(getattr(log, c), ".17g") if isinstance(getattr(log, c), float)
                             else getattr(log, c) for c in STEP_LOG_COLUMNS])


class TrainingAbortedError(RuntimeError):
    """Raised when training hits a non-finite loss or gradient; the result
    attached carries the last good parameter state."""

    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class VideoPlan:
    """One video's frozen mining decision inside a super-frame step."""

    video_id: int
    anchor_side: str  # "x" or "y"; anchors are the rows of the association
    anchor_slice: slice
    other_slice: slice
    matched: np.ndarray


@dataclass(frozen=True)
class FrozenStepContext:
    """Everything held constant while differentiating one step's loss."""

    plans: tuple[VideoPlan, ...]
    frozen_weights: np.ndarray
    frozen_alpha: float
    negatives: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class StepComputation:
    total: float
    rc_value: float
    q_value: float
    alpha: float
    param_grads: list[np.ndarray]
    reliability_mean: float
    reliability_min: float
    precision_agree: int
    precision_total: int
    num_anchors: int
    embeddings_x: np.ndarray
    embeddings_y: np.ndarray
    frozen: FrozenStepContext


def _common_videos(pair: SuperFramePair) -> list[int]:
    return sorted(set(pair.x.video_slices) & set(pair.y.video_slices))


def compute_step(encoder: Encoder, pair: SuperFramePair, queue: NegativeQueue | None,
                 loss_cfg: LossConfig,
                 known_self_positives: bool = False) -> StepComputation | None:
    """Loss value and exact parameter gradients for one super-frame pair.

    Returns None when no video contributes crops on both sides (nothing to
    mine, nothing to learn from). With ``known_self_positives`` the
    association is the identity instead of a mined matching.
    """
    fx, cache_x = encoder.forward(pair.x.observations)
    fy, cache_y = encoder.forward(pair.y.observations)
    ex, ey = fx.data, fy.data

    plans: list[VideoPlan] = []
    reports = []
    agree = 0
    total_pairs = 0
    for video_id in _common_videos(pair):
        sx = pair.x.video_slices[video_id]
        sy = pair.y.video_slices[video_id]
        mx, ny = sx.stop - sx.start, sy.stop - sy.start
        if known_self_positives:
            anchor_side, anchor_slice, other_slice = "x", sx, sy
            similarities = ex[:, sx].T @ ey[:, sy]
            matched = np.arange(mx, dtype=np.int64)
        else:
            if mx <= ny:
                anchor_side, anchor_slice, other_slice = "x", sx, sy
                similarities = ex[:, sx].T @ ey[:, sy]
            else:
                anchor_side, anchor_slice, other_slice = "y", sy, sx
                similarities = ey[:, sy].T @ ex[:, sx]
            matching = solve_assignment(1.0 - similarities)
            matched = np.array([j for _, j in matching.pairs], dtype=np.int64)
        report = reliability_from_similarities(similarities, matched, loss_cfg.tau)
        plans.append(VideoPlan(video_id, anchor_side, anchor_slice, other_slice, matched))
        reports.append(report)

        row_side = pair.x if anchor_side == "x" else pair.y
        col_side = pair.y if anchor_side == "x" else pair.x
        row_ids = row_side.identities[anchor_slice]
        col_ids = col_side.identities[other_slice]
        agree += int((row_ids == col_ids[matched]).sum())
        total_pairs += matched.size

    if not plans:
        return None

    reliabilities = np.concatenate([r.reliability for r in reports])
    m_total = reliabilities.size
    per_anchor = np.concatenate(
        [per_anchor_loss(r, loss_cfg.gamma, loss_cfg.modulation) for r in reports]
    )
    if loss_cfg.modulation in (Modulation.RELIABILITY_STOPGRAD, Modulation.RELIABILITY_KEPT):
        baseline = np.concatenate([rc_loss(r, 0.0) for r in reports])
        rc_value, alpha = rc_batch_loss(per_anchor, baseline)
    else:
        rc_value, alpha = float(per_anchor.mean()), 1.0
    scale = alpha / m_total

    grad_x = np.zeros_like(ex)
    grad_y = np.zeros_like(ey)
    for plan, report in zip(plans, reports):
        gs = scale * grad_wrt_similarities(report, loss_cfg.gamma, loss_cfg.modulation)
        if plan.anchor_side == "x":
            anchors, others = ex[:, plan.anchor_slice], ey[:, plan.other_slice]
            grad_x[:, plan.anchor_slice] += others @ gs.T
            grad_y[:, plan.other_slice] += anchors @ gs
        else:
            anchors, others = ey[:, plan.anchor_slice], ex[:, plan.other_slice]
            grad_y[:, plan.anchor_slice] += others @ gs.T
            grad_x[:, plan.other_slice] += anchors @ gs

    q_value = 0.0
    negatives: list[np.ndarray] = [np.zeros((encoder.embedding_dim, 0))] * m_total
    if loss_cfg.lam > 0 and queue is not None and len(queue) > 0:
        anchor_cols = []
        anchor_videos = []
        for plan in plans:
            side = ex if plan.anchor_side == "x" else ey
            anchor_cols.append(side[:, plan.anchor_slice])
            anchor_videos.append(np.full(plan.matched.size, plan.video_id, dtype=np.int64))
        anchors_mat = np.concatenate(anchor_cols, axis=1)
        videos_vec = np.concatenate(anchor_videos)
        selections = queue.select_negatives_batch(
            anchors_mat, videos_vec, loss_cfg.k, loss_cfg.negative_selection
        )
        negatives = [s.embeddings for s in selections]
        qres = queue_loss(anchors_mat, negatives)
        q_value = qres.value
        offset = 0
        for plan in plans:
            width = plan.matched.size
            block = loss_cfg.lam * qres.grad_anchors[:, offset : offset + width]
            if plan.anchor_side == "x":
                grad_x[:, plan.anchor_slice] += block
            else:
                grad_y[:, plan.anchor_slice] += block
            offset += width

    grads = encoder.backward(cache_x, grad_x)
    for g, extra in zip(grads, encoder.backward(cache_y, grad_y)):
        g += extra

    frozen = FrozenStepContext(
        plans=tuple(plans),
        frozen_weights=np.power(reliabilities, loss_cfg.gamma),
        frozen_alpha=alpha,
        negatives=tuple(negatives),
    )
    return StepComputation(
        total=total_loss(rc_value, q_value, loss_cfg.lam),
        rc_value=rc_value,
        q_value=q_value,
        alpha=alpha,
        param_grads=grads,
        reliability_mean=float(reliabilities.mean()),
        reliability_min=float(reliabilities.min()),
        precision_agree=agree,
        precision_total=total_pairs,
        num_anchors=m_total,
        embeddings_x=ex,
        embeddings_y=ey,
        frozen=frozen,
    )


def replay_step_value(encoder: Encoder, pair: SuperFramePair, frozen: FrozenStepContext,
                      loss_cfg: LossConfig) -> float:
    """Step loss as a pure function of the current parameters with every
    discrete and gradient-cutoff quantity pinned to the frozen context.

    For the stop-gradient modulation the weighting factors stay at their
    frozen values; for the kept and focal modes they are recomputed, since
    their gradients flow through the factor. The batch scale and the
    negative sets are always frozen.
    """
    ex = encoder.embed(pair.x.observations)
    ey = encoder.embed(pair.y.observations)
    per_anchor = []
    for plan in frozen.plans:
        if plan.anchor_side == "x":
            similarities = ex[:, plan.anchor_slice].T @ ey[:, plan.other_slice]
        else:
            similarities = ey[:, plan.anchor_slice].T @ ex[:, plan.other_slice]
        report = reliability_from_similarities(similarities, plan.matched, loss_cfg.tau)
        p = report.reliability
        if loss_cfg.modulation is Modulation.RELIABILITY_STOPGRAD:
            per_anchor.append(-np.log(p))  # weights applied below
        elif loss_cfg.modulation is Modulation.RELIABILITY_KEPT:
            per_anchor.append(rc_loss(report, loss_cfg.gamma))
        elif loss_cfg.modulation is Modulation.FOCAL:
            per_anchor.append(focal_loss(report, loss_cfg.gamma))
        else:
            per_anchor.append(rc_loss(report, 0.0))
    values = np.concatenate(per_anchor)
    if loss_cfg.modulation is Modulation.RELIABILITY_STOPGRAD:
        values = frozen.frozen_weights * values
    rc_value = frozen.frozen_alpha / values.size * float(values.sum())

    q_value = 0.0
    if loss_cfg.lam > 0:
        anchor_cols = []
        for plan in frozen.plans:
            side = ex if plan.anchor_side == "x" else ey
            anchor_cols.append(side[:, plan.anchor_slice])
        anchors_mat = np.concatenate(anchor_cols, axis=1)
        per = np.zeros(anchors_mat.shape[1])
        for i, negs in enumerate(frozen.negatives):
            if negs.size:
                sims = negs.T @ anchors_mat[:, i]
                per[i] = float(np.logaddexp(0.0, sims).mean())
        q_value = float(per.mean())
    return total_loss(rc_value, q_value, loss_cfg.lam)


@dataclass
class TrainResult:
    encoder: Encoder
    state: AdamWState
    logs: list[StepLog]
    config: TrainConfig
    train_video_ids: list[int]
    planned_steps: int
    skipped_steps: int = 0
    aborted: bool = False
    abort_reason: str | None = None


def _augmented_self_pair(side: SuperFrameSide, sigma: float,
                         rng: np.random.Generator) -> SuperFramePair:
    """Two fresh noise perturbations of the same crops; positives are known."""
    noise_a = sigma * rng.normal(size=side.observations.shape)
    noise_b = sigma * rng.normal(size=side.observations.shape)
    view = lambda noise: SuperFrameSide(  # noqa: E731
        observations=side.observations + noise,
        video_ids=side.video_ids,
        identities=side.identities,
        video_slices=side.video_slices,
    )
    return SuperFramePair(x=view(noise_a), y=view(noise_b))


def _chunks(order: np.ndarray, size: int) -> list[np.ndarray]:
    return [order[i : i + size] for i in range(0, len(order), size)]


def train(dataset: SyntheticDataset, cfg: TrainConfig,
          video_ids: list[int] | None = None) -> TrainResult:
    """Run the full loop; deterministic for a fixed (dataset, config, seed).

    ``video_ids`` overrides the training video set (the default trains on
    everything outside the held-out split). Raises TrainingAbortedError
    with the last good parameter state attached when a non-finite loss or
    gradient shows up.
    """
    if video_ids is None:
        video_ids, _ = holdout_split(dataset, cfg.holdout_videos)
    if not video_ids:
        raise ValueError("no training videos")
    loss_cfg = effective_loss_config(cfg)
    obs_dim = dataset.config.obs_dim
    self_positives = cfg.objective is Objective.INSTANCE_DISCRIMINATION

    rng_batch = make_rng(cfg.seed, "batching")
    rng_aug = make_rng(cfg.seed, "augmentation")
    encoder = Encoder.initialize(
        (obs_dim, *cfg.hidden_sizes, cfg.embedding_dim), make_rng(cfg.seed, "encoder-init")
    )
    groups_per_round = -(-len(video_ids) // cfg.videos_per_super_frame)
    planned_steps = cfg.epochs * cfg.samples_per_video_per_epoch * groups_per_round * 3
    state = AdamWState(encoder.parameters(), total_steps=planned_steps, cfg=cfg.optimizer)
    queue = NegativeQueue(cfg.queue_capacity, cfg.embedding_dim)

    logs: list[StepLog] = []
    skipped = 0
    step = 0
    last_good = [p.copy() for p in encoder.parameters()]

    def abort(reason: str) -> TrainResult:
        encoder.set_parameters(last_good)
        return TrainResult(
            encoder=encoder, state=state, logs=logs, config=cfg,
            train_video_ids=list(video_ids), planned_steps=planned_steps,
            skipped_steps=skipped, aborted=True, abort_reason=reason,
        )

    for epoch in range(cfg.epochs):
        for _ in range(cfg.samples_per_video_per_epoch):
            order = rng_batch.permutation(np.asarray(video_ids, dtype=np.int64))
            for group in _chunks(order, cfg.videos_per_super_frame):
                pairs = sample_super_frames(
                    [dataset.videos[int(v)] for v in group],
                    cfg.delta_max_seconds,
                    rng_batch,
                    frames_per_video=cfg.frames_per_video,
                    budget=cfg.super_frame_budget,
                )
                if self_positives:
                    pairs = [
                        _augmented_self_pair(
                            p.x, dataset.config.appearance_noise_sigma, rng_aug
                        )
                        for p in pairs
                    ]
                for pair in pairs:
                    started = time.perf_counter()
                    comp = compute_step(
                        encoder, pair, queue, loss_cfg,
                        known_self_positives=self_positives,
                    )
                    if comp is None:
                        skipped += 1
                        continue
                    if not np.isfinite(comp.total):
                        raise TrainingAbortedError(
                            f"non-finite loss at step {step}", abort("non-finite loss")
                        )
                    try:
                        lr = adamw_step(encoder.parameters(), comp.param_grads, state)
                    except NonFiniteGradientError as err:
                        raise TrainingAbortedError(
                            f"non-finite gradient at step {step}: {err}",
                            abort(str(err)),
                        ) from err
                    for target, source in zip(last_good, encoder.parameters()):
                        target[...] = source
                    queue.enqueue(
                        np.concatenate([comp.embeddings_x, comp.embeddings_y], axis=1),
                        np.concatenate([pair.x.video_ids, pair.y.video_ids]),
                    )
                    precision = (
                        comp.precision_agree / comp.precision_total
                        if comp.precision_total
                        else float("nan")
                    )
                    logs.append(
                        StepLog(
                            step=step, epoch=epoch,
                            loss_rc=comp.rc_value, loss_q=comp.q_value,
                            loss_total=comp.total, alpha=comp.alpha,
                            reliability_mean=comp.reliability_mean,
                            reliability_min=comp.reliability_min,
                            mining_precision=precision, learning_rate=lr,
                            wall_ms=(time.perf_counter() - started) * 1e3,
                        )
                    )
                    step += 1

    return TrainResult(
        encoder=encoder, state=state, logs=logs, config=cfg,
        train_video_ids=list(video_ids), planned_steps=planned_steps,
        skipped_steps=skipped,
    )


def train_instance_discrimination(dataset: SyntheticDataset, cfg: TrainConfig,
                                  video_ids: list[int] | None = None) -> TrainResult:
    """The augmented-view baseline: same loop, self-pair positives."""
    return train(dataset, replace(cfg, objective=Objective.INSTANCE_DISCRIMINATION), video_ids)


@dataclass(frozen=True)
class ScalingReport:
    rows: tuple[tuple[int, float], ...]  # (video count, seconds per run)
    slope: float


def measure_training_scaling(dataset: SyntheticDataset, sizes: list[int],
                             cfg: TrainConfig) -> ScalingReport:
    """Wall-clock of a training run at several video counts plus the
    log-log least-squares slope (1.0 means linear in the data size)."""
    if len(sizes) < 3:
        raise ValueError("need at least 3 sizes for a slope estimate")
    train_ids, _ = holdout_split(dataset, cfg.holdout_videos)
    if max(sizes) > len(train_ids):
        raise ValueError(f"largest size {max(sizes)} exceeds {len(train_ids)} training videos")
    # Warm caches and allocators before timing.
    train(dataset, cfg, video_ids=train_ids[: min(sizes)])
    rows = []
    for size in sizes:
        started = time.perf_counter()
        train(dataset, cfg, video_ids=train_ids[:size])
        rows.append((int(size), time.perf_counter() - started))
    slope = float(
        np.polyfit(np.log([s for s, _ in rows]), np.log([t for _, t in rows]), 1)[0]
    )
    return ScalingReport(rows=tuple(rows), slope=slope)
