"""AdamW with decoupled weight decay, cosine-annealed learning rate, and
checkpoint IO.

The checkpoint format is a single file: one JSON header line describing
the architecture, step counters, schedule, and array shapes, followed by
the raw little-endian float64 parameter and moment arrays in declaration
order. Given a fixed seed the bytes are reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import ShapeMismatchError
from .encoder import Encoder

CHECKPOINT_FORMAT = "crossid-checkpoint-v1"


class NonFiniteGradientError(RuntimeError):
    """Signals an aborted step: a gradient contained NaN or infinity."""


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if self.base_lr < 0 or self.eps <= 0:
            raise ValueError("learning rate must be >= 0 and eps > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")


class AdamWState:
    """First/second moment accumulators plus the step counter."""

    def __init__(self, params: list[np.ndarray], total_steps: int, cfg: OptimConfig):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.cfg = cfg
        self.total_steps = total_steps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """base * 0.5 * (1 + cos(pi * t / T)); full rate at t=0, zero at t=T."""
    t = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamWState) -> float:
    """One decoupled-weight-decay Adam update in place; returns the learning
    rate that was applied.

    Raises:
        NonFiniteGradientError: before touching any parameter, with a
        per-array diagnostic of where the bad values were.
    """
    if len(grads) != len(params):
        raise ShapeMismatchError(f"expected {len(params)} gradient arrays, got {len(grads)}")
    bad = [
        f"param[{i}] shape {g.shape}: {np.size(g) - np.isfinite(g).sum()} non-finite"
        for i, g in enumerate(grads)
        if not np.all(np.isfinite(g))
    ]
    if bad:
        raise NonFiniteGradientError("; ".join(bad))

    cfg = state.cfg
    lr = cosine_lr(cfg.base_lr, state.step_count, state.total_steps)
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - cfg.beta1**t
    bias2 = 1.0 - cfg.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
    return lr


def save_checkpoint(path: str | Path, encoder: Encoder, state: AdamWState,
                    metadata: dict | None = None) -> None:
    """Write architecture, counters, and all arrays to a single file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = encoder.parameters()
    arrays = params + state.m + state.v
    header = {
        "format": CHECKPOINT_FORMAT,
        "layer_sizes": list(encoder.layer_sizes),
        "step_count": state.step_count,
        "total_steps": state.total_steps,
        "optimizer": asdict(state.cfg),
        "array_shapes": [list(a.shape) for a in arrays],
        "metadata": metadata or {},
    }
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[Encoder, AdamWState, dict]:
    """Rebuild the encoder and optimizer state from a checkpoint file."""
    path = Path(path)
    with path.open("rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unrecognized checkpoint format {header.get('format')!r}")
        arrays = []
        for shape in header["array_shapes"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
    layer_sizes = header["layer_sizes"]
    num_layers = len(layer_sizes) - 1
    params = arrays[: 2 * num_layers]
    encoder = Encoder(params[0::2], params[1::2])
    state = AdamWState(
        encoder.parameters(),
        total_steps=header["total_steps"],
        cfg=OptimConfig(**header["optimizer"]),
    )
    state.step_count = header["step_count"]
    state.m = arrays[2 * num_layers : 4 * num_layers]
    state.v = arrays[4 * num_layers :]
    return encoder, state, header["metadata"]
