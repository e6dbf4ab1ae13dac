"""Synthetic deterministic rewards: proximity to a target latent and temporal
smoothness, combined by weighted sum per temporal segment and averaged across
segments.  Both components are bounded above by zero, with equality exactly at
their optimum, so "higher is better" throughout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class RewardSpec:
    components: tuple[tuple[str, float], ...] = (("target", 0.7), ("smoothness", 0.3))
    segment_count: int = 1

    def __post_init__(self) -> None:
        if self.segment_count < 1:
            raise ConfigError(f"segment_count must be >= 1, got {self.segment_count}")
        for name, weight in self.components:
            if name not in COMPONENTS:
                raise ConfigError(
                    f"unknown reward component {name!r}; available: {sorted(COMPONENTS)}")
            if not np.isfinite(weight):
                raise ConfigError(f"weight for {name!r} is not finite")


def _frames_of(traj) -> np.ndarray:
    """Final frame latents as an (N, d) matrix, from a trajectory or raw array."""
    if hasattr(traj, "blocks"):
        return np.vstack([b.matrix() for b in traj.blocks])
    return np.atleast_2d(np.asarray(traj, dtype=np.float64))


def reward_target(traj, target: np.ndarray) -> float:
    """Negative mean squared distance of the final frame latents to a target."""
    frames = _frames_of(traj)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (frames.shape[1],):
        raise ConfigError(f"target has shape {target.shape}, frames have dim {frames.shape[1]}")
    return float(-np.mean((frames - target) ** 2))


def reward_smoothness(traj) -> float:
    """Negative mean squared consecutive-frame difference."""
    frames = _frames_of(traj)
    if frames.shape[0] < 2:
        raise ValueError(f"smoothness needs at least two frames, got {frames.shape[0]}")
    return float(-np.mean(np.diff(frames, axis=0) ** 2))


COMPONENTS = {
    "target": lambda frames, target: reward_target(frames, target),
    "smoothness": lambda frames, target: reward_smoothness(frames),
}


def composite(traj, spec: RewardSpec, target: np.ndarray | None = None) -> float:
    """Weighted component sum per temporal segment, averaged across segments."""
    frames = _frames_of(traj)
    if spec.segment_count > frames.shape[0]:
        raise ConfigError(
            f"{spec.segment_count} segments need at least that many frames, "
            f"got {frames.shape[0]}")
    if target is None:
        target = np.zeros(frames.shape[1])
    totals = []
    for seg in np.array_split(frames, spec.segment_count):
        totals.append(sum(w * COMPONENTS[name](seg, target)
                          for name, w in spec.components))
    return float(np.mean(totals))
