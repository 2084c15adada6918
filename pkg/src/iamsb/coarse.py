"""Coarse bridge: few-step residual drift updates reading features through
cross-attention, with control-energy accounting and the arrival-step
diagnostic."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import nn_blocks as nn
from . import numerics as nm
from .intervals import iou_1d
from .numerics import Tensor


class BridgeError(ValueError):
    pass


@dataclass
class CoarseConfig:
    steps: int = 2          # S_c
    n_events: int = 20      # candidate count per modality
    channels: int = 32
    sigma: float = 1.0      # noise intensity, enters energy scaling only

    def __post_init__(self):
        if self.steps < 1:
            raise BridgeError("coarse-config: need at least one step")
        if self.sigma <= 0:
            raise BridgeError("coarse-config: sigma must be positive")

    @property
    def delta(self) -> float:
        return 1.0 / self.steps


@dataclass
class CoarseBlock:
    """Per-modality coarse weights; ``attn.wq`` is the shared query map."""

    attn: nn.MhaParams
    ln: nn.LayerNormParams
    ffn: nn.FfnParams
    z0: Tensor


def csb_step(z: Tensor, feats: Tensor, block: CoarseBlock,
             delta: float) -> tuple[Tensor, Tensor]:
    """One residual drift update; returns (next latent, squared drift norm)."""
    u = nn.layer_norm(nm.add(z, nn.mha(z, feats, feats, block.attn)), block.ln)
    drift = nn.swiglu_ffn(u, block.ffn)
    z_next = nm.add(z, nm.mul(drift, delta))
    return z_next, nm.square_norm(drift)


def control_energy(drift_sqs: list[Tensor], delta: float, sigma: float) -> Tensor:
    """Sum of delta * |drift|^2 / (2 sigma^2) over the recorded steps."""
    scale = delta / (2.0 * sigma * sigma)
    total = nm.as_tensor(0.0)
    for d in drift_sqs:
        total = nm.add(total, nm.mul(d, scale))
    return total


@dataclass
class CoarseRun:
    z_out: Tensor
    e_prior: Tensor
    drift_sqs: list[Tensor] = field(default_factory=list)
    trajectory: list[Tensor] = field(default_factory=list)
    step_calls: int = 0


def csb_run(z0: Tensor, feats: Tensor, cfg: CoarseConfig, block: CoarseBlock) -> CoarseRun:
    """Run S_c steps from z0 and account the prior control energy."""
    z = z0
    drift_sqs: list[Tensor] = []
    trajectory = [z]
    for _ in range(cfg.steps):
        z, d = csb_step(z, feats, block, cfg.delta)
        drift_sqs.append(d)
        trajectory.append(z)
    return CoarseRun(
        z_out=z,
        e_prior=control_energy(drift_sqs, cfg.delta, cfg.sigma),
        drift_sqs=drift_sqs,
        trajectory=trajectory,
        step_calls=cfg.steps,
    )


def arrival_step(candidate_trajectory: list[list[tuple[float, float]]],
                 targets: list[tuple[float, float]], eps: float) -> int | None:
    """Smallest step index whose candidates cover the targets within eps.

    The discrepancy at step t is the mean over targets of (1 - best IoU
    against the step-t candidate intervals).  Purely diagnostic.
    """
    if not targets:
        raise BridgeError("arrival-undefined: no targets to reach")
    if eps <= 0:
        raise BridgeError("arrival-undefined: eps must be positive")
    for t, cands in enumerate(candidate_trajectory):
        best = [max((iou_1d(c, g) for c in cands), default=0.0) for g in targets]
        discrepancy = sum(1.0 - b for b in best) / len(targets)
        if discrepancy <= eps:
            return t
    return None
