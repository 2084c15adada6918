"""Refinement bridge: step-tunable residual updates over the selected
events, with shared-KV feature reads, self-attention, and per-query witness
injection."""

from __future__ import annotations

from dataclasses import dataclass

from . import nn_blocks as nn
from . import numerics as nm
from .numerics import Tensor


class RefineError(ValueError):
    pass


@dataclass
class RefineBlock:
    """Per-modality refinement weights.

    ``read`` and ``merge`` reuse the same K/V projection objects (the shared
    KV contract); ``merge.wq`` is additionally one object across modalities.
    """

    read: nn.MhaParams
    merge: nn.MhaParams
    self_attn: nn.MhaParams
    witness: nn.MhaParams
    ln1: nn.LayerNormParams
    ln2: nn.LayerNormParams
    ln3: nn.LayerNormParams
    ffn: nn.FfnParams


def rsb_step(z: Tensor, feats: Tensor, witnesses: Tensor, block: RefineBlock,
             delta: float) -> Tensor:
    """One refinement update: read, self-interact, inject witnesses, merge,
    advance by delta times the drift.

    The two feature reads share K/V weights, so the memory is projected once
    per step and attended twice.
    """
    if witnesses.ndim != 3 or witnesses.shape[0] != z.shape[0]:
        raise RefineError("witness-misalign: one witness set per selected event required")
    kh, vh = nn.project_kv(feats, block.read)
    u1 = nn.layer_norm(nm.add(z, nn.mha_projected(z, kh, vh, block.read)), block.ln1)
    u2 = nn.layer_norm(nm.add(u1, nn.mha(u1, u1, u1, block.self_attn)), block.ln2)
    r_wit = nn.mha_per_query(u2, witnesses, block.witness)
    merged = nm.add(nm.add(u2, r_wit), nn.mha_projected(u2, kh, vh, block.merge))
    u3 = nn.layer_norm(merged, block.ln3)
    return nm.add(z, nm.mul(nn.swiglu_ffn(u3, block.ffn), delta))


@dataclass
class RefineRun:
    z_out: Tensor
    trajectory: list[Tensor]
    step_calls: int


def rsb_run(z0: Tensor, feats: Tensor, witnesses: Tensor, steps: int,
            block: RefineBlock) -> RefineRun:
    """Run ``steps`` refinement iterations with delta = 1/steps.

    A zero-step budget passes the selected latents through unchanged.
    """
    if steps < 0 or steps % 2 != 0:
        raise RefineError("refine-steps: step budget must be even and >= 0")
    if steps == 0:
        return RefineRun(z0, [z0], 0)
    delta = 1.0 / steps
    z = z0
    trajectory = [z]
    for _ in range(steps):
        z = rsb_step(z, feats, witnesses, block, delta)
        trajectory.append(z)
    return RefineRun(z, trajectory, steps)


def probe_steps(run: RefineRun, feats: Tensor, witnesses: Tensor, block: RefineBlock,
                rho: int, fallback_delta: float) -> Tensor:
    """Append rho extra gradient-stopped steps after a finished run.

    Continues with the run's own step size when it took steps, otherwise
    with ``fallback_delta``; used only for the step-budget probes.
    """
    delta = 1.0 / run.step_calls if run.step_calls > 0 else fallback_delta
    with nm.no_grad():
        z = nm.stop_grad(run.z_out)
        for _ in range(rho):
            z = rsb_step(z, nm.stop_grad(feats), nm.stop_grad(witnesses), block, delta)
    return z
