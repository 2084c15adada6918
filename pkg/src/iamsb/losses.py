"""Training objective: localization loss (matching, negative, and coverage
terms), directional margin-ranking loss, and the step-budget regularizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .intervals import eiou, match_events
from .nn_blocks import DecodedEvents
from .numerics import Tensor
from .synth import FLAG_AUDIO, FLAG_BOTH, FLAG_VISUAL


@dataclass
class LossConfig:
    beta: float = 5.0            # coverage sharpness
    margin: float = 0.25         # m_0 ranking margin
    lambda_rank: float = 0.2
    lambda_svn: float = 0.2
    huber_delta: float = 0.1
    rho: int = 2                 # step granularity
    step_set: tuple[int, ...] = (0, 2)  # selectable per-candidate increments
    iou_floor: float = 0.1

    def __post_init__(self):
        if self.beta <= 0 or self.margin <= 0:
            raise ValueError("loss-config: beta and margin must be positive")
        if self.lambda_rank < 0 or self.lambda_svn < 0:
            raise ValueError("loss-config: loss weights must be >= 0")
        if self.rho < 1 or any(s % self.rho for s in self.step_set):
            raise ValueError("loss-config: step set must be multiples of rho")


def bce(p: Tensor, target: int) -> Tensor:
    """Binary cross-entropy against a constant 0/1 target, input clamped
    away from the log singularities."""
    p = nm.clamp(p, 1e-12, 1.0 - 1e-12)
    if target == 1:
        return nm.neg(nm.log(p))
    return nm.neg(nm.log(nm.sub(1.0, p)))


def _iou_vector(starts: Tensor, durs: Tensor, gt: tuple[float, float]) -> Tensor:
    """Differentiable IoU of every (start, dur) row against one ground truth."""
    gs, gl = gt
    ends = nm.add(starts, durs)
    inter = nm.relu(nm.sub(nm.minimum(ends, gs + gl), nm.maximum(starts, gs)))
    union = nm.sub(nm.add(durs, gl), inter)
    return nm.div(inter, union)


def _eiou_tensor(s: Tensor, d: Tensor, gs, gl) -> Tensor:
    """Differentiable extended IoU; all arguments broadcast elementwise."""
    ge = gs + gl
    e = nm.add(s, d)
    inter = nm.relu(nm.sub(nm.minimum(e, ge), nm.maximum(s, gs)))
    union = nm.sub(nm.add(d, gl), inter)
    iou = nm.div(inter, union)
    enclose = nm.sub(nm.maximum(e, ge), nm.minimum(s, gs))
    d_center = nm.sub(nm.mul(nm.add(s, e), 0.5), (gs + ge) / 2.0)
    d_len = nm.sub(d, gl)
    pen_c = nm.mul(nm.div(d_center, enclose), nm.div(d_center, enclose))
    pen_l = nm.mul(nm.div(d_len, enclose), nm.div(d_len, enclose))
    return nm.sub(nm.sub(iou, pen_c), pen_l)


def pair_regression(s: Tensor, d: Tensor, gt: tuple[float, float],
                    huber_delta: float) -> Tensor:
    """(1 - EIoU) plus Huber on the normalized start/duration residuals.

    This is the per-candidate objective unit that the step-budget probes
    re-measure after extra refinement steps; vectorizes over candidates when
    s, d and the gt components are arrays.
    """
    gs, gl = gt
    penalty = nm.sub(1.0, _eiou_tensor(s, d, gs, gl))
    h = nm.add(nm.huber(nm.sub(s, gs), huber_delta),
               nm.huber(nm.sub(d, gl), huber_delta))
    return nm.add(penalty, h)


def pair_regression_value(s: float, d: float, gt: tuple[float, float],
                          huber_delta: float) -> float:
    """Float twin of ``pair_regression`` for gradient-stopped probes."""
    def hub(x):
        return 0.5 * x * x if abs(x) <= huber_delta else huber_delta * (abs(x) - 0.5 * huber_delta)

    gs, gl = gt
    return (1.0 - eiou((s, s + d), (gs, gs + gl))) + hub(s - gs) + hub(d - gl)


@dataclass
class LocBreakdown:
    loss: Tensor
    matched: list[tuple[int, int]] = field(default_factory=list)
    unmatched: list[int] = field(default_factory=list)
    kappa: dict[int, Tensor] = field(default_factory=dict)       # pred idx -> pair objective
    pair_gt: dict[int, tuple[float, float]] = field(default_factory=dict)


def loc_loss(decoded: DecodedEvents, gts: list[tuple[float, float]], cfg: LossConfig,
             matching: tuple[list, list] | None = None) -> LocBreakdown:
    """Localization loss over one modality's decoded candidates.

    matched pairs: (1 - EIoU) + Huber + BCE(conf, 1); unmatched candidates:
    BCE(conf, 0); every ground truth adds exp(-beta * best IoU), with an
    empty prediction set contributing exp(0) per gt.
    """
    triples = decoded.triples()
    bounds = [(s, s + d) for s, d, _ in triples]
    gt_bounds = [(s, s + d) for s, d in gts]
    if matching is None:
        matched, unmatched = match_events(bounds, gt_bounds, cfg.iou_floor)
    else:
        matched, unmatched = matching
    total = nm.as_tensor(0.0)
    out = LocBreakdown(loss=total, matched=matched, unmatched=list(unmatched))
    if matched:
        p_idx = np.array([p for p, _ in matched], dtype=np.intp)
        gs = np.array([gts[g][0] for _, g in matched])
        gl = np.array([gts[g][1] for _, g in matched])
        kappa_vec = pair_regression(nm.gather(decoded.start, p_idx),
                                    nm.gather(decoded.dur, p_idx),
                                    (gs, gl), cfg.huber_delta)
        for row, (p, g) in enumerate(matched):
            out.kappa[p] = nm.pick(kappa_vec, row)
            out.pair_gt[p] = gts[g]
        total = nm.add(total, nm.tsum(kappa_vec))
        total = nm.add(total, nm.tsum(bce(nm.gather(decoded.conf, p_idx), 1)))
    if unmatched:
        u_idx = np.array(unmatched, dtype=np.intp)
        total = nm.add(total, nm.tsum(bce(nm.gather(decoded.conf, u_idx), 0)))
    for gt in gts:
        if len(decoded) == 0:
            total = nm.add(total, 1.0)
            continue
        best = nm.amax(_iou_vector(decoded.start, decoded.dur, gt))
        total = nm.add(total, nm.exp(nm.mul(best, -cfg.beta)))
    out.loss = total
    return out


def forged_side(events: list[tuple[float, float, int]]) -> str:
    has_a = any(f in (FLAG_AUDIO, FLAG_BOTH) for _, _, f in events)
    has_v = any(f in (FLAG_VISUAL, FLAG_BOTH) for _, _, f in events)
    if has_a and has_v:
        return "both"
    if has_a:
        return "audio"
    if has_v:
        return "visual"
    return "none"


def rank_loss(s_hat: Tensor, side: str, margin: float) -> Tensor:
    """Hinge pushing the forged side's directional scale ``margin`` above the
    clean side's; zero when both or neither modality is forged."""
    if side == "audio":
        gap = nm.sub(nm.pick(s_hat, 0), nm.pick(s_hat, 1))
    elif side == "visual":
        gap = nm.sub(nm.pick(s_hat, 1), nm.pick(s_hat, 0))
    else:
        return nm.as_tensor(0.0)
    return nm.relu(nm.sub(margin, gap))


ProbePair = tuple[Tensor, float]  # (objective at s, objective at s + rho)


def _mean_degradation(probes: list[ProbePair]) -> Tensor:
    # Both probe values enter gradient-stopped: a live objective-at-s would
    # be pushed UP whenever its modality's hinge is active (degrading the
    # baseline is the cheapest way to shrink the degradation gap), which
    # reverses localization training.  The term monitors imbalance only.
    if not probes:
        return nm.as_tensor(0.0)
    total = nm.as_tensor(0.0)
    for at_s, at_probe in probes:
        total = nm.add(total, nm.relu(nm.sub(at_probe, nm.stop_grad(at_s))))
    return nm.mul(total, 1.0 / max(1, len(probes)))


def svn_loss(probes_a: list[ProbePair], probes_v: list[ProbePair],
             budget_a: tuple[int, int], budget_v: tuple[int, int], rho: int) -> Tensor:
    """Step-budget regularizer comparing per-step marginal degradation across
    modalities, weighted by the realized budgets.

    budget_m is (selected count, refinement steps) for that modality.
    """
    deg_a = _mean_degradation(probes_a)
    deg_v = _mean_degradation(probes_v)
    coef_a = budget_a[0] * budget_a[1] / rho
    coef_v = budget_v[0] * budget_v[1] / rho
    return nm.add(nm.mul(nm.relu(nm.sub(deg_v, deg_a)), coef_a),
                  nm.mul(nm.relu(nm.sub(deg_a, deg_v)), coef_v))


def total_loss(loc_a: Tensor, loc_v: Tensor, rank: Tensor, svn: Tensor,
               cfg: LossConfig) -> Tensor:
    return nm.add(nm.add(loc_a, loc_v),
                  nm.add(nm.mul(rank, cfg.lambda_rank), nm.mul(svn, cfg.lambda_svn)))
