"""Witness bridge: static entropic-OT coupling between the two coarse
candidate sets, transport statistics, top-k witness gathering, the
directional-scale head, integer budget allocation, and priority sampling.

The coupling is solved on a slack-augmented problem: confidences are
normalized by the larger side's mass and one slack row/column (with the
maximum real cost) absorbs whatever the plan prefers not to transport, so
the unmatched rate U = 1 - T is attainable rather than identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_blocks as nn
from . import numerics as nm
from .intervals import iou_1d
from .numerics import Tensor


class WitnessError(ValueError):
    pass


@dataclass
class WsbConfig:
    eps_reg: float = 0.05        # entropic weight on min-max-normalized costs
    sinkhorn_iters: int = 50     # unrolled for differentiation
    eps_stab: float = 1e-8
    slack_mass: float = 0.25
    top_k: int = 16
    tau: float = 1.0             # priority-sampling temperature
    d_s: int = 32                # scale-head token width


@dataclass
class PairCostParams:
    """Free scalars; softplus keeps the four cost weights positive."""

    raw_t: Tensor
    raw_l: Tensor
    raw_o: Tensor
    raw_pi: Tensor

    def weights(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (nm.softplus(self.raw_t), nm.softplus(self.raw_l),
                nm.softplus(self.raw_o), nm.softplus(self.raw_pi))


def pair_cost(cands_a: list[tuple[float, float, float]],
              cands_v: list[tuple[float, float, float]],
              params: PairCostParams) -> tuple[Tensor, np.ndarray]:
    """Weighted event-pair cost matrix plus the cached IoU matrix.

    Candidates are (start, dur, conf) triples; the four terms are the start
    gap, duration gap, 1 - IoU, and squared confidence gap.
    """
    if len(cands_a) != len(cands_v) or not cands_a:
        raise WitnessError("pair-cost: candidate sets must be equal-sized and non-empty")
    sa = np.array([c[0] for c in cands_a])
    la = np.array([c[1] for c in cands_a])
    pa = np.array([c[2] for c in cands_a])
    sv = np.array([c[0] for c in cands_v])
    lv = np.array([c[1] for c in cands_v])
    pv = np.array([c[2] for c in cands_v])
    d_start = np.abs(sa[:, None] - sv[None, :])
    d_dur = np.abs(la[:, None] - lv[None, :])
    d_conf = (pa[:, None] - pv[None, :]) ** 2
    iou = np.zeros((len(cands_a), len(cands_v)))
    for i in range(len(cands_a)):
        for j in range(len(cands_v)):
            iou[i, j] = iou_1d((sa[i], sa[i] + la[i]), (sv[j], sv[j] + lv[j]))
    lt, ll, lo, lp = params.weights()
    cost = nm.add(
        nm.add(nm.mul(lt, d_start), nm.mul(ll, d_dur)),
        nm.add(nm.mul(lo, 1.0 - iou), nm.mul(lp, d_conf)),
    )
    return cost, iou


def sinkhorn(cost, a, b, eps_reg: float, iters: int) -> Tensor:
    """Alternating row/column scaling of exp(-cost/eps); balanced problem.

    Differentiable by unrolling the fixed iteration count.  Rows whose
    kernel entries all vanish (infinite cost) are infeasible.
    """
    if eps_reg <= 0 or iters < 1:
        raise WitnessError("sinkhorn-config: need eps_reg > 0 and iters >= 1")
    cost = nm.as_tensor(cost)
    a_t = nm.as_tensor(a)
    b_t = nm.as_tensor(b)
    kernel_data = np.exp(-cost.data / eps_reg)
    if (kernel_data.max(axis=1) == 0.0).any() or (kernel_data.max(axis=0) == 0.0).any():
        raise WitnessError("sinkhorn-infeasible: a marginal has no finite-cost entry")
    kernel = nm.exp(nm.mul(cost, -1.0 / eps_reg))
    n, m = cost.shape
    u = nm.as_tensor(np.ones(n))
    v = nm.as_tensor(np.ones(m))
    kt = nm.moveaxis(kernel, 0, 1)
    for _ in range(iters):
        u = nm.div(a_t, nm.matmul_vec(kernel, v))
        v = nm.div(b_t, nm.matmul_vec(kt, u))
    return nm.mul(nm.mul(kernel, nm.reshape(u, (n, 1))), nm.reshape(v, (1, m)))


def sinkhorn_residuals(pi: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    return (float(np.abs(pi.sum(axis=1) - a).max()),
            float(np.abs(pi.sum(axis=0) - b).max()))


def _logsumexp(m: np.ndarray, axis: int) -> np.ndarray:
    mx = m.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(m - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn_converged(cost: np.ndarray, a: np.ndarray, b: np.ndarray, eps_reg: float,
                       tol: float = 1e-9, max_iters: int = 60000,
                       omega: float = 1.8) -> tuple[np.ndarray, int]:
    """Log-domain Sinkhorn run to a residual target.

    Uses an epsilon ladder (warm-started potentials) plus over-relaxed dual
    updates; both are needed because plain scaling has pathologically slow
    linear modes on near-degenerate instances at small regularization.  This
    is the diagnostic/check path; the training path unrolls a fixed
    iteration count of the plain update instead.
    """
    cost = np.asarray(cost, dtype=np.float64)
    la, lb = np.log(a), np.log(b)
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    pi = None
    for eps in (eps_reg * 27.0, eps_reg * 9.0, eps_reg * 3.0, eps_reg):
        final = eps == eps_reg
        iters = max_iters if final else 300
        for it in range(1, iters + 1):
            f_new = eps * (la - _logsumexp((g[None, :] - cost) / eps, axis=1))
            f = (1.0 - omega) * f + omega * f_new
            g_new = eps * (lb - _logsumexp((f[:, None] - cost) / eps, axis=0))
            g = (1.0 - omega) * g + omega * g_new
            if final and it % 10 == 0:
                pi = np.exp((f[:, None] + g[None, :] - cost) / eps)
                if sum(sinkhorn_residuals(pi, a, b)) <= tol:
                    return pi, it
    if pi is None:
        pi = np.exp((f[:, None] + g[None, :] - cost) / eps_reg)
    return pi, max_iters


@dataclass
class CouplingResult:
    pi_full: Tensor           # (N+1) x (N+1) augmented plan
    pi_real: Tensor           # N x N real block
    cost: Tensor              # raw pair cost (real block)
    cost_norm: Tensor         # min-max normalized cost used by the solver
    iou: np.ndarray
    a_aug: np.ndarray
    b_aug: np.ndarray


def _minmax_normalize(cost: Tensor) -> Tensor:
    lo = float(cost.data.min())
    hi = float(cost.data.max())
    span = hi - lo
    if span < 1e-12:
        return nm.mul(cost, 0.0)
    return nm.mul(nm.add(cost, -lo), 1.0 / span)


def coupling_with_slack(cost: Tensor, iou: np.ndarray, conf_a: np.ndarray,
                        conf_b: np.ndarray, cfg: WsbConfig) -> CouplingResult:
    """Slack-augmented entropic coupling of the two candidate sets."""
    n = cost.shape[0]
    cost_norm = _minmax_normalize(cost)
    slack_cost = float(cost_norm.data.max())
    mass = max(conf_a.sum(), conf_b.sum(), 1e-12)
    a_real = conf_a / mass
    b_real = conf_b / mass
    a_aug = np.concatenate([a_real, [1.0 - a_real.sum() + cfg.slack_mass]])
    b_aug = np.concatenate([b_real, [1.0 - b_real.sum() + cfg.slack_mass]])
    col = nm.as_tensor(np.full((n, 1), slack_cost))
    row = nm.as_tensor(np.full((1, n + 1), slack_cost))
    row.data[0, n] = 0.0  # slack-to-slack transport is free
    padded = nm.concat([nm.concat([cost_norm, col], axis=1), row], axis=0)
    pi_full = sinkhorn(padded, a_aug, b_aug, cfg.eps_reg, cfg.sinkhorn_iters)
    pi_real = nm.gather(nm.moveaxis(nm.gather(pi_full, np.arange(n)), 0, 1), np.arange(n))
    pi_real = nm.moveaxis(pi_real, 0, 1)
    return CouplingResult(pi_full, pi_real, cost, cost_norm, iou, a_aug, b_aug)


@dataclass
class TransportStats:
    residual: Tensor      # R: plan-weighted cost
    total: Tensor         # T: transported mass over the real block
    unmatched: Tensor     # U = 1 - T
    entropy: Tensor       # H of the mass-normalized plan
    inconsistency: Tensor  # C_inc = 1 - plan-weighted IoU
    pi_tilde: Tensor

    def stack(self) -> Tensor:
        return nm.concat([nm.reshape(t, (1,)) for t in
                          (self.residual, self.total, self.unmatched,
                           self.entropy, self.inconsistency)], axis=0)


def transport_stats(pi_real: Tensor, cost, iou: np.ndarray,
                    eps_stab: float = 1e-8) -> TransportStats:
    """Summary statistics of the real transport block."""
    cost = nm.as_tensor(cost)
    residual = nm.tsum(nm.mul(pi_real, cost))
    total = nm.tsum(pi_real)
    unmatched = nm.sub(1.0, total)
    pi_tilde = nm.div(pi_real, nm.add(total, eps_stab))
    entropy = nm.neg(nm.tsum(nm.mul(pi_tilde, nm.log(nm.add(pi_tilde, eps_stab)))))
    inconsistency = nm.sub(1.0, nm.tsum(nm.mul(pi_real, iou)))
    return TransportStats(residual, total, unmatched, entropy, inconsistency, pi_tilde)


# ---------------------------------------------------------------------------
# witness selection


def topk_indices(pi_tilde: np.ndarray, k: int) -> np.ndarray:
    """Per row, indices of the k largest entries in descending order.

    Ties resolve to the lower index; k is clamped to the column count.
    """
    if k < 1:
        raise WitnessError("witness-topk: k must be >= 1")
    k = min(k, pi_tilde.shape[1])
    order = np.argsort(-pi_tilde, axis=1, kind="stable")
    return order[:, :k].astype(np.intp)


def gather_witnesses(z_opposite: Tensor, idx: np.ndarray) -> Tensor:
    """Collect opposite-modality latent rows: (N, k) indices -> (N, k, C)."""
    return nm.gather(z_opposite, idx)


# ---------------------------------------------------------------------------
# directional-scale head


@dataclass
class ModalitySummary:
    """One-layer transformer + mean pooling + projection to d_s."""

    attn: nn.MhaParams
    ln1: nn.LayerNormParams
    ffn: nn.FfnParams
    ln2: nn.LayerNormParams
    proj_w: Tensor
    proj_b: Tensor


@dataclass
class ScaleHeadParams:
    summary_a: ModalitySummary
    summary_v: ModalitySummary
    w_g: Tensor                 # 5 x d_s stats embedding
    attn: nn.MhaParams          # self-attention over the 5 tokens
    ln1: nn.LayerNormParams
    ffn: nn.FfnParams
    ln2: nn.LayerNormParams
    out_w: Tensor               # d_s x 2
    out_b: Tensor
    w_z: Tensor                 # 2 x 3 fusion of scales and energy gap
    b_z: Tensor


def _summarize(z: Tensor, p: ModalitySummary) -> Tensor:
    x = nn.layer_norm(nm.add(z, nn.mha(z, z, z, p.attn)), p.ln1)
    x = nn.layer_norm(nm.add(x, nn.swiglu_ffn(x, p.ffn)), p.ln2)
    pooled = nm.tmean(x, axis=0)
    return nm.add(nm.matmul_vec(nm.moveaxis(p.proj_w, 0, 1), pooled), p.proj_b)


def directional_scales(z_a: Tensor, z_v: Tensor, stats_vec: Tensor,
                       p: ScaleHeadParams) -> Tensor:
    """Two strictly positive scalars (S_a|v, S_v|a) from the coarse latents
    and the five transport statistics."""
    psi_a = _summarize(z_a, p.summary_a)
    psi_v = _summarize(z_v, p.summary_v)
    stats_tok = nm.matmul_vec(nm.moveaxis(p.w_g, 0, 1), stats_vec)
    d_s = psi_a.shape[0]
    tokens = nm.concat([nm.reshape(t, (1, d_s)) for t in
                        (psi_a, psi_v, nm.sub(psi_a, psi_v),
                         nm.mul(psi_a, psi_v), stats_tok)], axis=0)
    g = nn.layer_norm(nm.add(tokens, nn.mha(tokens, tokens, tokens, p.attn)), p.ln1)
    g = nn.layer_norm(nm.add(g, nn.swiglu_ffn(g, p.ffn)), p.ln2)
    pooled = nm.tmean(g, axis=0)
    return nm.softplus(nm.add(nm.matmul_vec(nm.moveaxis(p.out_w, 0, 1), pooled), p.out_b))


def fusion_weights(s_hat: Tensor, e_prior_a: Tensor, e_prior_v: Tensor,
                   w_z: Tensor, b_z: Tensor, energy_squash: float = 0.01) -> Tensor:
    """Softmax weights (w_v, w_a) from the scales and the energy gap.

    The raw prior-energy gap is unbounded (it sums squared drift norms over
    all event tokens) and would saturate the softmax, starving one modality
    of its entire budget; it enters through a tanh squash instead.
    """
    gap = nm.tanh(nm.mul(nm.sub(e_prior_v, e_prior_a), energy_squash))
    feats = nm.concat([nm.reshape(nm.pick(s_hat, 0), (1,)),
                       nm.reshape(nm.pick(s_hat, 1), (1,)),
                       nm.reshape(gap, (1,))], axis=0)
    z = nm.add(nm.matmul_vec(w_z, feats), b_z)
    return nm.softmax(z, axis=0)


def default_fusion_matrix(energy_coef: float = 0.5) -> np.ndarray:
    """Identity-like fusion: w_v follows S_v|a (plus the energy gap), w_a
    follows S_a|v.  The fusion weights feed only integer allocation, so they
    receive no gradient; this initialization fixes their behavior."""
    return np.array([[0.0, 1.0, energy_coef],
                     [1.0, 0.0, -energy_coef]])


# ---------------------------------------------------------------------------
# budget allocation


@dataclass
class BudgetAllocation:
    w_a: float
    w_v: float
    steps_a: int
    steps_v: int
    count_a: int
    count_v: int
    repairs: list[str] = field(default_factory=list)


def _even_floor(w: float, budget: int) -> int:
    return 2 * int(np.floor(w * budget / 2.0 + 0.5))


def _repair(vals: dict[str, int], budget: int, w: dict[str, float], unit: int,
            log: list[str], tag: str) -> None:
    # Decrement the smaller-weight side (tie -> audio) until the sum fits.
    while vals["a"] + vals["v"] > budget:
        side = "a" if w["a"] <= w["v"] else "v"
        if vals[side] < unit:
            side = "v" if side == "a" else "a"
        vals[side] -= unit
        log.append(f"{tag}:{side}-{unit}")


def split_budget(w_a: float, w_v: float, s_tgt: int, n_ev: int,
                 rho: int = 2) -> BudgetAllocation:
    """Even-floor integer split of steps and event slots, with conservation
    repair when the rounded halves overshoot the budget."""
    if s_tgt < 0 or s_tgt % 2 != 0:
        raise WitnessError("budget: S_tgt must be even and >= 0")
    if n_ev < 2 or n_ev % 2 != 0:
        raise WitnessError("budget: N_ev must be even and >= 2")
    steps = {"a": _even_floor(w_a, s_tgt), "v": _even_floor(w_v, s_tgt)}
    counts = {"a": _even_floor(w_a, n_ev), "v": _even_floor(w_v, n_ev)}
    log: list[str] = []
    weights = {"a": w_a, "v": w_v}
    _repair(steps, s_tgt, weights, rho, log, "steps")
    _repair(counts, n_ev, weights, 2, log, "events")
    return BudgetAllocation(w_a, w_v, steps["a"], steps["v"],
                            counts["a"], counts["v"], log)


def allocate_budget(s_hat: Tensor, e_prior_a: Tensor, e_prior_v: Tensor,
                    s_tgt: int, n_ev: int, w_z: Tensor, b_z: Tensor,
                    rho: int = 2, energy_squash: float = 0.01) -> tuple[BudgetAllocation, Tensor]:
    """Full allocation path: fusion softmax then integer segmentation."""
    w = fusion_weights(s_hat, e_prior_a, e_prior_v, w_z, b_z, energy_squash)
    w_v = float(w.data[0])
    w_a = float(w.data[1])
    return split_budget(w_a, w_v, s_tgt, n_ev, rho), w


# ---------------------------------------------------------------------------
# priority sampling


def priority_sample(pi_real: np.ndarray, tau: float, n_a: int, n_v: int,
                    seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Gumbel-top-k sampling without replacement from the priority softmax.

    Audio priorities come from row sums of the plan, visual from column
    sums; lightly-transported candidates are preferred.
    """
    if tau <= 0:
        raise WitnessError("priority-sample: tau must be positive")
    n = pi_real.shape[0]
    if n_a > n or n_v > n:
        raise WitnessError("priority-sample: selected counts exceed candidates")
    rng = np.random.default_rng(seed)
    out = []
    for gamma, count in ((1.0 - pi_real.sum(axis=1), n_a),
                         (1.0 - pi_real.sum(axis=0), n_v)):
        keys = gamma / tau + rng.gumbel(size=n)
        order = np.argsort(-keys, kind="stable")
        out.append(np.sort(order[:count]).astype(np.intp))
    return out[0], out[1]
