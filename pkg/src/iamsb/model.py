"""Full localizer assembly: coarse bridge per modality, witness coupling
with budget allocation, refinement bridge, decode heads, and the loss graph.

``forward_clip`` optionally replays a recorded ``WitnessPlan``: the frozen
evaluation context (coarse candidate triples, witness/selection indices,
integer budgets, probe objective values, matchings).  Those quantities sit
behind gradient stops or integer boundaries, so replaying them makes the
forward pass exactly the function the tape differentiates — which is what
the finite-difference harness and the ablation variants need.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as ls
from . import nn_blocks as nn
from . import numerics as nm
from . import refine as rb
from . import witness as wb
from .coarse import CoarseBlock, CoarseConfig, CoarseRun, csb_run
from .config import ModelConfig
from .intervals import EventCandidate
from .numerics import ParamStore, Tensor
from .synth import ClipRecord


class ModelError(ValueError):
    pass


VARIANTS = ("full", "no-csb", "csb-only", "no-wsb", "no-rsb")

_HEAD_BIAS = 1.0  # decode starts wide (|tanh| = 0.76) without saturating the gradient
_SOFTPLUS_UNIT = 0.5413248546129181  # softplus(x) = 1


def _mix_seed(*parts: int) -> int:
    acc = 0x9E3779B97F4A7C15
    for p in parts:
        acc = (acc * 6364136223846793005 + (int(p) & 0xFFFFFFFFFFFF) + 1442695040888963407) % (1 << 63)
    return int(acc)


@dataclass
class WitnessPlan:
    """Frozen evaluation context recorded by a live forward pass."""

    coarse_a: list[tuple[float, float, float]]
    coarse_v: list[tuple[float, float, float]]
    topk_a: np.ndarray | None
    topk_v: np.ndarray | None
    sel_a: np.ndarray
    sel_v: np.ndarray
    alloc: wb.BudgetAllocation
    probe_values: dict[tuple[str, int], float] = field(default_factory=dict)
    matching: dict[str, tuple[list, list]] = field(default_factory=dict)


@dataclass
class ClipForward:
    loss: Tensor | None
    parts: dict[str, float]
    events: dict[str, list[EventCandidate]]
    decoded: dict[str, nn.DecodedEvents]
    alloc: wb.BudgetAllocation | None
    weights: tuple[float, float] | None  # (w_a, w_v)
    stats: dict[str, float] | None
    e_prior: tuple[float, float]
    s_hat: tuple[float, float] | None
    plan: WitnessPlan | None
    timings: dict[str, float]
    coarse_runs: dict[str, CoarseRun] = field(default_factory=dict)


def _empty_decoded() -> nn.DecodedEvents:
    zero = np.zeros(0)
    return nn.DecodedEvents(Tensor(zero), Tensor(zero), Tensor(zero))


class Localizer:
    """The cascaded bridge model over one pair of token streams."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParamStore(seed)
        c, ds, heads = cfg.channels, cfg.d_s, cfg.heads
        dff = nn.ffn_dim(c, cfg.alpha)
        dff_s = nn.ffn_dim(ds, cfg.alpha)
        p = self.params

        self.coarse_cfg = CoarseConfig(cfg.coarse_steps, cfg.n_events, c, cfg.sigma)
        self.wsb_cfg = wb.WsbConfig(cfg.eps_reg, cfg.sinkhorn_iters, cfg.eps_stab,
                                    cfg.slack_mass, cfg.top_k, cfg.tau, ds)

        wq_coarse = p.param("csb.shared.wq", (c, c))
        self.coarse: dict[str, CoarseBlock] = {}
        self.heads: dict[str, nn.HeadParams] = {}
        for m in "av":
            self.coarse[m] = CoarseBlock(
                attn=nn.MhaParams(wq_coarse, p.param(f"csb.{m}.wk", (c, c)),
                                  p.param(f"csb.{m}.wv", (c, c)),
                                  p.param(f"csb.{m}.wo", (c, c)), heads),
                ln=self._ln(f"csb.{m}.ln", c),
                ffn=self._ffn(f"csb.{m}.ffn", c, dff),
                z0=p.param(f"csb.{m}.z0", (cfg.n_events, c), scale=1.0),
            )
            self.heads[m] = nn.HeadParams(
                w=p.param(f"head.{m}.w", (c, 3), scale=0.1),
                b=p.param(f"head.{m}.b", (3,),
                          value=np.array([-_HEAD_BIAS, _HEAD_BIAS, 0.0])),
            )

        self.cost_params = wb.PairCostParams(
            *(p.param(f"wsb.cost.{k}", (), value=np.array(_SOFTPLUS_UNIT))
              for k in ("raw_t", "raw_l", "raw_o", "raw_pi")))

        summaries = {}
        for m in "av":
            summaries[m] = wb.ModalitySummary(
                attn=self._mha(f"wsb.psi.{m}", c, heads),
                ln1=self._ln(f"wsb.psi.{m}.ln1", c),
                ffn=self._ffn(f"wsb.psi.{m}.ffn", c, dff),
                ln2=self._ln(f"wsb.psi.{m}.ln2", c),
                proj_w=p.param(f"wsb.psi.{m}.proj_w", (c, ds)),
                proj_b=p.param(f"wsb.psi.{m}.proj_b", (ds,), init="zeros"),
            )
        self.scale_head = wb.ScaleHeadParams(
            summary_a=summaries["a"],
            summary_v=summaries["v"],
            w_g=p.param("wsb.scale.w_g", (5, ds)),
            attn=self._mha("wsb.scale", ds, heads),
            ln1=self._ln("wsb.scale.ln1", ds),
            ffn=self._ffn("wsb.scale.ffn", ds, dff_s),
            ln2=self._ln("wsb.scale.ln2", ds),
            out_w=p.param("wsb.scale.out_w", (ds, 2), scale=0.1),
            out_b=p.param("wsb.scale.out_b", (2,), init="zeros"),
            w_z=p.param("wsb.fuse.w_z", (2, 3),
                        value=wb.default_fusion_matrix(cfg.energy_coef)),
            b_z=p.param("wsb.fuse.b_z", (2,), init="zeros"),
        )

        wq_merge = p.param("rsb.shared.merge.wq", (c, c))
        self.refine: dict[str, rb.RefineBlock] = {}
        for m in "av":
            kv_k = p.param(f"rsb.{m}.kv.wk", (c, c))
            kv_v = p.param(f"rsb.{m}.kv.wv", (c, c))
            self.refine[m] = rb.RefineBlock(
                read=nn.MhaParams(p.param(f"rsb.{m}.read.wq", (c, c)), kv_k, kv_v,
                                  p.param(f"rsb.{m}.read.wo", (c, c)), heads),
                merge=nn.MhaParams(wq_merge, kv_k, kv_v,
                                   p.param(f"rsb.{m}.merge.wo", (c, c)), heads),
                self_attn=self._mha(f"rsb.{m}.self", c, heads),
                witness=self._mha(f"rsb.{m}.wit", c, heads),
                ln1=self._ln(f"rsb.{m}.ln1", c),
                ln2=self._ln(f"rsb.{m}.ln2", c),
                ln3=self._ln(f"rsb.{m}.ln3", c),
                ffn=self._ffn(f"rsb.{m}.ffn", c, dff),
            )

    # -- parameter helpers -------------------------------------------------

    def _mha(self, prefix: str, c: int, heads: int) -> nn.MhaParams:
        p = self.params
        return nn.MhaParams(p.param(f"{prefix}.wq", (c, c)), p.param(f"{prefix}.wk", (c, c)),
                            p.param(f"{prefix}.wv", (c, c)), p.param(f"{prefix}.wo", (c, c)),
                            heads)

    def _ffn(self, prefix: str, c: int, dff: int) -> nn.FfnParams:
        p = self.params
        return nn.FfnParams(p.param(f"{prefix}.w1", (c, dff)), p.param(f"{prefix}.w2", (c, dff)),
                            p.param(f"{prefix}.w3", (dff, c), scale=1.0 / np.sqrt(dff)))

    def _ln(self, prefix: str, c: int) -> nn.LayerNormParams:
        p = self.params
        return nn.LayerNormParams(p.param(f"{prefix}.gain", (c,), init="ones"),
                                  p.param(f"{prefix}.bias", (c,), init="zeros"))

    # -- forward -----------------------------------------------------------

    def forward_clip(self, record: ClipRecord, loss_cfg: ls.LossConfig, sample_seed: int,
                     plan: WitnessPlan | None = None, variant: str = "full",
                     compute_loss: bool = True) -> ClipForward:
        if variant not in VARIANTS:
            raise ModelError(f"variant-unknown: {variant!r}")
        cfg = self.cfg
        timings: dict[str, float] = {}
        feats = {"a": Tensor(record.feat_a.astype(np.float64)),
                 "v": Tensor(record.feat_v.astype(np.float64))}

        t0 = time.perf_counter()
        z_out: dict[str, Tensor] = {}
        e_prior: dict[str, Tensor] = {}
        runs: dict[str, CoarseRun] = {}
        for m in "av":
            if variant == "no-csb":
                z_out[m] = self.coarse[m].z0
                e_prior[m] = nm.as_tensor(0.0)
            else:
                run = csb_run(self.coarse[m].z0, feats[m], self.coarse_cfg, self.coarse[m])
                runs[m] = run
                z_out[m] = run.z_out
                e_prior[m] = run.e_prior
        timings["csb"] = time.perf_counter() - t0

        if variant == "csb-only":
            return self._decode_coarse(record, loss_cfg, z_out, e_prior, runs,
                                       timings, compute_loss)

        t1 = time.perf_counter()
        if plan is not None:
            coarse_triples = {"a": plan.coarse_a, "v": plan.coarse_v}
        else:
            coarse_triples = {}
            with nm.no_grad():
                for m in "av":
                    dec = nn.head_decode(nm.stop_grad(z_out[m]), self.heads[m])
                    coarse_triples[m] = dec.triples()

        stats_snapshot = None
        s_hat = None
        rank_term = nm.as_tensor(0.0)
        if variant == "no-wsb":
            if plan is not None:
                alloc = plan.alloc
            else:
                alloc = wb.split_budget(0.5, 0.5, cfg.s_tgt, cfg.n_events, loss_cfg.rho)
            weights = (0.5, 0.5)
            k = min(cfg.top_k, cfg.n_events)
            uniform = np.tile(np.arange(k, dtype=np.intp), (cfg.n_events, 1))
            topk = {"a": uniform, "v": uniform.copy()}
            if plan is not None:
                sel = {"a": plan.sel_a, "v": plan.sel_v}
            else:
                rng = np.random.default_rng(_mix_seed(sample_seed, 7))
                sel = {"a": np.sort(rng.permutation(cfg.n_events)[:alloc.count_a]).astype(np.intp),
                       "v": np.sort(rng.permutation(cfg.n_events)[:alloc.count_v]).astype(np.intp)}
        else:
            conf_a = np.array([t[2] for t in coarse_triples["a"]])
            conf_v = np.array([t[2] for t in coarse_triples["v"]])
            cost, iou = wb.pair_cost(coarse_triples["a"], coarse_triples["v"], self.cost_params)
            coup = wb.coupling_with_slack(cost, iou, conf_a, conf_v, self.wsb_cfg)
            stats = wb.transport_stats(coup.pi_real, cost, iou, cfg.eps_stab)
            s_hat_t = wb.directional_scales(z_out["a"], z_out["v"], stats.stack(),
                                            self.scale_head)
            s_hat = (float(s_hat_t.data[0]), float(s_hat_t.data[1]))
            if plan is not None:
                alloc = plan.alloc
                w_t = wb.fusion_weights(s_hat_t, e_prior["a"], e_prior["v"],
                                        self.scale_head.w_z, self.scale_head.b_z,
                                        cfg.energy_squash)
            else:
                alloc, w_t = wb.allocate_budget(s_hat_t, e_prior["a"], e_prior["v"],
                                                cfg.s_tgt, cfg.n_events,
                                                self.scale_head.w_z, self.scale_head.b_z,
                                                loss_cfg.rho, cfg.energy_squash)
            weights = (float(w_t.data[1]), float(w_t.data[0]))
            stats_snapshot = {
                "R": float(stats.residual.data), "T": float(stats.total.data),
                "U": float(stats.unmatched.data), "H": float(stats.entropy.data),
                "C_inc": float(stats.inconsistency.data),
            }
            k = min(cfg.top_k, cfg.n_events)
            if plan is not None:
                topk = {"a": plan.topk_a, "v": plan.topk_v}
                sel = {"a": plan.sel_a, "v": plan.sel_v}
            else:
                pt = stats.pi_tilde.data
                topk = {"a": wb.topk_indices(pt, k), "v": wb.topk_indices(pt.T, k)}
                sel_a, sel_v = wb.priority_sample(coup.pi_real.data, cfg.tau,
                                                  alloc.count_a, alloc.count_v,
                                                  _mix_seed(sample_seed, 11))
                sel = {"a": sel_a, "v": sel_v}
            if compute_loss:
                rank_term = ls.rank_loss(s_hat_t, ls.forged_side(record.events),
                                         loss_cfg.margin)
        timings["wsb"] = time.perf_counter() - t1

        t2 = time.perf_counter()
        decoded: dict[str, nn.DecodedEvents] = {}
        refine_runs: dict[str, rb.RefineRun] = {}
        witness_sets: dict[str, Tensor | None] = {}
        steps = {"a": alloc.steps_a, "v": alloc.steps_v}
        counts = {"a": alloc.count_a, "v": alloc.count_v}
        if variant == "no-rsb":
            for m in "av":
                decoded[m] = nn.head_decode(z_out[m], self.heads[m])
        else:
            for m in "av":
                opp = "v" if m == "a" else "a"
                if counts[m] == 0:
                    decoded[m] = _empty_decoded()
                    witness_sets[m] = None
                    continue
                wit = nm.gather(z_out[opp], topk[m][sel[m]])
                z0_sel = nm.gather(z_out[m], sel[m])
                run = rb.rsb_run(z0_sel, feats[m], wit, steps[m], self.refine[m])
                refine_runs[m] = run
                witness_sets[m] = wit
                decoded[m] = nn.head_decode(run.z_out, self.heads[m])
        timings["rsb"] = time.perf_counter() - t2

        events = {m: self._to_candidates(decoded[m], m) for m in "av"}
        new_plan = WitnessPlan(
            coarse_a=coarse_triples["a"], coarse_v=coarse_triples["v"],
            topk_a=topk["a"], topk_v=topk["v"], sel_a=sel["a"], sel_v=sel["v"],
            alloc=alloc,
        ) if plan is None else plan

        result = ClipForward(
            loss=None, parts={}, events=events, decoded=decoded, alloc=alloc,
            weights=weights, stats=stats_snapshot,
            e_prior=(float(e_prior["a"].data), float(e_prior["v"].data)),
            s_hat=s_hat, plan=new_plan, timings=timings, coarse_runs=runs,
        )
        if not compute_loss:
            return result

        loc_terms: dict[str, ls.LocBreakdown] = {}
        probes: dict[str, list[ls.ProbePair]] = {"a": [], "v": []}
        for m in "av":
            gts = record.events_for(m)
            matching = plan.matching.get(m) if plan is not None else None
            loc_terms[m] = ls.loc_loss(decoded[m], gts, loss_cfg, matching)
            if plan is None:
                new_plan.matching[m] = (loc_terms[m].matched, loc_terms[m].unmatched)

        svn_term = nm.as_tensor(0.0)
        if variant != "no-rsb" and loss_cfg.rho in loss_cfg.step_set:
            for m in "av":
                if not loc_terms[m].kappa:
                    continue
                if plan is not None:
                    probe_triples = None
                elif m in refine_runs:
                    z_probe = rb.probe_steps(refine_runs[m], feats[m], witness_sets[m],
                                             self.refine[m], loss_cfg.rho,
                                             1.0 / loss_cfg.rho)
                    with nm.no_grad():
                        probe_triples = nn.head_decode(z_probe, self.heads[m]).triples()
                else:
                    probe_triples = None
                for p_idx, kappa in loc_terms[m].kappa.items():
                    if plan is not None:
                        frozen = plan.probe_values.get((m, p_idx))
                        if frozen is None:
                            continue
                    elif probe_triples is not None:
                        s, d, _ = probe_triples[p_idx]
                        frozen = ls.pair_regression_value(s, d, loc_terms[m].pair_gt[p_idx],
                                                          loss_cfg.huber_delta)
                        new_plan.probe_values[(m, p_idx)] = frozen
                    else:
                        continue
                    probes[m].append((kappa, frozen))
            svn_term = ls.svn_loss(probes["a"], probes["v"],
                                   (alloc.count_a, alloc.steps_a),
                                   (alloc.count_v, alloc.steps_v), loss_cfg.rho)

        total = ls.total_loss(loc_terms["a"].loss, loc_terms["v"].loss,
                              rank_term, svn_term, loss_cfg)
        result.loss = total
        result.parts = {
            "loc_a": float(loc_terms["a"].loss.data),
            "loc_v": float(loc_terms["v"].loss.data),
            "rank": float(rank_term.data),
            "svn": float(svn_term.data),
            "total": float(total.data),
        }
        return result

    # -- variant helpers ----------------------------------------------------

    def _decode_coarse(self, record, loss_cfg, z_out, e_prior, runs, timings,
                       compute_loss) -> ClipForward:
        decoded = {m: nn.head_decode(z_out[m], self.heads[m]) for m in "av"}
        events = {m: self._to_candidates(decoded[m], m) for m in "av"}
        result = ClipForward(
            loss=None, parts={}, events=events, decoded=decoded, alloc=None,
            weights=(0.5, 0.5), stats=None,
            e_prior=(float(e_prior["a"].data), float(e_prior["v"].data)),
            s_hat=None, plan=None, timings=timings, coarse_runs=runs,
        )
        if compute_loss:
            loc_a = ls.loc_loss(decoded["a"], record.events_for("a"), loss_cfg)
            loc_v = ls.loc_loss(decoded["v"], record.events_for("v"), loss_cfg)
            zero = nm.as_tensor(0.0)
            result.loss = ls.total_loss(loc_a.loss, loc_v.loss, zero, zero, loss_cfg)
            result.parts = {
                "loc_a": float(loc_a.loss.data), "loc_v": float(loc_v.loss.data),
                "rank": 0.0, "svn": 0.0, "total": float(result.loss.data),
            }
        return result

    @staticmethod
    def _to_candidates(decoded: nn.DecodedEvents, modality: str) -> list[EventCandidate]:
        return [EventCandidate(s, d, c, modality) for s, d, c in decoded.triples()]


def tiny_model_config() -> ModelConfig:
    """Smallest config that exercises every block; used by gradient checks."""
    return ModelConfig(channels=6, heads=2, n_events=4, coarse_steps=1, s_tgt=4,
                       top_k=2, tau=1.0, d_s=4, sinkhorn_iters=15)
