"""End-to-end orchestration: dataset construction, the training loop with a
decoupled-weight-decay adaptive optimizer and cosine-warmup schedule,
evaluation with cross-modal fusion, and the ablation sweeps."""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nm
from .config import RunConfig
from .intervals import MetricReport, compute_report, nms_fuse, to_absolute
from .model import ClipForward, Localizer, WitnessPlan, _mix_seed
from .numerics import load_checkpoint, save_checkpoint
from .synth import ClipRecord, SynthConfig, generate_clip


class PipelineError(RuntimeError):
    pass


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("IAMSB_THREADS", "1")))
    except ValueError:
        return 1


def build_records(cfg: SynthConfig, count: int, first_seed: int) -> list[ClipRecord]:
    """Generate ``count`` clips with seeds first_seed..; order-independent."""
    cfg.validate()
    seeds = range(first_seed, first_seed + count)
    workers = worker_count()
    if workers == 1:
        return [generate_clip(cfg, s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: generate_clip(cfg, s), seeds))


def build_datasets(run_cfg: RunConfig) -> tuple[list[ClipRecord], list[ClipRecord]]:
    train = build_records(run_cfg.data, run_cfg.data.clips, 0)
    eval_ = build_records(run_cfg.data, run_cfg.eval.eval_clips, run_cfg.eval.eval_offset)
    return train, eval_


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Adaptive per-parameter moments with decoupled weight decay."""

    def __init__(self, store, cfg):
        self.store = store
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self, lr: float, grad_scale: float = 1.0) -> None:
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        self.t += 1
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.store.items():
            g = p.grad * grad_scale if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.cfg.adam_eps)
            p.data = p.data - lr * update - lr * self.cfg.weight_decay * p.data


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup into a cosine decay to zero."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    final_metrics: dict | None = None
    wall_times: dict[str, float] = field(default_factory=dict)
    w_a_values: list[float] = field(default_factory=list)
    variant: str = "full"

    def to_json(self) -> str:
        return json.dumps({
            "epochs": self.epochs,
            "final_metrics": self.final_metrics,
            "wall_times": self.wall_times,
            "w_a_values": self.w_a_values,
            "variant": self.variant,
        }, indent=2)


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def train(run_cfg: RunConfig, out_dir: str | None = None, variant: str = "full",
          datasets: tuple[list[ClipRecord], list[ClipRecord]] | None = None,
          evaluate_final: bool = True) -> tuple[TrainReport, Localizer]:
    """Train one model; returns the report and the trained model.

    Writes ``train_log.csv`` and a per-epoch checkpoint when out_dir is set;
    a NaN loss aborts with the last completed epoch's checkpoint on disk.
    """
    tcfg = run_cfg.train
    model = Localizer(run_cfg.model, seed=tcfg.seed)
    train_recs, eval_recs = datasets if datasets is not None else build_datasets(run_cfg)
    opt = AdamW(model.params, tcfg)
    report = TrainReport(variant=variant)
    out_path = Path(out_dir) if out_dir else None
    log_path = None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)
        log_path = out_path / "train_log.csv"
        log_path.write_text("epoch,loc_a,loc_v,rank,svn,total\n")

    steps_per_epoch = math.ceil(len(train_recs) / tcfg.batch_size)
    total_steps = max(1, tcfg.epochs * steps_per_epoch)
    order_rng = np.random.default_rng(_mix_seed(tcfg.seed, 0xE9))
    stage_times = {"csb": 0.0, "wsb": 0.0, "rsb": 0.0}
    step = 0
    t_start = time.perf_counter()
    for epoch in range(tcfg.epochs):
        order = order_rng.permutation(len(train_recs))
        sums = {"loc_a": 0.0, "loc_v": 0.0, "rank": 0.0, "svn": 0.0, "total": 0.0}
        for batch in _chunks(order, tcfg.batch_size):
            model.params.zero_grads()
            for idx in batch:
                rec = train_recs[int(idx)]
                # Per-clip-stable sampling: re-rolling the witness selection
                # every epoch starves each query of consistent gradient.
                fwd = model.forward_clip(rec, run_cfg.loss,
                                         _mix_seed(tcfg.seed, rec.clip_id),
                                         variant=variant)
                if not math.isfinite(fwd.parts["total"]):
                    raise PipelineError(
                        f"train-diverged: non-finite loss at epoch {epoch}")
                nm.backward(fwd.loss)
                for key in sums:
                    sums[key] += fwd.parts[key]
                for key in stage_times:
                    stage_times[key] += fwd.timings.get(key, 0.0)
            opt.step(lr_at(step, total_steps, tcfg.lr, tcfg.warmup_frac),
                     1.0 / len(batch))
            step += 1
        n = len(train_recs)
        epoch_row = {key: sums[key] / n for key in sums}
        epoch_row["epoch"] = epoch
        report.epochs.append(epoch_row)
        if log_path:
            with log_path.open("a") as fh:
                fh.write(f"{epoch},{epoch_row['loc_a']:.6f},{epoch_row['loc_v']:.6f},"
                         f"{epoch_row['rank']:.6f},{epoch_row['svn']:.6f},"
                         f"{epoch_row['total']:.6f}\n")
        if out_path:
            save_checkpoint(model.params.state_dict(), str(out_path / "ckpt.bin"))
    report.wall_times = dict(stage_times)
    report.wall_times["train_total"] = time.perf_counter() - t_start

    if evaluate_final and eval_recs:
        metrics, w_values = evaluate_model(model, eval_recs, run_cfg, variant=variant)
        report.final_metrics = {"ap": metrics.ap, "ar": metrics.ar,
                                "diagnostics": metrics.diagnostics}
        report.w_a_values = w_values
        if out_path:
            (out_path / "report.json").write_text(report.to_json())
    elif out_path:
        (out_path / "report.json").write_text(report.to_json())
    return report, model


# ---------------------------------------------------------------------------
# evaluation


def _clip_predictions(model: Localizer, rec: ClipRecord, run_cfg: RunConfig,
                      variant: str) -> tuple[ClipForward, list, dict[str, list]]:
    """Fused absolute-time predictions for one clip."""
    with nm.no_grad():
        fwd = model.forward_clip(rec, run_cfg.loss, _mix_seed(run_cfg.train.seed, rec.clip_id),
                                 variant=variant, compute_loss=False)
    fused = nms_fuse(fwd.events["a"], fwd.events["v"], run_cfg.eval.nms_iou)
    data = run_cfg.data
    grids = {"a": (data.len_a, data.dt_a), "v": (data.len_v, data.dt_v)}
    preds = []
    for ev in fused:
        length, dt = grids[ev.modality]
        t0, t1 = to_absolute(ev.start, ev.dur, length, dt)
        preds.append((t0, t1, ev.conf))
    per_mod = {}
    for m in "av":
        length, dt = grids[m]
        per_mod[m] = [to_absolute(e.start, e.dur, length, dt) + (e.conf,)
                      for e in fwd.events[m]]
    return fwd, preds, per_mod


def evaluate_model(model: Localizer, records: list[ClipRecord], run_cfg: RunConfig,
                   variant: str = "full") -> tuple[MetricReport, list[float]]:
    """Metric report over an evaluation split, plus per-clip budget weights."""
    ecfg = run_cfg.eval
    data = run_cfg.data
    horizon_ok = abs(data.len_a * data.dt_a - data.len_v * data.dt_v) < 1e-9
    if not horizon_ok:
        raise PipelineError("eval-config: modality horizons differ")
    duration = data.len_a * data.dt_a

    def run_one(rec):
        return _clip_predictions(model, rec, run_cfg, variant)

    workers = worker_count()
    if workers == 1:
        results = [run_one(rec) for rec in records]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, records))

    preds_per_clip = [preds for _, preds, _ in results]
    gts_per_clip = [[(s * duration, (s + d) * duration) for s, d in rec.all_events()]
                    for rec in records]
    for rec, (fwd, _, _) in zip(records, results):
        if fwd.alloc is not None:
            alloc = fwd.alloc
            if alloc.steps_a + alloc.steps_v > model.cfg.s_tgt:
                raise PipelineError("budget-overflow: step budget exceeded")
            if alloc.count_a + alloc.count_v > model.cfg.n_events:
                raise PipelineError("budget-overflow: event budget exceeded")
    report = compute_report(preds_per_clip, gts_per_clip, ecfg.ap_thresholds,
                            ecfg.ar_budgets)
    if ecfg.per_modality:
        for m in "av":
            mod_preds = [per_mod[m] for _, _, per_mod in results]
            mod_gts = [[(s * duration, (s + d) * duration) for s, d in rec.events_for(m)]
                       for rec in records]
            if any(mod_gts):
                sub = compute_report(mod_preds, mod_gts, ecfg.ap_thresholds, ecfg.ar_budgets)
                report.diagnostics[f"ap_{m}"] = sub.ap
                report.diagnostics[f"ar_{m}"] = sub.ar
    w_values = [fwd.weights[0] for fwd, _, _ in results if fwd.weights is not None]
    return report, w_values


def evaluate_checkpoint(ckpt_path: str, records: list[ClipRecord],
                        run_cfg: RunConfig) -> MetricReport:
    model = Localizer(run_cfg.model, seed=run_cfg.train.seed)
    model.params.load_state(load_checkpoint(ckpt_path))
    report, _ = evaluate_model(model, records, run_cfg)
    return report


# ---------------------------------------------------------------------------
# ablations


def ablate_steps(run_cfg: RunConfig, steps_list: list[int],
                 datasets=None) -> tuple[str, list[dict]]:
    """Train and evaluate one model per step budget with shared seeds."""
    if not steps_list:
        raise PipelineError("ablate-steps: empty step list")
    if any(s < 0 or s % 2 for s in steps_list):
        raise PipelineError("ablate-steps: budgets must be even and >= 0")
    datasets = datasets if datasets is not None else build_datasets(run_cfg)
    rows = []
    for s_tgt in steps_list:
        cfg = run_cfg.scaled(s_tgt=s_tgt)
        report, _ = train(cfg, datasets=datasets, evaluate_final=True)
        ap = report.final_metrics["ap"]
        ar = report.final_metrics["ar"]
        rows.append({"s_tgt": s_tgt, "ap_0.5": ap[0.5], "ap_0.75": ap[0.75],
                     "ap_0.95": ap[0.95], "ar_10": ar[10]})
    lines = ["S_tgt,AP@0.5,AP@0.75,AP@0.95,AR@10"]
    for row in rows:
        lines.append(f"{row['s_tgt']},{row['ap_0.5']:.4f},{row['ap_0.75']:.4f},"
                     f"{row['ap_0.95']:.4f},{row['ar_10']:.4f}")
    return "\n".join(lines) + "\n", rows


def ablate_structure(run_cfg: RunConfig, variant: str,
                     datasets=None) -> tuple[TrainReport, MetricReport]:
    """Train and evaluate one structural variant."""
    from .model import VARIANTS

    if variant not in VARIANTS:
        raise PipelineError(f"variant-unknown: {variant!r}")
    datasets = datasets if datasets is not None else build_datasets(run_cfg)
    report, model = train(run_cfg, datasets=datasets, variant=variant,
                          evaluate_final=False)
    metrics, w_values = evaluate_model(model, datasets[1], run_cfg, variant=variant)
    report.final_metrics = {"ap": metrics.ap, "ar": metrics.ar,
                            "diagnostics": metrics.diagnostics}
    report.w_a_values = w_values
    return report, metrics


def oracle_predictions(records: list[ClipRecord], cfg: SynthConfig,
                       nms_iou: float = 0.75) -> list[list[tuple[float, float, float]]]:
    """Planted-signature detector output in absolute time, fused across
    modalities; the evaluation upper bound."""
    from .synth import detect_events

    duration = cfg.len_a * cfg.dt_a
    preds = []
    for rec in records:
        found = detect_events(rec, cfg)
        fused = nms_fuse(found["a"], found["v"], nms_iou)
        preds.append([(e.start * duration, (e.start + e.dur) * duration, e.conf)
                      for e in fused])
    return preds
