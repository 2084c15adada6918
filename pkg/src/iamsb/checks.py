"""Invariant batteries behind ``iamsb check --suite ...``.

Each suite returns (passed, lines); the same entry points back the
acceptance tests so the CLI and pytest agree on what correctness means.
"""

from __future__ import annotations

import io
import math

import numpy as np

from . import numerics as nm
from . import witness as wb
from .intervals import (average_precision, average_precision_bruteforce,
                        average_recall, average_recall_bruteforce,
                        match_cost, match_events, match_events_bruteforce)
from .losses import LossConfig
from .model import Localizer, tiny_model_config
from .numerics import ParamStore, Tensor, finite_diff_grad, max_relative_error
from .synth import SynthConfig, generate_clip

GRAD_TOL = 1e-4


def _op_cases(rng: np.random.Generator):
    """(name, op, input arrays) per differentiable op, small random shapes."""

    def rnd(*shape, low=-1.0, high=1.0):
        return rng.uniform(low, high, size=shape)

    gather_idx = np.array([[0, 2], [1, 1]], dtype=np.intp)
    return [
        ("add", nm.add, [rnd(4, 5), rnd(4, 5)]),
        ("add-broadcast", nm.add, [rnd(4, 5), rnd(5)]),
        ("sub", nm.sub, [rnd(3, 7), rnd(3, 7)]),
        ("mul", nm.mul, [rnd(4, 4), rnd(4, 4)]),
        ("mul-broadcast", nm.mul, [rnd(4, 4), rnd(1, 4)]),
        ("div", nm.div, [rnd(4, 3), rnd(4, 3, low=0.5, high=2.0)]),
        ("neg", nm.neg, [rnd(5)]),
        ("matmul-2d", nm.matmul, [rnd(4, 3), rnd(3, 5)]),
        ("matmul-3d", nm.matmul, [rnd(2, 4, 3), rnd(2, 3, 5)]),
        ("matmul-3d-2d", nm.matmul, [rnd(2, 4, 3), rnd(3, 5)]),
        ("matmul-vec", nm.matmul_vec, [rnd(4, 6), rnd(6)]),
        ("exp", nm.exp, [rnd(4, 4)]),
        ("log", nm.log, [rnd(4, 4, low=0.3, high=2.0)]),
        ("sqrt", nm.sqrt, [rnd(4, 4, low=0.3, high=2.0)]),
        ("tanh", nm.tanh, [rnd(4, 4)]),
        ("silu", nm.silu, [rnd(4, 4)]),
        ("softplus", nm.softplus, [rnd(4, 4)]),
        ("abs", nm.absolute,
         [rnd(4, 4, low=0.2, high=1.0) * rng.choice([-1.0, 1.0], size=(4, 4))]),
        ("relu", nm.relu, [rnd(4, 4, low=0.2, high=1.0) * rng.choice([-1.0, 1.0], size=(4, 4))]),
        ("huber", lambda a: nm.huber(a, 0.5), [rnd(4, 4)]),
        ("clamp", lambda a: nm.clamp(a, -0.4, 0.4), [rnd(4, 4)]),
        ("maximum", nm.maximum, [rnd(4, 4), rnd(4, 4)]),
        ("minimum", nm.minimum, [rnd(4, 4), rnd(4, 4)]),
        ("softmax", lambda a: nm.softmax(a, axis=-1), [rnd(5, 6)]),
        ("softmax-axis0", lambda a: nm.softmax(a, axis=0), [rnd(5, 6)]),
        ("layer-norm", nm.layer_norm, [rnd(4, 6), rnd(6, low=0.5, high=1.5), rnd(6)]),
        ("sum-all", nm.tsum, [rnd(4, 5)]),
        ("sum-axis", lambda a: nm.tsum(a, axis=1), [rnd(4, 5)]),
        ("sum-keepdims", lambda a: nm.tsum(a, axis=0, keepdims=True), [rnd(4, 5)]),
        ("mean", lambda a: nm.tmean(a, axis=1), [rnd(4, 5)]),
        ("amax-all", nm.amax, [rnd(4, 5)]),
        ("amax-axis", lambda a: nm.amax(a, axis=1), [rnd(4, 5)]),
        ("square-norm", nm.square_norm, [rnd(4, 5)]),
        ("reshape", lambda a: nm.reshape(a, (2, 10)), [rnd(4, 5)]),
        ("moveaxis", lambda a: nm.moveaxis(a, 0, 2), [rnd(3, 4, 5)]),
        ("concat", lambda a, b: nm.concat([a, b], axis=1), [rnd(4, 2), rnd(4, 3)]),
        ("gather", lambda a: nm.gather(a, gather_idx), [rnd(4, 5)]),
    ]


def check_grad_ops(seed: int = 0) -> tuple[bool, list[str]]:
    """Every differentiable op against the central-difference oracle."""
    rng = np.random.default_rng(seed)
    lines = []
    passed = True
    for name, op, arrays in _op_cases(rng):
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        named = [(f"x{i}", t) for i, t in enumerate(tensors)]
        weight = rng.normal(size=op(*tensors).shape)

        def f():
            return nm.tsum(nm.mul(op(*tensors), weight)).item()

        loss = nm.tsum(nm.mul(op(*tensors), weight))
        for _, t in named:
            t.grad = None
        nm.backward(loss)
        bp = {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
              for n, t in named}
        fd = finite_diff_grad(f, named)
        err = max_relative_error(bp, fd)
        ok = err <= GRAD_TOL
        passed &= ok
        lines.append(f"{'PASS' if ok else 'FAIL'} grad[{name}] rel-err {err:.2e}")
    return passed, lines


def toy_clip_config() -> SynthConfig:
    return SynthConfig(clips=1, len_a=12, len_v=12, channels=6, dt_a=0.25, dt_v=0.25,
                       regime="mixed", events_min=2, events_max=2,
                       dur_min=0.15, dur_max=0.3, strength=1.5, noise=0.4, seed=13)


def check_grad_end_to_end(seed: int = 0) -> tuple[bool, list[str]]:
    """Full loss on a 2-event toy clip against finite differences.

    The witness plan (candidate triples, indices, budgets, probe values,
    matchings) is recorded once and replayed, so the differentiated function
    is exactly the one being perturbed.
    """
    cfg = tiny_model_config()
    model = Localizer(cfg, seed=seed)
    clip = generate_clip(toy_clip_config(), 5)
    loss_cfg = LossConfig()
    first = model.forward_clip(clip, loss_cfg, sample_seed=3)
    plan = first.plan

    live = model.forward_clip(clip, loss_cfg, sample_seed=3, plan=plan)
    bp = model.params.gradients(live.loss)

    def f():
        with nm.no_grad():
            out = model.forward_clip(clip, loss_cfg, sample_seed=3, plan=plan)
        return out.parts["total"]

    fd = finite_diff_grad(f, model.params.items())
    err = max_relative_error(bp, fd)
    ok = err <= GRAD_TOL
    line = f"{'PASS' if ok else 'FAIL'} grad[end-to-end toy clip] rel-err {err:.2e}"
    return ok, [line]


def check_grad(seed: int = 0) -> tuple[bool, list[str]]:
    ok1, lines1 = check_grad_ops(seed)
    ok2, lines2 = check_grad_end_to_end(seed)
    return ok1 and ok2, lines1 + lines2


# ---------------------------------------------------------------------------


def check_sinkhorn(seed: int = 0, instances: int = 100,
                   csv_out: io.TextIOBase | None = None) -> tuple[bool, list[str]]:
    """Marginal residuals on random augmented instances up to 64x64, plus the
    near-diagonal 2x2 recovery case."""
    rng = np.random.default_rng(seed)
    lines = []
    passed = True
    wcfg = wb.WsbConfig()
    if csv_out is not None:
        csv_out.write("instance,residual_row,residual_col,T,U,H,C_inc\n")
    for i in range(instances):
        n = int(rng.integers(2, 65))
        cost = rng.uniform(0.0, 1.0, size=(n, n))
        conf_a = rng.uniform(0.05, 1.0, size=n)
        conf_v = rng.uniform(0.05, 1.0, size=n)
        mass = max(conf_a.sum(), conf_v.sum())
        a_aug = np.concatenate([conf_a / mass, [1.0 - conf_a.sum() / mass + wcfg.slack_mass]])
        b_aug = np.concatenate([conf_v / mass, [1.0 - conf_v.sum() / mass + wcfg.slack_mass]])
        slack = cost.max()
        padded = np.full((n + 1, n + 1), slack)
        padded[:n, :n] = cost
        padded[n, n] = 0.0
        pi, _ = wb.sinkhorn_converged(padded, a_aug, b_aug, wcfg.eps_reg, tol=1e-8)
        r_row, r_col = wb.sinkhorn_residuals(pi, a_aug, b_aug)
        ok = r_row <= 1e-6 and r_col <= 1e-6
        passed &= ok
        if not ok:
            lines.append(f"FAIL sinkhorn[{i}] n={n} residuals {r_row:.2e}/{r_col:.2e}")
        if csv_out is not None:
            real = Tensor(pi[:n, :n])
            iou = rng.uniform(0.0, 1.0, size=(n, n))
            stats = wb.transport_stats(real, cost, iou, wcfg.eps_stab)
            csv_out.write(f"{i},{r_row:.3e},{r_col:.3e},{float(stats.total.data):.6f},"
                          f"{float(stats.unmatched.data):.6f},{float(stats.entropy.data):.6f},"
                          f"{float(stats.inconsistency.data):.6f}\n")
    lines.append(f"{'PASS' if passed else 'FAIL'} sinkhorn[{instances} random augmented instances]")

    cost2 = np.array([[0.0, 10.0], [10.0, 0.0]])
    pi2 = wb.sinkhorn(cost2, np.array([0.5, 0.5]), np.array([0.5, 0.5]),
                      eps_reg=0.05, iters=200)
    off = max(float(pi2.data[0, 1]), float(pi2.data[1, 0]))
    diag_ok = (off <= 1e-10 and abs(float(pi2.data[0, 0]) - 0.5) < 1e-9
               and abs(float(pi2.data[1, 1]) - 0.5) < 1e-9)
    passed &= diag_ok
    lines.append(f"{'PASS' if diag_ok else 'FAIL'} sinkhorn[diag 2x2] off-diagonal {off:.2e}")
    return passed, lines


# ---------------------------------------------------------------------------


def _random_metric_instance(rng: np.random.Generator):
    n_clips = int(rng.integers(1, 4))
    preds_per_clip, gts_per_clip = [], []
    total = 0
    for _ in range(n_clips):
        n_p = int(rng.integers(0, 5))
        n_g = int(rng.integers(0, 4))
        if total + n_p + n_g > 8:
            n_p = min(n_p, max(0, 8 - total))
            n_g = min(n_g, max(0, 8 - total - n_p))
        total += n_p + n_g
        preds = []
        for _ in range(n_p):
            s = rng.uniform(0.0, 0.8)
            e = s + rng.uniform(0.05, 0.5)
            preds.append((s, e, float(rng.choice([0.9, 0.7, 0.5, 0.3, 0.7]))))
        gts = []
        for _ in range(n_g):
            s = rng.uniform(0.0, 0.8)
            gts.append((s, s + rng.uniform(0.05, 0.5)))
        preds_per_clip.append(preds)
        gts_per_clip.append(gts)
    return preds_per_clip, gts_per_clip


def check_metrics(seed: int = 0, instances: int = 100) -> tuple[bool, list[str]]:
    """Fast-path AP/AR equal to the brute-force oracle, exactly."""
    rng = np.random.default_rng(seed)
    passed = True
    lines = []
    checked = 0
    while checked < instances:
        preds, gts = _random_metric_instance(rng)
        if sum(len(g) for g in gts) == 0:
            continue
        checked += 1
        thr = float(rng.choice([0.3, 0.5, 0.75]))
        n = int(rng.integers(1, 9))
        ap_fast = average_precision(preds, gts, thr)
        ap_oracle = average_precision_bruteforce(preds, gts, thr)
        ar_fast = average_recall(preds, gts, n)
        ar_oracle = average_recall_bruteforce(preds, gts, n)
        if ap_fast != ap_oracle or ar_fast != ar_oracle:
            passed = False
            lines.append(f"FAIL metrics[{checked}] ap {ap_fast} vs {ap_oracle}, "
                         f"ar {ar_fast} vs {ar_oracle}")
    lines.append(f"{'PASS' if passed else 'FAIL'} metrics[{instances} random instances, "
                 "AP and AR == brute force]")

    match_ok = True
    for _ in range(50):
        n_p, n_g = int(rng.integers(0, 6)), int(rng.integers(0, 6))
        preds = [(s, s + rng.uniform(0.05, 0.4)) for s in rng.uniform(0, 0.7, size=n_p)]
        gts = [(s, s + rng.uniform(0.05, 0.4)) for s in rng.uniform(0, 0.7, size=n_g)]
        fast_pairs, _ = match_events(preds, gts)
        oracle_pairs, _ = match_events_bruteforce(preds, gts)
        if len(fast_pairs) != len(oracle_pairs) or not math.isclose(
                match_cost(preds, gts, fast_pairs),
                match_cost(preds, gts, oracle_pairs), abs_tol=1e-9):
            match_ok = False
    passed &= match_ok
    lines.append(f"{'PASS' if match_ok else 'FAIL'} matching[50 random instances == exhaustive]")
    return passed, lines


# ---------------------------------------------------------------------------


def check_budget() -> tuple[bool, list[str]]:
    """The three hand-traced allocation cases plus invariants."""
    lines = []
    passed = True
    cases = [
        ((0.5, 0.5, 12, 20), (6, 6, 10, 10)),
        ((0.7, 0.3, 12, 20), (8, 4, 14, 6)),
        ((0.5, 0.5, 10, 20), (4, 6, 10, 10)),
    ]
    for (w_a, w_v, s_tgt, n_ev), want in cases:
        alloc = wb.split_budget(w_a, w_v, s_tgt, n_ev)
        got = (alloc.steps_a, alloc.steps_v, alloc.count_a, alloc.count_v)
        ok = got == want
        passed &= ok
        lines.append(f"{'PASS' if ok else 'FAIL'} budget w=({w_a},{w_v}) "
                     f"S_tgt={s_tgt} -> {got} (want {want})")
    rng = np.random.default_rng(1)
    inv_ok = True
    for _ in range(500):
        w_a = float(rng.uniform())
        s_tgt = 2 * int(rng.integers(0, 12))
        n_ev = 2 * int(rng.integers(1, 33))
        alloc = wb.split_budget(w_a, 1.0 - w_a, s_tgt, n_ev)
        if (alloc.steps_a % 2 or alloc.steps_v % 2 or alloc.steps_a < 0 or alloc.steps_v < 0
                or alloc.steps_a + alloc.steps_v > s_tgt
                or alloc.count_a % 2 or alloc.count_v % 2
                or alloc.count_a + alloc.count_v > n_ev):
            inv_ok = False
    passed &= inv_ok
    lines.append(f"{'PASS' if inv_ok else 'FAIL'} budget invariants over 500 random splits")
    return passed, lines


# ---------------------------------------------------------------------------


SUITES = ("sinkhorn", "grad", "metrics", "budget", "all")


def run_suite(name: str, csv_out: io.TextIOBase | None = None) -> tuple[bool, list[str]]:
    if name == "grad":
        return check_grad()
    if name == "sinkhorn":
        return check_sinkhorn(csv_out=csv_out)
    if name == "metrics":
        return check_metrics()
    if name == "budget":
        return check_budget()
    if name == "all":
        passed = True
        lines: list[str] = []
        for sub in ("grad", "sinkhorn", "metrics", "budget"):
            ok, sub_lines = run_suite(sub, csv_out=csv_out if sub == "sinkhorn" else None)
            passed &= ok
            lines.extend(sub_lines)
        return passed, lines
    raise ValueError(f"suite-unknown: {name!r}")
