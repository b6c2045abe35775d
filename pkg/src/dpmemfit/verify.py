"""Self-contained correctness suites behind the `verify` command.

Every check re-derives its expected value independently of the code under
test: finite differences for gradients, dense per-example backward passes
for the norm machinery, closed forms for the accountant, and ledger
measurements against the footprint formulas. A suite never weakens a
tolerance to pass; a red check is a finding.

The ghostnorm suite also audits itself: it flips the sign of the ghost
norm through a dedicated fault hook and confirms its own comparison
catches the corruption.
"""

from __future__ import annotations

import json
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import clipping
from . import engine as E
from .clipping import (
    GHOST,
    INSTANTIATE,
    ClipPlan,
    bk_clip_step,
    build_clip_plan,
    naive_per_sample_grads,
)
from .errors import ConfigError
from .ledger import MemoryLedger
from .memmodel import predict, scaling_fit
from .models import (
    F_KINDS,
    MODEL_KINDS,
    AdapterConfig,
    BackboneConfig,
    LoRAConfig,
    RevConfig,
    SideConfig,
    build_model,
)
from .privacy import (
    DEFAULT_ORDERS,
    AccountantState,
    calibrate_sigma,
    rdp_subsampled_gaussian,
    spent_epsilon,
)

SUITES = ("gradcheck", "ghostnorm", "reversible", "accountant", "memconf")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "detail": self.detail,
            "seconds": round(self.seconds, 4),
        }


@dataclass
class SuiteReport:
    suite: str
    checks: list[CheckResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "passed": self.passed,
            "seconds": round(self.seconds, 4),
            "checks": [c.to_dict() for c in self.checks],
        }


@dataclass
class VerifyRun:
    suites: list[SuiteReport]

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "suites": [s.to_dict() for s in self.suites]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def summary_lines(self) -> list[str]:
        lines = []
        for s in self.suites:
            for c in s.checks:
                mark = "PASS" if c.passed else "FAIL"
                lines.append(f"[{mark}] {s.suite}.{c.name}: {c.detail}")
            lines.append(
                f"suite {s.suite}: {'PASS' if s.passed else 'FAIL'} "
                f"({len(s.checks)} checks, {s.seconds:.1f}s)")
        lines.append(f"verify: {'PASS' if self.passed else 'FAIL'}")
        return lines


class _Collector:
    """Runs named check bodies, timing them and trapping exceptions."""

    def __init__(self):
        self.checks: list[CheckResult] = []

    def run(self, name: str, fn) -> None:
        t0 = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception:
            passed = False
            detail = "raised: " + traceback.format_exc(limit=3).strip().replace("\n", " | ")
        self.checks.append(
            CheckResult(name, bool(passed), str(detail), time.perf_counter() - t0))


# -- shared model helpers ------------------------------------------------------


def _backbone(**over) -> BackboneConfig:
    kw = dict(depth=2, width=12, ffn_hidden=16, vocab=13, seq_len=6, num_classes=3)
    kw.update(over)
    return BackboneConfig(**kw)


def _tuning(kind: str, **over):
    if kind == "lora":
        return LoRAConfig(rank=3, **over)
    if kind == "adapter":
        return AdapterConfig(bottleneck=4, **over)
    if kind == "side":
        return SideConfig(reduction=4, **over)
    if kind == "reversible":
        kw = dict(f_rank=4, g_bottleneck=4)
        kw.update(over)
        return RevConfig(**kw)
    return None


def _make(kind: str, cfg=None, seed=0, dtype="float64", **tuning_over):
    cfg = cfg or _backbone()
    return build_model(kind, cfg, _tuning(kind, **tuning_over), seed=seed, dtype=dtype)


def _batch(cfg: BackboneConfig, B: int, seed: int):
    rng = np.random.default_rng(seed)
    tok = rng.integers(0, cfg.vocab, size=(B, cfg.seq_len))
    lab = rng.integers(0, cfg.num_classes, size=B)
    return tok, lab


def _perturb(model, scale=0.05, seed=7) -> None:
    # zero-init mechanisms must carry signal before their gradients mean much
    rng = np.random.default_rng(seed)
    for p in model.trainable_parameters():
        p.tensor.numpy()[...] += scale * rng.standard_normal(p.shape)


def _loss_value(model, tok, lab) -> float:
    per = model.forward_loss(tok, lab)
    v = float(per.numpy().sum())
    model.zero_grad()
    return v


def _analytic_grads(model, tok, lab) -> dict[str, np.ndarray]:
    model.zero_grad()
    per = model.forward_loss(tok, lab)
    model.backward(E.sum_all(per))
    out = {p.name: p.grad.numpy().copy() for p in model.trainable_parameters() if p.grad is not None}
    model.zero_grad()
    return out


# -- gradcheck -----------------------------------------------------------------


def _fd_worst(model, tok, lab, per_param=3, seed=3) -> float:
    grads = _analytic_grads(model, tok, lab)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in model.trainable_parameters():
        if p.name not in grads:
            return float("inf")
        an = grads[p.name].reshape(-1)
        flat = p.tensor.numpy().reshape(-1)
        idxs = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        for k in idxs:
            orig = flat[k]
            h = 1e-6 * max(1.0, abs(orig))
            flat[k] = orig + h
            lp = _loss_value(model, tok, lab)
            flat[k] = orig - h
            lm = _loss_value(model, tok, lab)
            flat[k] = orig
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - an[k]) / max(abs(fd), abs(an[k]), 1e-8)
            worst = max(worst, rel)
    return worst


def _gradcheck_suite(col: _Collector, seed: int) -> None:
    tol = 1e-4

    def kind_check(kind):
        def body():
            m = _make(kind, seed=seed)
            _perturb(m, seed=seed + 7)
            tok, lab = _batch(m.backbone, B=3, seed=seed + 11)
            worst = _fd_worst(m, tok, lab)
            return worst < tol, f"worst FD rel err {worst:.3e} (tol {tol})"
        return body

    for kind in MODEL_KINDS:
        col.run(kind, kind_check(kind))

    def nonlin_check(nl):
        def body():
            m = _make("full", cfg=_backbone(depth=1, nonlinearity=nl), seed=seed)
            tok, lab = _batch(m.backbone, B=3, seed=seed + 11)
            worst = _fd_worst(m, tok, lab)
            return worst < tol, f"worst FD rel err {worst:.3e} (tol {tol})"
        return body

    for nl in ("gelu", "tanh"):
        col.run(f"nonlinearity-{nl}", nonlin_check(nl))

    def fkind_check(fk):
        def body():
            m = _make("reversible", seed=seed, f_kind=fk)
            _perturb(m, seed=seed + 7)
            tok, lab = _batch(m.backbone, B=3, seed=seed + 11)
            worst = _fd_worst(m, tok, lab)
            return worst < tol, f"worst FD rel err {worst:.3e} (tol {tol})"
        return body

    for fk in F_KINDS:
        col.run(f"mechanism-{fk}", fkind_check(fk))


# -- ghostnorm -----------------------------------------------------------------


def _forced_plan(model, T: int, C: float, force: str) -> ClipPlan:
    base = build_clip_plan(model, T, C)
    per_layer = {
        n: (force if s in (GHOST, INSTANTIATE) else s)
        for n, s in base.per_layer.items()
    }
    return ClipPlan(per_layer=per_layer, clip_bound=C)


def _oracle_norms_and_sums(model, tok, lab, C: float):
    per_ex = naive_per_sample_grads(model, tok, lab)
    norms = np.array([sum(float((g ** 2).sum()) for g in ex.values()) for ex in per_ex])
    with np.errstate(divide="ignore"):
        factors = np.minimum(1.0, C / np.sqrt(norms))
    sums: dict[str, np.ndarray] = {}
    for f, ex in zip(factors, per_ex):
        for name, g in ex.items():
            sums[name] = sums.get(name, 0.0) + f * g
    return norms, sums


def _norm_discrepancy(model, tok, lab, C: float, force: str) -> float:
    oracle_norms, oracle_sums = _oracle_norms_and_sums(model, tok, lab, C)
    model.zero_grad()
    with np.errstate(invalid="ignore"):
        res = bk_clip_step(model, tok, lab, _forced_plan(model, tok.shape[1], C, force))
    got_norms = res.norms.total
    worst = float(np.max(np.abs(got_norms - oracle_norms) / np.maximum(np.abs(oracle_norms), 1e-12)))
    for p in model.trainable_parameters():
        ref = oracle_sums.get(p.name)
        if ref is None or p.grad is None:
            return float("inf")
        got = p.grad.numpy()
        rel = float(np.max(np.abs(got - ref)) / max(float(np.max(np.abs(ref))), 1e-12))
        worst = max(worst, rel)
    model.zero_grad()
    return worst


def _random_ghost_cases(seed: int, n: int):
    rng = np.random.default_rng(seed)
    kinds = ("full", "bitfit", "lora", "adapter", "side")
    for i in range(n):
        kind = kinds[int(rng.integers(len(kinds)))]
        width = int(rng.integers(1, 4)) * 4  # side needs width % reduction == 0
        cfg = _backbone(
            depth=int(rng.integers(1, 3)),
            width=width,
            ffn_hidden=int(rng.integers(4, 13)),
            vocab=int(rng.integers(5, 13)),
            seq_len=int(rng.integers(2, 7)),
        )
        m = _make(kind, cfg=cfg, seed=seed + i)
        _perturb(m, seed=seed + i)
        tok, lab = _batch(cfg, B=int(rng.integers(2, 5)), seed=seed + 100 + i)
        yield kind, m, tok, lab


def _ghostnorm_suite(col: _Collector, seed: int) -> None:
    tol = 1e-8

    def random_configs():
        worst, n = 0.0, 0
        for _, m, tok, lab in _random_ghost_cases(seed, 20):
            worst = max(worst, _norm_discrepancy(m, tok, lab, C=0.5, force=GHOST))
            n += 1
        return worst < tol, f"max rel err {worst:.3e} over {n} configs (tol {tol})"

    col.run("ghost-vs-direct", random_configs)

    def instantiate_agrees():
        worst, n = 0.0, 0
        for _, m, tok, lab in _random_ghost_cases(seed + 50, 8):
            worst = max(worst, _norm_discrepancy(m, tok, lab, C=0.5, force=INSTANTIATE))
            n += 1
        return worst < tol, f"max rel err {worst:.3e} over {n} configs (tol {tol})"

    col.run("instantiate-vs-direct", instantiate_agrees)

    def mixed_plan_agrees():
        m = _make("full", cfg=_backbone(depth=2), seed=seed)
        _perturb(m, seed=seed)
        tok, lab = _batch(m.backbone, B=4, seed=seed + 1)
        oracle_norms, _ = _oracle_norms_and_sums(m, tok, lab, C=0.5)
        m.zero_grad()
        with np.errstate(invalid="ignore"):
            res = bk_clip_step(m, tok, lab, build_clip_plan(m, m.backbone.seq_len, 0.5))
        worst = float(np.max(np.abs(res.norms.total - oracle_norms) / oracle_norms))
        m.zero_grad()
        return worst < tol, f"max rel err {worst:.3e} with auto-chosen strategies (tol {tol})"

    col.run("auto-plan-vs-direct", mixed_plan_agrees)

    def fault_is_caught():
        m = _make("lora", seed=seed)
        _perturb(m, seed=seed)
        tok, lab = _batch(m.backbone, B=3, seed=seed + 2)
        clean = _norm_discrepancy(m, tok, lab, C=0.5, force=GHOST)
        clipping.FAULT_FLIP_GHOST_SIGN = True
        try:
            corrupted = _norm_discrepancy(m, tok, lab, C=0.5, force=GHOST)
        finally:
            clipping.FAULT_FLIP_GHOST_SIGN = False
        caught = clean < tol and not (corrupted < tol)
        return caught, (
            f"sign-flipped norms produce max rel err {corrupted:.3e} "
            f"(clean run {clean:.3e}, tol {tol})")

    col.run("fault-injection-caught", fault_is_caught)


# -- reversible ----------------------------------------------------------------


def _reversible_suite(col: _Collector, seed: int) -> None:
    def block_roundtrip():
        worst = 0.0
        rng = np.random.default_rng(seed)
        for fk in F_KINDS:
            m = _make("reversible", seed=seed, f_kind=fk, alpha=0.8, beta=0.9)
            _perturb(m, seed=seed)
            B, T, d = 3, m.backbone.seq_len, m.backbone.width
            for i in range(1, m.backbone.depth + 1):
                with E.no_grad():
                    x1 = E.Tensor(rng.standard_normal((B, T, d)))
                    x2 = E.Tensor(rng.standard_normal((B, T, d)))
                    y1, y2 = m._pair_forward(i, x1, x2)
                    r1, r2 = m.pair_inverse(i, y1, y2)
                worst = max(worst,
                            float(np.max(np.abs(r1.numpy() - x1.numpy()))),
                            float(np.max(np.abs(r2.numpy() - x2.numpy()))))
        return worst < 1e-10, f"max reconstruction err {worst:.3e} over f kinds (tol 1e-10)"

    col.run("block-inverse-roundtrip", block_roundtrip)

    def deep_f32_walk():
        cfg = _backbone(depth=8)
        m = build_model("reversible", cfg, RevConfig(f_rank=4, g_bottleneck=4),
                        seed=seed, dtype="float32")
        _perturb(m, scale=0.02, seed=seed)
        tok, _ = _batch(cfg, B=3, seed=seed + 5)
        x1v, x2v = m.final_pair(tok)
        with E.no_grad():
            s1, s2 = E.Tensor(x1v), E.Tensor(x2v)
            for i in range(cfg.depth, 0, -1):
                if i == 1 and m.rev.exchange_after_first:
                    s1, s2 = s2, s1
                s1, s2 = m.pair_inverse(i, s1, s2)
            r1, r2 = s1.numpy().copy(), s2.numpy().copy()
        x0 = m.params["embed"].tensor.numpy()[tok]
        worst = max(float(np.max(np.abs(r1 - x0))), float(np.max(np.abs(r2 - x0))))
        return worst < 1e-4, f"depth-8 float32 inverse walk err {worst:.3e} (tol 1e-4)"

    col.run("deep-float32-inverse-walk", deep_f32_walk)

    def recompute_matches_reference():
        worst = 0.0
        for fk in F_KINDS:
            m = _make("reversible", seed=seed, f_kind=fk, alpha=0.9, beta=0.85)
            _perturb(m, seed=seed)
            tok, lab = _batch(m.backbone, B=3, seed=seed + 6)
            got = _analytic_grads(m, tok, lab)
            ref = _reference_grads_on_plain_tape(m, tok, lab)
            if set(got) != set(ref):
                return False, f"gradient key sets differ for {fk}"
            for name, g in ref.items():
                rel = float(np.max(np.abs(got[name] - g)) / max(float(np.max(np.abs(g))), 1e-12))
                worst = max(worst, rel)
        return worst < 1e-8, f"max recompute-vs-stored grad err {worst:.3e} (tol 1e-8)"

    col.run("recompute-grads-match-stored", recompute_matches_reference)


def _reference_grads_on_plain_tape(m, tok, lab) -> dict[str, np.ndarray]:
    # same walk, recorded on an everything-retained tape instead of the
    # inversion-based backward
    m.zero_grad()
    tape = E.Tape("store-all")
    tape.__enter__()
    try:
        x1, x2 = m._stream_walk(np.asarray(tok))
        mid = E.scale(E.add(x1, x2), 0.5)
        logits = m._linear(E.mean_over_time(mid), "head")
        loss = E.sum_all(E.per_example_loss(logits, np.asarray(lab)))
    finally:
        tape.__exit__(None, None, None)
    E.backward(tape, loss)
    out = {p.name: p.grad.numpy().copy() for p in m.trainable_parameters() if p.grad is not None}
    m.zero_grad()
    return out


# -- accountant ----------------------------------------------------------------


def _accountant_suite(col: _Collector, seed: int) -> None:
    def closed_form_q1():
        worst = 0.0
        orders = np.asarray(DEFAULT_ORDERS)
        for sigma in (0.5, 1.0, 3.0):
            got = rdp_subsampled_gaussian(1.0, sigma, orders)
            want = orders / (2.0 * sigma * sigma)
            worst = max(worst, float(np.max(np.abs(got - want) / want)))
        return worst < 1e-12, f"q=1 vs plain-mechanism closed form rel err {worst:.3e} (tol 1e-12)"

    col.run("plain-gaussian-closed-form", closed_form_q1)

    def monotone():
        q, delta, steps = 32 / 50000, 2e-5, 2000
        by_sigma = [spent_epsilon(q, s, steps, delta).epsilon for s in (0.5, 0.8, 1.2, 2.0, 4.0)]
        if not all(a > b for a, b in zip(by_sigma, by_sigma[1:])):
            return False, f"epsilon not decreasing in sigma: {by_sigma}"
        by_steps = [spent_epsilon(q, 1.0, t, delta).epsilon for t in (500, 1000, 2000, 4000)]
        if not all(a < b for a, b in zip(by_steps, by_steps[1:])):
            return False, f"epsilon not increasing in steps: {by_steps}"
        by_q = [spent_epsilon(qq, 1.0, steps, delta).epsilon for qq in (1e-4, 1e-3, 1e-2, 1e-1)]
        if not all(a < b for a, b in zip(by_q, by_q[1:])):
            return False, f"epsilon not increasing in sampling rate: {by_q}"
        return True, "epsilon monotone in sigma, steps, and sampling rate"

    col.run("monotonicity", monotone)

    def calibration_window():
        q, delta, steps = 32 / 50000, 2e-5, 10_000
        spent = {}
        for target in (1.6, 8.0):
            sigma = calibrate_sigma(target, delta, q, steps)
            spent[target] = spent_epsilon(q, sigma, steps, delta).epsilon
            if not (0.99 * target <= spent[target] <= target):
                return False, f"target {target}: spent {spent[target]:.6f} outside [0.99t, t]"
        return True, ("calibrated spend " + ", ".join(
            f"{t} -> {e:.4f}" for t, e in spent.items()))

    col.run("calibration-window", calibration_window)

    def composition_is_additive():
        q, sigma = 0.01, 1.1
        state = AccountantState()
        for _ in range(5):
            state.record(q, sigma, 100)
        direct = rdp_subsampled_gaussian(q, sigma, state.rdp_orders) * 500
        worst = float(np.max(np.abs(state.rdp_values - direct) / np.maximum(direct, 1e-300)))
        return worst < 1e-12, f"500 recorded steps vs direct scaling rel err {worst:.3e}"

    col.run("composition-additive", composition_is_additive)


# -- memconf -------------------------------------------------------------------


def _measured_step(kind: str, cfg: BackboneConfig, B: int, tuning=None, force=None):
    led = MemoryLedger()
    with E.use_ledger(led):
        m = build_model(kind, cfg, tuning, seed=0, dtype="float64")
        plan = build_clip_plan(m, cfg.seq_len, 1.0)
        if force is not None:
            plan = ClipPlan(
                per_layer={n: (force if s in (GHOST, INSTANTIATE) else s)
                           for n, s in plan.per_layer.items()},
                clip_bound=1.0)
        tok, lab = _batch(cfg, B=B, seed=11)
        led.begin_step()
        bk_clip_step(m, tok, lab, plan)
        led.end_step()
        m.zero_grad()
        fp = predict(m, B=B, plan=plan)
    return led, fp


def _memconf_suite(col: _Collector, seed: int) -> None:
    def ghost_quadratic_in_t():
        seqs = [8, 16, 32, 64]
        measured, predicted = [], []
        for T in seqs:
            led, fp = _measured_step("lora", _backbone(seq_len=T), B=4,
                                     tuning=LoRAConfig(rank=3), force=GHOST)
            measured.append(led.peak_by_category["dp_buffers"])
            predicted.append(fp.dp_total * fp.dtype_size)
        fit = scaling_fit("T", seqs, measured, predicted)
        ok = fit.passed and 1.85 <= fit.measured_exponent <= 2.15
        return ok, f"norm-buffer exponent in T: {fit.measured_exponent:.3f} (want [1.85, 2.15])"

    col.run("ghost-buffers-quadratic-in-T", ghost_quadratic_in_t)

    def storeall_linear_in_depth():
        depths = [4, 8, 16, 32]
        measured, predicted = [], []
        for n in depths:
            led, fp = _measured_step("full", _backbone(depth=n), B=4)
            measured.append(led.peak_by_category["activations"])
            predicted.append(fp.activations * fp.dtype_size)
        fit = scaling_fit("depth", depths, measured, predicted)
        ok = fit.passed and 0.85 <= fit.measured_exponent <= 1.15
        return ok, f"retained-activation exponent in depth: {fit.measured_exponent:.3f} (want [0.85, 1.15])"

    col.run("storeall-activations-linear-in-depth", storeall_linear_in_depth)

    def reversible_flat_in_depth():
        depths = [2, 4, 8, 16]
        measured, predicted = [], []
        for n in depths:
            led, fp = _measured_step("reversible", _backbone(depth=n), B=4,
                                     tuning=RevConfig(f_rank=4, g_bottleneck=4))
            measured.append(led.peak_by_category["activations"])
            predicted.append(fp.activations * fp.dtype_size)
        fit = scaling_fit("depth", depths, measured, predicted)
        ok = fit.passed and -0.15 <= fit.measured_exponent <= 0.15
        return ok, f"retained-activation exponent in depth: {fit.measured_exponent:.3f} (want [-0.15, 0.15])"

    col.run("reversible-activations-flat-in-depth", reversible_flat_in_depth)

    def side_share_tracks_reduction():
        cfg = _backbone(depth=4, width=16, ffn_hidden=24)
        led_full, fp_full = _measured_step("full", cfg, B=4)
        led_side, fp_side = _measured_step("side", cfg, B=4, tuning=SideConfig(reduction=4))
        got = led_side.peak_by_category["activations"] / led_full.peak_by_category["activations"]
        want = (fp_side.activations * fp_side.dtype_size) / (fp_full.activations * fp_full.dtype_size)
        off = abs(got - want) / want
        return off <= 0.20, (
            f"side/full activation share measured {got:.3f} vs predicted {want:.3f} "
            f"({off * 100:.1f}% off, tol 20%)")

    col.run("side-share-matches-prediction", side_share_tracks_reduction)


_SUITE_FNS = {
    "gradcheck": _gradcheck_suite,
    "ghostnorm": _ghostnorm_suite,
    "reversible": _reversible_suite,
    "accountant": _accountant_suite,
    "memconf": _memconf_suite,
}


def run_suite(suite: str, seed: int = 0) -> SuiteReport:
    if suite not in _SUITE_FNS:
        raise ConfigError(f"unknown verify suite {suite!r}; choose from {SUITES + ('all',)}")
    col = _Collector()
    t0 = time.perf_counter()
    _SUITE_FNS[suite](col, seed)
    return SuiteReport(suite=suite, checks=col.checks, seconds=time.perf_counter() - t0)


def verify(suite: str = "all", seed: int = 0, out_dir=None) -> VerifyRun:
    """Run one suite (or all of them) and optionally write results as JSON."""
    names = SUITES if suite == "all" else (suite,)
    for name in names:
        if name not in _SUITE_FNS:
            raise ConfigError(f"unknown verify suite {name!r}; choose from {SUITES + ('all',)}")
    run = VerifyRun(suites=[run_suite(name, seed=seed) for name in names])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"verify-{suite}.json").write_text(run.to_json() + "\n", encoding="ascii")
    return run
