"""Analytic memory predictor and ledger-conformance checks.

The predictor turns a model's trainable-layer list into per-phase element
counts using the standard complexity formulas for one linear layer:

    forward         p·d + B·T·d          (weights + retained input)
    backward        B·T·(p + d) + p·d    (stream grads + weight grad)
    ghost norm      2·B·T²               (two Gram matrices)
    instantiation   B·p·d                (per-sample weight grads)
    weighted sum    0                    (pure contraction)

summed over the trainable path. Schemes that train a narrow stream get the
narrow dimensions through their own layer specs, so the substitution
d → r_s happens by construction. The recompute-based two-stream design
replaces the per-layer activation sum by a constant: two streams plus one
block's scratch, independent of depth.

Constants in these formulas elide implementation temporaries on purpose;
conformance therefore checks scaling exponents by regression, not absolute
byte equality. Measured/predicted ratios are reported as context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .clipping import GHOST, INSTANTIATE, REDUCE, build_clip_plan
from .errors import ConfigError

# -- per-layer element formulas ------------------------------------------------


def weight_forward_elements(p: int, d: int, B: int, T: int) -> int:
    return p * d + B * T * d


def weight_backward_elements(p: int, d: int, B: int, T: int) -> int:
    return B * T * (p + d) + p * d


def ghost_norm_elements(B: int, T: int) -> int:
    return 2 * B * T * T


def instantiation_elements(B: int, p: int, d: int) -> int:
    return B * p * d


def bias_reduce_elements(B: int, p: int) -> int:
    return B * p


# -- aggregate prediction --------------------------------------------------------


@dataclass
class PredictedFootprint:
    """Per-phase element counts for one configuration.

    `forward` is the Table-1 style total (weights + retained inputs);
    `activations` is its retention-only part, which is what the ledger's
    activations category measures and what the scaling fits regress on.
    """

    kind: str
    B: int
    T: int
    dtype_size: int
    forward: int = 0
    activations: int = 0
    backward: int = 0
    ghost_norm: int = 0
    instantiation: int = 0
    weighted_sum: int = 0
    optimizer: int = 0
    per_layer: dict[str, dict] = field(default_factory=dict)

    def bytes_of(self, phase: str) -> int:
        return int(getattr(self, phase)) * self.dtype_size

    @property
    def dp_total(self) -> int:
        return self.ghost_norm + self.instantiation

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "B": self.B,
            "T": self.T,
            "dtype_size": self.dtype_size,
            "elements": {
                "forward": self.forward,
                "activations": self.activations,
                "backward": self.backward,
                "ghost_norm": self.ghost_norm,
                "instantiation": self.instantiation,
                "weighted_sum": self.weighted_sum,
                "optimizer": self.optimizer,
            },
            "per_layer": dict(self.per_layer),
        }


def predict(model, B: int, T: int | None = None, plan=None, optimizer_kind: str = "dp-adam") -> PredictedFootprint:
    """Element-count footprint of one private training step.

    The per-layer sums run over the trainable path (the layers the clip
    plan knows about); frozen backbone layers retain nothing and are
    deliberately absent.
    """
    if B < 1:
        raise ConfigError(f"batch size must be positive, got {B}")
    cfg = model.backbone
    T = cfg.seq_len if T is None else T
    if plan is None:
        plan = build_clip_plan(model, T, 1.0)
    out = PredictedFootprint(kind=model.kind, B=B, T=T, dtype_size=model.dtype.itemsize)
    for spec in model.clip_layer_specs(T):
        name, kind = spec["name"], spec["kind"]
        p, d = spec["p"], spec["d"]
        t_eff = 1 if spec.get("pooled") else T
        strategy = plan.strategy(name)
        if kind == "bias":
            fwd, act = p, 0  # bias adds retain nothing for their own grad
            bwd = B * t_eff * p + p
            dp_ghost, dp_inst = 0, bias_reduce_elements(B, p)
        else:  # weight and embedding layers share the matmul formulas
            fwd = weight_forward_elements(p, d, B, t_eff)
            act = B * t_eff * d
            bwd = weight_backward_elements(p, d, B, t_eff)
            if strategy == GHOST:
                dp_ghost, dp_inst = ghost_norm_elements(B, t_eff), 0
            elif strategy == INSTANTIATE:
                dp_ghost, dp_inst = 0, instantiation_elements(B, p, d)
            else:
                raise ConfigError(f"layer {name!r}: unexpected strategy {strategy!r}")
        out.forward += fwd
        out.activations += act
        out.backward += bwd
        out.ghost_norm += dp_ghost
        out.instantiation += dp_inst
        out.per_layer[name] = {
            "strategy": strategy,
            "forward": fwd,
            "activations": act,
            "backward": bwd,
            "ghost_norm": dp_ghost,
            "instantiation": dp_inst,
        }
    if model.kind == "reversible":
        # constant activation story: two streams plus one block's scratch,
        # in place of any depth-proportional retention
        weight_elems = sum(
            s["p"] * s["d"] for s in model.clip_layer_specs(T) if s["kind"] != "bias"
        )
        out.activations = 2 * B * T * cfg.width + B * T * cfg.ffn
        out.forward = weight_elems + out.activations
        out.backward += 4 * B * T * cfg.width  # reconstructed pair + its cotangents
    trainable = model.trainable_param_count()
    if optimizer_kind == "dp-adam":
        out.optimizer = 2 * trainable
    elif optimizer_kind == "dp-sgd":
        out.optimizer = trainable
    else:
        raise ConfigError(f"unknown optimizer kind {optimizer_kind!r}")
    return out


# -- conformance -----------------------------------------------------------------


def fit_power_law(xs, ys) -> tuple[float, float]:
    """Log-log least squares: returns (exponent, R²).

    A flat series has exponent 0 by definition; its R² is reported as 1
    because there is no trend left to explain.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size != ys.size or xs.size < 2:
        raise ConfigError(f"power-law fit needs matched series of length >= 2, got {xs.size} and {ys.size}")
    if np.any(xs <= 0) or np.any(ys < 0):
        raise ConfigError("power-law fit needs positive x and non-negative y")
    if np.all(ys == 0):
        return 0.0, 1.0
    if np.any(ys == 0):
        raise ConfigError("mixed zero and non-zero measurements cannot be fit in log space")
    ly, lx = np.log(ys), np.log(xs)
    if float(np.max(ly) - np.min(ly)) < 1e-12:
        return 0.0, 1.0
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


@dataclass
class ScalingFit:
    """One swept variable: measured exponent vs. the formula's degree."""

    varied: str
    values: list
    measured_bytes: list
    predicted_bytes: list
    measured_exponent: float
    predicted_exponent: float
    r_squared: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "varied": self.varied,
            "values": list(self.values),
            "measured_bytes": [int(v) for v in self.measured_bytes],
            "predicted_bytes": [int(v) for v in self.predicted_bytes],
            "measured_exponent": self.measured_exponent,
            "predicted_exponent": self.predicted_exponent,
            "r_squared": self.r_squared,
            "passed": self.passed,
        }


def scaling_fit(varied: str, values, measured_bytes, predicted_bytes,
                exponent_tol: float = 0.15, r2_floor: float = 0.95) -> ScalingFit:
    """PASS iff the measured exponent matches the predicted one within
    ±exponent_tol and, when there is a trend to explain, R² > r2_floor."""
    m_exp, m_r2 = fit_power_law(values, measured_bytes)
    p_exp, _ = fit_power_law(values, predicted_bytes)
    ok = abs(m_exp - p_exp) <= exponent_tol
    if abs(p_exp) > exponent_tol:  # a real trend: demand a clean fit too
        ok = ok and m_r2 > r2_floor
    return ScalingFit(
        varied=varied,
        values=list(values),
        measured_bytes=list(measured_bytes),
        predicted_bytes=list(predicted_bytes),
        measured_exponent=m_exp,
        predicted_exponent=p_exp,
        r_squared=m_r2,
        passed=ok,
    )


def conformance_ratios(predicted: PredictedFootprint, measured) -> dict[str, float]:
    """measured/predicted per comparable category. Context, not a gate:
    the formulas' constants are not meant to be byte-exact."""
    pairs = {
        "activations": (measured.peak_by_category.get("activations", 0), predicted.bytes_of("activations")),
        "gradients": (measured.peak_by_category.get("gradients", 0), predicted.bytes_of("backward")),
        "dp_buffers": (
            measured.peak_by_category.get("dp_buffers", 0),
            predicted.dp_total * predicted.dtype_size,
        ),
        "optimizer_state": (
            measured.peak_by_category.get("optimizer_state", 0),
            predicted.bytes_of("optimizer"),
        ),
    }
    out = {}
    for name, (got, want) in pairs.items():
        out[name] = got / want if want > 0 else math.inf if got else 1.0
    return out


@dataclass
class ConformanceReport:
    ratios: dict[str, float]
    fits: list[ScalingFit]

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.fits)

    def to_dict(self) -> dict:
        return {
            "ratios": {k: (v if math.isfinite(v) else "inf") for k, v in self.ratios.items()},
            "fits": [f.to_dict() for f in self.fits],
            "passed": self.passed,
        }


# kinds that take part in the peak-memory tier ordering, cheapest tier first
ORDERED_TIERS = (("bitfit", "reversible"), ("side",), ("lora",), ("full",))


@dataclass
class OrderingCheck:
    passed: bool
    failures: list[str]
    peaks: dict[str, int]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "failures": list(self.failures), "peaks": dict(self.peaks)}


def relative_ordering_check(peaks: dict[str, int]) -> OrderingCheck:
    """Check the expected peak-memory tiers on measured per-kind peaks.

    Expected: bitfit and reversible land together in the cheapest tier
    (within 20% of each other), then side, then lora, then full, with at
    least 10% separation between adjacent tiers and side at most 0.6x lora.
    """
    needed = [k for tier in ORDERED_TIERS for k in tier]
    missing = [k for k in needed if k not in peaks]
    if missing:
        raise ConfigError(f"ordering check needs peaks for {missing}")
    fails: list[str] = []
    bitfit, rev = peaks["bitfit"], peaks["reversible"]
    lo, hi = min(bitfit, rev), max(bitfit, rev)
    if lo <= 0:
        fails.append("non-positive peak in cheapest tier")
    elif hi > 1.2 * lo:
        fails.append(f"bitfit and reversible differ by {hi / lo:.2f}x (> 1.2x)")
    tier_values = [hi, peaks["side"], peaks["lora"], peaks["full"]]
    names = ["bitfit/reversible", "side", "lora", "full"]
    for (a, b, na, nb) in zip(tier_values, tier_values[1:], names, names[1:]):
        if not b >= 1.1 * a:
            fails.append(f"{nb} ({b}) not >= 1.1x {na} ({a})")
    if not peaks["side"] <= 0.6 * peaks["lora"]:
        fails.append(
            f"side ({peaks['side']}) exceeds 0.6x lora ({peaks['lora']})")
    if not peaks["full"] > max(v for k, v in peaks.items() if k != "full"):
        fails.append("full is not strictly the largest")
    return OrderingCheck(passed=not fails, failures=fails, peaks=dict(peaks))
