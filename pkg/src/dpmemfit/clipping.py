"""Per-sample gradient norms and clipped sums, two-pass book-keeping style.

The flow for one private step:

  pass 1  forward, then one backward. Each trainable layer's node hands its
          (input, output-gradient) pair to the ClipContext, which immediately
          accumulates that layer's per-example squared norms and decides what
          to retain for pass 2 (the pair itself for ghost-norm layers, the
          instantiated per-sample grads for instantiate layers, the
          time-reduced per-example grads for biases).
  pass 2  purely algebraic: one global clip factor per example from the
          summed squared norms, then per-layer weighted sums written into
          Parameter.grad. No second backprop.

Strategy per layer follows the 2T² vs p·d comparison; see choose_strategy.
Norm computation never leaves dtype float of the run; all clipping-specific
buffers (Gram matrices, per-sample grads, norm vectors) are allocated under
the dp_buffers ledger category so memory claims can be checked from outside.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .errors import ConfigError, DimensionError, StateError

GHOST = "ghost"
INSTANTIATE = "instantiate"
REDUCE = "reduce"  # biases and other vector parameters


def choose_strategy(T: int, p: int, d: int) -> str:
    """Ghost norm iff 2T² ≤ p·d (ties go to ghost: no per-sample buffer churn)."""
    if T <= 0 or p <= 0 or d <= 0:
        raise ConfigError(f"choose_strategy: dimensions must be positive, got T={T} p={p} d={d}")
    return GHOST if 2 * T * T <= p * d else INSTANTIATE


def _as3d(a: np.ndarray) -> np.ndarray:
    # unify [B, d] (e.g. pooled head input) with [B, T, d]
    return a[:, None, :] if a.ndim == 2 else a


# Mutation point for the verifier's self-test: when set, every norm this
# module computes through ghost_norm_layer comes back negated, which any
# sound ghost-vs-direct comparison must flag. Never set in real training.
FAULT_FLIP_GHOST_SIGN = False


def ghost_norm_layer(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Per-example ‖x_iᵀ g_i‖²_F via two T×T Gram matrices.

    Never materializes the d×p per-sample gradient: the squared Frobenius
    norm equals the elementwise product of (x x ᵀ) and (g gᵀ) summed over
    both time axes.
    """
    x, g = _as3d(x), _as3d(g)
    if x.shape[:2] != g.shape[:2]:
        raise DimensionError(f"ghost_norm_layer: x {x.shape} and g {g.shape} disagree on (B, T)")
    with E.alloc_category("dp_buffers"):
        gram_x = E.Tensor(x @ np.swapaxes(x, 1, 2))
        gram_g = E.Tensor(g @ np.swapaxes(g, 1, 2))
    out = np.einsum("bts,bts->b", gram_x.numpy(), gram_g.numpy())
    gram_x.release()
    gram_g.release()
    return -out if FAULT_FLIP_GHOST_SIGN else out


def per_sample_grads_matmul(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Instantiated per-sample weight grads, [B, d, p]."""
    x, g = _as3d(x), _as3d(g)
    if x.shape[:2] != g.shape[:2]:
        raise DimensionError(f"per_sample_grads_matmul: x {x.shape} and g {g.shape} disagree on (B, T)")
    return np.einsum("btd,btp->bdp", x, g)


def clip_factors(sq_norms: np.ndarray, C: float) -> np.ndarray:
    """factor_i = min(1, C / ‖g_i‖); zero norms clip to 1."""
    if not C > 0:
        raise ConfigError(f"clip bound must be positive, got {C}")
    if math.isinf(C):
        return np.ones_like(sq_norms)
    norms = np.sqrt(sq_norms)
    with np.errstate(divide="ignore"):
        f = np.where(norms > C, C / norms, 1.0)
    return f.astype(sq_norms.dtype)


def clipped_grad_sum_layer(x: np.ndarray, g: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """Σ_i factor_i · x_iᵀ g_i as one d×p contraction (g scaled in place is
    the caller's choice; this function scales a copy along the batch axis)."""
    x, g = _as3d(x), _as3d(g)
    if factors.shape != (x.shape[0],):
        raise DimensionError(f"clipped_grad_sum_layer: factors {factors.shape} vs batch {x.shape[0]}")
    gs = g * factors[:, None, None]
    d, p = x.shape[-1], g.shape[-1]
    return x.reshape(-1, d).T @ gs.reshape(-1, p)


@dataclass
class ClipPlan:
    """Per-layer strategy map plus the clip bound C (math.inf = no clipping)."""

    per_layer: dict[str, str]
    clip_bound: float = 1.0

    def strategy(self, name: str) -> str:
        try:
            return self.per_layer[name]
        except KeyError:
            raise ConfigError(f"layer {name!r} missing from clip plan")

    def to_dict(self) -> dict:
        return {"clip_bound": self.clip_bound if math.isfinite(self.clip_bound) else "inf",
                "per_layer": dict(self.per_layer)}


@dataclass
class LayerCapture:
    """What pass 1 kept for one trainable layer."""

    name: str
    kind: str  # weight | bias | embed
    strategy: str
    param: object
    x: object | None = None  # retained input tensor (ghost)
    g: E.Tensor | None = None  # retained output-side gradient (ghost)
    per_sample: E.Tensor | None = None  # [B,d,p] / [B,p] / [B,V,d]
    tokens: E.Tensor | None = None  # embed only

    def release(self):
        if self.g is not None:
            self.g.release()
            self.g = None
        if self.per_sample is not None:
            self.per_sample.release()
            self.per_sample = None
        self.x = None
        self.tokens = None


@dataclass
class StepNorms:
    """Per-example squared norms summed over layers, plus per-layer terms."""

    total: np.ndarray
    per_layer: dict[str, np.ndarray] = field(default_factory=dict)


class ClipContext:
    """Capture sink handed to engine.backward for pass 1.

    Engine nodes call capture_* once per trainable layer per step. Layer
    order of arrival is reverse execution order (it is a backward pass);
    norms are plain elementwise adds so order does not change the result.
    """

    def __init__(self, plan: ClipPlan, batch_size: int, dtype=np.float64):
        self.plan = plan
        self.B = batch_size
        self.captures: dict[str, LayerCapture] = {}
        self.sq_norms = np.zeros(batch_size, dtype=dtype)
        self.per_layer_sq: dict[str, np.ndarray] = {}
        self._finalized = False

    def _add_norms(self, name: str, sq: np.ndarray) -> None:
        if sq.shape != (self.B,):
            raise DimensionError(f"per-example norms for {name}: shape {sq.shape}, batch {self.B}")
        self.per_layer_sq[name] = sq
        self.sq_norms += sq

    def _register(self, cap: LayerCapture) -> None:
        if cap.name in self.captures:
            raise StateError(f"layer {cap.name!r} captured twice in one step (shared weights unsupported)")
        self.captures[cap.name] = cap

    # -- engine-facing hooks -------------------------------------------------

    def capture_matmul(self, name: str, param, x_t, g) -> None:
        x = x_t.data if isinstance(x_t, (E.Tensor,)) else np.asarray(x_t)
        g_arr = g.numpy() if isinstance(g, E.Tensor) else np.asarray(g)
        strategy = self.plan.strategy(name)
        if strategy == GHOST:
            self._add_norms(name, ghost_norm_layer(x, g_arr))
            if isinstance(g, E.Tensor):
                g.moved = True  # pass 2 needs the cotangent; keep it, no copy
                g_t = g
            else:
                with E.alloc_category("gradients"):
                    g_t = E.Tensor(g_arr)
            self._register(LayerCapture(name, "weight", GHOST, param, x=x_t, g=g_t))
        elif strategy == INSTANTIATE:
            with E.alloc_category("dp_buffers"):
                ps = E.Tensor(per_sample_grads_matmul(x, g_arr))
            self._add_norms(name, np.einsum("bdp,bdp->b", ps.numpy(), ps.numpy()))
            self._register(LayerCapture(name, "weight", INSTANTIATE, param, per_sample=ps))
        else:
            raise ConfigError(f"unexpected strategy {strategy!r} for weight layer {name!r}")

    def capture_bias(self, name: str, param, g: np.ndarray) -> None:
        # copy in the 2D case too: the caller keeps ownership of g and may
        # pass it onward to be mutated in place
        reduced = g.sum(axis=1) if g.ndim == 3 else np.array(g)
        with E.alloc_category("dp_buffers"):
            ps = E.Tensor(np.ascontiguousarray(reduced))
        self._add_norms(name, np.einsum("bp,bp->b", ps.numpy(), ps.numpy()))
        self._register(LayerCapture(name, "bias", REDUCE, param, per_sample=ps))

    def capture_embed(self, name: str, param, tokens_t: E.Tensor, g) -> None:
        toks = tokens_t.numpy()
        g_arr = g.numpy() if isinstance(g, E.Tensor) else np.asarray(g)
        strategy = self.plan.strategy(name)
        if strategy == GHOST:
            # token-equality matrix plays the role of the input Gram
            with E.alloc_category("dp_buffers"):
                eq = E.Tensor((toks[:, :, None] == toks[:, None, :]).astype(g_arr.dtype))
                gram_g = E.Tensor(g_arr @ np.swapaxes(g_arr, 1, 2))
            self._add_norms(name, np.einsum("bts,bts->b", eq.numpy(), gram_g.numpy()))
            eq.release()
            gram_g.release()
            if isinstance(g, E.Tensor):
                g.moved = True  # pass 2 needs the cotangent; keep it, no copy
                g_t = g
            else:
                with E.alloc_category("gradients"):
                    g_t = E.Tensor(g_arr)
            self._register(LayerCapture(name, "embed", GHOST, param, g=g_t, tokens=tokens_t))
        elif strategy == INSTANTIATE:
            B = toks.shape[0]
            V, d = param.shape
            with E.alloc_category("dp_buffers"):
                ps = E.Tensor(np.zeros((B, V, d), dtype=g_arr.dtype))
            np.add.at(ps.numpy(), (np.arange(B)[:, None], toks), g_arr)
            self._add_norms(name, np.einsum("bvd,bvd->b", ps.numpy(), ps.numpy()))
            self._register(LayerCapture(name, "embed", INSTANTIATE, param, per_sample=ps))
        else:
            raise ConfigError(f"unexpected strategy {strategy!r} for embedding {name!r}")

    # -- pass 2 ---------------------------------------------------------------

    def finalize_norms(self) -> StepNorms:
        self._finalized = True
        return StepNorms(total=self.sq_norms, per_layer=dict(self.per_layer_sq))

    def apply_clipped_sums(self, factors: np.ndarray) -> None:
        """Write Σ_i factor_i · grad_i into each captured parameter's .grad.

        Algebra only. Ghost layers scale the retained g in place (the capture
        owns it by now) so the weighted sum allocates nothing beyond the
        d×p output.
        """
        if not self._finalized:
            raise StateError("apply_clipped_sums before finalize_norms")
        for name in sorted(self.captures):
            cap = self.captures[name]
            p = cap.param
            if cap.kind == "weight":
                if cap.strategy == GHOST:
                    g = cap.g.numpy()
                    g *= factors.reshape((-1,) + (1,) * (g.ndim - 1))
                    x = cap.x.data if isinstance(cap.x, E.Tensor) else np.asarray(cap.x)
                    x3, g3 = _as3d(x), _as3d(g)
                    grad = x3.reshape(-1, x3.shape[-1]).T @ g3.reshape(-1, g3.shape[-1])
                else:
                    grad = np.tensordot(factors, cap.per_sample.numpy(), axes=1)
                p.accumulate_grad(grad.reshape(p.shape))
            elif cap.kind == "bias":
                p.accumulate_grad(factors @ cap.per_sample.numpy())
            elif cap.kind == "embed":
                if cap.strategy == GHOST:
                    g = cap.g.numpy()
                    g *= factors[:, None, None]
                    toks = cap.tokens.numpy()
                    acc = np.zeros(p.shape, dtype=g.dtype)
                    np.add.at(acc, toks.ravel(), g.reshape(-1, g.shape[-1]))
                    p.accumulate_grad(acc)
                else:
                    p.accumulate_grad(np.tensordot(factors, cap.per_sample.numpy(), axes=1))
            cap.release()
        self.captures.clear()

    def release(self) -> None:
        for cap in self.captures.values():
            cap.release()
        self.captures.clear()


# ---------------------------------------------------------------------------
# Plan construction and the step driver
# ---------------------------------------------------------------------------


def build_clip_plan(model, T: int, clip_bound: float) -> ClipPlan:
    """One strategy decision per trainable layer from its (T, p, d).

    Bias-like vectors always use direct reduction; they are listed in the
    plan for report completeness.
    """
    per_layer = {}
    for spec in model.clip_layer_specs(T):
        name, kind, p, d = spec["name"], spec["kind"], spec["p"], spec["d"]
        if kind == "bias":
            per_layer[name] = REDUCE
        else:
            t_eff = 1 if spec.get("pooled") else T
            per_layer[name] = choose_strategy(t_eff, p, d)
    return ClipPlan(per_layer=per_layer, clip_bound=clip_bound)


@dataclass
class ClipStepResult:
    norms: StepNorms
    factors: np.ndarray
    loss: float = 0.0  # summed (not averaged) loss over the batch
    seconds: dict[str, float] = field(default_factory=dict)


def bk_clip_step(model, tokens, labels, plan: ClipPlan) -> ClipStepResult:
    """Forward + one capturing backward + algebraic clipped sums.

    Grads land in Parameter.grad exactly as a non-private step would leave
    them, except they are the clipped per-example sum (not averaged; noise
    and averaging belong to the optimizer step). When a ledger is active the
    forward/backward/clip phase boundaries are marked on it.
    """
    B = len(labels)
    led = E.current_ledger()
    ctx = ClipContext(plan, B, dtype=model.dtype)
    t0 = time.perf_counter()
    if led is not None:
        led.set_phase("forward")
    losses = model.forward_loss(tokens, labels)
    loss = E.sum_all(losses)
    loss_value = float(loss.numpy())
    t1 = time.perf_counter()
    if led is not None:
        led.set_phase("backward")
    model.backward(loss, clip_ctx=ctx)
    t2 = time.perf_counter()
    if led is not None:
        led.set_phase("clip")
    norms = ctx.finalize_norms()
    factors = clip_factors(norms.total, plan.clip_bound)
    ctx.apply_clipped_sums(factors)
    ctx.release()
    t3 = time.perf_counter()
    return ClipStepResult(
        norms=norms,
        factors=factors,
        loss=loss_value,
        seconds={"forward": t1 - t0, "backward": t2 - t1, "clip": t3 - t2},
    )


def naive_per_sample_grads(model, tokens, labels) -> list[dict[str, np.ndarray]]:
    """Ground-truth oracle: one full backward per example, grads copied out.

    B× parameter memory; verification tool, never the training path.
    """
    out = []
    for i in range(len(labels)):
        model.zero_grad()
        losses = model.forward_loss(tokens[i : i + 1], labels[i : i + 1])
        model.backward(E.sum_all(losses))
        grads = {p.name: p.grad.numpy().copy() for p in model.trainable_parameters() if p.grad is not None}
        out.append(grads)
    model.zero_grad()
    return out
