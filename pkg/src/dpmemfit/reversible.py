"""Coupled two-stream blocks with exact inversion and recompute backward.

Each block updates a pair of streams:

    y1 = alpha * x1 + F(x2)
    y2 = beta  * x2 + G(y1)

which inverts in closed form (x2 first, then x1):

    x2 = (y2 - G(y1)) / beta
    x1 = (y1 - F(x2)) / alpha

F wraps the block's frozen FFN plus one of four trainable mechanisms, all
zero at init; G is a small bottleneck sub-network whose up-projection starts
at zero, so G is exactly zero at init. The forward pass retains only the
final stream pair. Backward walks blocks last to first: invert to recover
the block's inputs, re-run the block on a short local tape, backpropagate
the stream cotangents through it, and move down. Activation memory is
therefore flat in depth.

Optionally the two streams are exchanged once after the first block, which
at init puts the frozen network's first-block output onto the stream the
later F's consume.
"""

from __future__ import annotations

import math

import numpy as np

from . import engine as E
from .errors import ConfigError, StateError
from .models import F_KINDS, BackboneConfig, Model, RevConfig


class ReversibleModel(Model):
    kind = "reversible"
    retain_policy = "reversible-recompute"

    def __init__(self, backbone: BackboneConfig, tuning: RevConfig, seed=0, dtype="float32", embed_init=None):
        super().__init__(backbone, seed, dtype, embed_init)
        tuning.validate()
        self.rev = tuning
        self._final: tuple[E.Tensor, E.Tensor] | None = None
        self._ffn_bypass = False
        self._init_embed(trainable=False)
        self._init_backbone(w_train=False, b_train=False)
        rng_f = self._rngs["tuning"]
        r, m = tuning.f_rank, tuning.g_bottleneck
        d, ffn = backbone.width, backbone.ffn
        for i in range(1, backbone.depth + 1):
            pre = f"block{i:02d}.f"
            if tuning.f_kind in ("lora-ffn", "dylora-like"):
                self._add_param(f"{pre}.a", rng_f.normal(0.0, 1.0 / math.sqrt(d), (d, r)), True)
                self._add_param(f"{pre}.b", np.zeros((r, ffn)), True)
                self._spec_weight(f"{pre}.a", d, r)
                self._spec_weight(f"{pre}.b", r, ffn)
            elif tuning.f_kind == "parallel-adapter":
                self._init_linear(f"{pre}.down", d, r, rng_f, True, True)
                self._init_linear(f"{pre}.up", r, d, rng_f, True, True, w_zero=True)
            else:  # prefix-like: additive offsets, one per FFN stage
                self._add_param(f"{pre}.hidden_offset", np.zeros(ffn), True)
                self._add_param(f"{pre}.output_offset", np.zeros(d), True)
                self._spec_bias(f"{pre}.hidden_offset", ffn)
                self._spec_bias(f"{pre}.output_offset", d)
        rng_g = self._rngs["tuning_g"]
        for i in range(1, backbone.depth + 1):
            pre = f"block{i:02d}.g"
            self._init_linear(f"{pre}.down", d, m, rng_g, True, True)
            self._init_linear(f"{pre}.up", m, d, rng_g, True, True, w_zero=True)
        self._init_head(d)
        if tuning.f_kind == "dylora-like":
            # fixed nested-rank weighting: column j carries weight (r - j) / r,
            # the survival probability of that rank under uniform truncation
            diag = np.diag((r - np.arange(r)) / r).astype(self.dtype)
            with E.alloc_category("weights"):
                self._rank_weights = E.Tensor(diag)

    def tuning_dict(self) -> dict:
        rev = self.rev
        return {
            "alpha": rev.alpha,
            "beta": rev.beta,
            "exchange_after_first": rev.exchange_after_first,
            "f_kind": rev.f_kind,
            "f_rank": rev.f_rank,
            "g_bottleneck": rev.g_bottleneck,
        }

    def enable_ffn_bypass(self, flag: bool = True) -> None:
        """Test hook: make the first sub-function contribute nothing, so the
        streams follow the bare recursion y1 = alpha x1, y2 = beta x2 + G(y1)
        (and G is exactly zero while its up-projection stays zero)."""
        self._ffn_bypass = bool(flag)

    # -- the two sub-functions ---------------------------------------------------

    def _f_apply(self, i: int, x: E.Tensor) -> E.Tensor | None:
        if self._ffn_bypass:
            return None
        cfg = self.backbone
        pre = f"block{i:02d}"
        kind = self.rev.f_kind
        delta = None
        if kind in ("lora-ffn", "dylora-like"):
            u = E.matmul(x, self.params[f"{pre}.f.a"], capture=f"{pre}.f.a")
            if kind == "dylora-like":
                u = E.matmul(u, self._rank_weights)
            v = E.matmul(u, self.params[f"{pre}.f.b"], capture=f"{pre}.f.b")
            delta = E.scale(v, 1.0 / self.rev.f_rank)
            del v  # hidden-width temporary; this runs once per block per recompute
        h = E.matmul(x, self.params[f"{pre}.in.w"])
        if delta is not None:
            h = E.add_into(h, delta)
            del delta
        h = E.add_into(h, self.params[f"{pre}.in.b"])
        if kind == "prefix-like":
            h = E.add_into(h, self.params[f"{pre}.f.hidden_offset"], capture=f"{pre}.f.hidden_offset")
        a = E.apply_nonlinearity(h, cfg.nonlinearity)
        del h  # the nonlinearity node saved what backward needs; the local only pins the buffer
        o = E.matmul(a, self.params[f"{pre}.out.w"])
        del a  # frozen out-projection saves nothing; a is dead past this point
        o = E.add_into(o, self.params[f"{pre}.out.b"])
        if kind == "prefix-like":
            o = E.add_into(o, self.params[f"{pre}.f.output_offset"], capture=f"{pre}.f.output_offset")
        elif kind == "parallel-adapter":
            t = self._linear(x, f"{pre}.f.down")
            t = E.apply_nonlinearity(t, cfg.nonlinearity)
            o = E.add_into(o, self._linear(t, f"{pre}.f.up"))
        return o

    def _g_apply(self, i: int, x: E.Tensor) -> E.Tensor:
        pre = f"block{i:02d}.g"
        t = self._linear(x, f"{pre}.down")
        t = E.apply_nonlinearity(t, self.backbone.nonlinearity)
        return self._linear(t, f"{pre}.up")

    def _combine(self, x: E.Tensor, coef: float, delta: E.Tensor | None) -> E.Tensor:
        base = x if coef == 1.0 else E.scale(x, coef)
        if delta is None:
            return base
        return E.add_into(delta, base)

    def _pair_forward(self, i: int, x1: E.Tensor, x2: E.Tensor) -> tuple[E.Tensor, E.Tensor]:
        y1 = self._combine(x1, self.rev.alpha, self._f_apply(i, x2))
        y2 = self._combine(x2, self.rev.beta, self._g_apply(i, y1))
        return y1, y2

    def pair_inverse(self, i: int, y1: E.Tensor, y2: E.Tensor) -> tuple[E.Tensor, E.Tensor]:
        """Recover block i's input pair from its output pair."""
        rev = self.rev
        with E.no_grad():
            gg = self._g_apply(i, y1)
            x2v = y2.numpy() - gg.numpy()
            if rev.beta != 1.0:
                x2v /= self.dtype.type(rev.beta)
            x2 = E.Tensor(x2v)
            f = self._f_apply(i, x2)
            x1v = y1.numpy().copy() if f is None else y1.numpy() - f.numpy()
            if rev.alpha != 1.0:
                x1v /= self.dtype.type(rev.alpha)
            return E.Tensor(x1v), x2

    # -- forward -------------------------------------------------------------------

    def _stream_walk(self, tok: np.ndarray) -> tuple[E.Tensor, E.Tensor]:
        x0 = E.embed(self.params["embed"], tok)
        x1 = x2 = x0
        for i in range(1, self.backbone.depth + 1):
            x1, x2 = self._pair_forward(i, x1, x2)
            if i == 1 and self.rev.exchange_after_first:
                x1, x2 = x2, x1
        return x1, x2

    def _forward_logits(self, tok: np.ndarray) -> E.Tensor:
        with E.no_grad():
            x1, x2 = self._stream_walk(tok)
        if E.recording():
            # cotangents re-enter the reverse walk at the final pair
            x1.requires_grad = True
            x2.requires_grad = True
            self._final = (x1, x2)
        mid = E.scale(E.add(x1, x2), 0.5)
        pooled = E.mean_over_time(mid)
        return self._linear(pooled, "head")

    def final_pair(self, tokens) -> tuple[np.ndarray, np.ndarray]:
        """Run the stream walk alone and return the retained pair's values."""
        tok = self._check_tokens(tokens)
        with E.no_grad():
            x1, x2 = self._stream_walk(tok)
            return x1.numpy().copy(), x2.numpy().copy()

    def init_identity_deviation(self, tokens) -> float:
        """Relative distance between the second stream and a plain residual
        forward through the same frozen blocks. Diagnostic only, meaningful
        at init; no threshold is asserted anywhere."""
        tok = self._check_tokens(tokens)
        with E.no_grad():
            x1, x2 = self._stream_walk(tok)
            ref = E.embed(self.params["embed"], tok)
            for i in range(1, self.backbone.depth + 1):
                f = self._f_apply(i, ref)
                if f is not None:
                    ref = E.add_into(f, ref)
            num = float(np.linalg.norm(x2.numpy() - ref.numpy()))
            den = float(np.linalg.norm(ref.numpy()))
        return num / den if den else num

    # -- backward ------------------------------------------------------------------

    def backward(self, loss: E.Tensor, clip_ctx=None) -> None:
        if self._tape is None:
            raise StateError("backward called without a pending forward")
        if self._final is None:
            raise StateError("reversible backward without a recorded stream pair")
        tape = self._tape
        self._tape = None
        tape.__exit__(None, None, None)
        sink = E.backward(tape, loss, clip_ctx)
        x1, x2 = self._final
        self._final = None
        g1, g2 = sink.pop(x1.id), sink.pop(x2.id)
        if g1 is None or g2 is None:
            raise StateError("loss does not reach the stream pair")
        # ownership of the walk state moves through this list so each block
        # can drop the consumed pair before re-running; holding it in caller
        # locals would keep a spare pair alive per block
        state = [x1, x2, g1, g2]
        del x1, x2, g1, g2, sink
        for i in range(self.backbone.depth, 0, -1):
            if i == 1 and self.rev.exchange_after_first:
                state[0], state[1] = state[1], state[0]
                state[2], state[3] = state[3], state[2]
            state = self._block_backward(i, state, clip_ctx)
        # state now holds the reconstructed input pair; the cotangents with
        # respect to it die here (the embedding is frozen)

    def _block_backward(self, i: int, state: list, clip_ctx) -> list:
        rev = self.rev
        y1, y2, gy1, gy2 = state
        state.clear()
        with E.no_grad():
            gg = self._g_apply(i, y1)
            x2v = y2.numpy() - gg.numpy()
            if rev.beta != 1.0:
                x2v /= self.dtype.type(rev.beta)
            del gg
        x2_leaf = E.Tensor(x2v, requires_grad=True)
        tape = E.Tape("store-all")
        with tape:
            f = self._f_apply(i, x2_leaf)
        with E.no_grad():
            x1v = y1.numpy().copy() if f is None else y1.numpy() - f.numpy()
            if rev.alpha != 1.0:
                x1v /= self.dtype.type(rev.alpha)
        x1_leaf = E.Tensor(x1v, requires_grad=True)
        # the consumed output pair is dead weight from here on; captures,
        # if any, hold their own references
        del y1, y2
        with tape:
            y1r = self._combine(x1_leaf, rev.alpha, f)
            gg2 = self._g_apply(i, y1r)
            y2r = self._combine(x2_leaf, rev.beta, gg2)
        lsink = E.backward(tape, {y1r: gy1, y2r: gy2}, clip_ctx)
        return [x1_leaf, x2_leaf, lsink.pop(x1_leaf.id), lsink.pop(x2_leaf.id)]

    def zero_grad(self) -> None:
        super().zero_grad()
        self._final = None


def swap_subfunction_F(model: ReversibleModel, f_kind: str) -> ReversibleModel:
    """Rebuild with a different first-sub-function mechanism.

    Frozen weights, G, and the head are redrawn from the same named streams,
    so they are bit-identical to the original model's; only the trainable
    mechanism inside F changes.
    """
    if not isinstance(model, ReversibleModel):
        raise ConfigError(f"swap_subfunction_F needs a reversible model, got kind {model.kind!r}")
    if f_kind not in F_KINDS:
        raise ConfigError(f"unknown f_kind {f_kind!r}; choose from {F_KINDS}")
    from dataclasses import replace

    cfg = replace(model.rev, f_kind=f_kind)
    return ReversibleModel(model.backbone, cfg, seed=model.seed,
                           dtype=str(model.dtype), embed_init=model._embed_init)
