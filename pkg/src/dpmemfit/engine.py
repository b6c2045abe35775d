"""Dense-tensor engine with reverse-mode autodiff on an explicit tape.

numpy provides the buffers and BLAS; everything about lifetimes is explicit
so the memory ledger sees real numbers. Constraints that shape the design:

- Row-major dense layout, no aliasing views: every Tensor owns its buffer,
  so one alloc event and one free event per Tensor.
- CPU only, float32/float64 only. Batch dimension always leads.
- Nodes keep strong references ONLY to saved-for-backward tensors. What a
  node saves depends on what actually requires grad: matmul against a frozen
  weight does not save its input, relu saves a 1-byte sign mask instead of
  the float pre-activation, and so on. Peak-memory claims ride on this.
- Backward walks nodes in exact reverse order and drops each node's saved
  set as soon as that node is done (eager release).
- Single-threaded. Determinism: same seed and config give bit-identical
  results; frees happen at refcount zero which is deterministic in CPython.
"""

from __future__ import annotations

import threading
import weakref

import numpy as np
from scipy import special as _sp

from .errors import ConfigError, DataError, DimensionError, StateError
from .ledger import MemoryLedger

_FLOAT_DTYPES = (np.float32, np.float64)


class _Ctx(threading.local):
    def __init__(self):
        self.ledger: MemoryLedger | None = None
        self.tape: Tape | None = None
        self.category = "activations"
        self.grad_enabled = True


_ctx = _Ctx()
_next_id = [0]


def _new_id() -> int:
    _next_id[0] += 1
    return _next_id[0]


class use_ledger:
    """Context manager: route alloc/free events of new tensors to `ledger`."""

    def __init__(self, ledger: MemoryLedger):
        self.ledger = ledger

    def __enter__(self):
        self.prev = _ctx.ledger
        _ctx.ledger = self.ledger
        return self.ledger

    def __exit__(self, *exc):
        _ctx.ledger = self.prev
        return False


class alloc_category:
    """Context manager: ledger category for tensors created inside."""

    def __init__(self, category: str):
        self.category = category

    def __enter__(self):
        self.prev = _ctx.category
        _ctx.category = self.category

    def __exit__(self, *exc):
        _ctx.category = self.prev
        return False


class no_grad:
    """Disable node recording; outputs created inside never require grad."""

    def __enter__(self):
        self.prev = _ctx.grad_enabled
        _ctx.grad_enabled = False

    def __exit__(self, *exc):
        _ctx.grad_enabled = self.prev
        return False


def recording() -> bool:
    """True when there is an active tape and grad is enabled."""
    return _ctx.grad_enabled and _ctx.tape is not None


def current_ledger() -> MemoryLedger | None:
    return _ctx.ledger


class Tensor:
    """Owns one dense numpy buffer and reports its lifetime to the ledger.

    Float tensors participate in autodiff; integer/bool tensors are carriers
    for token ids and saved masks and never require grad.
    """

    __slots__ = ("data", "id", "requires_grad", "category", "moved", "_ledger", "_finalizer", "__weakref__")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, category: str | None = None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        if data.dtype.kind == "f" and data.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            data = data.astype(np.float64)
        # no aliasing: a Tensor owns its buffer, full stop
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        elif not data.flags["OWNDATA"]:
            data = data.copy()
        self.data = data
        self.id = _new_id()
        self.requires_grad = bool(requires_grad) and data.dtype.kind == "f"
        # ownership-handoff marker for the backward driver: set by whoever
        # takes a cotangent over (GradSink.adopt, a ghost capture) so the
        # driver knows not to free it
        self.moved = False
        ledger = _ctx.ledger
        self.category = category or _ctx.category
        self._ledger = ledger
        if ledger is not None:
            ledger.on_alloc(self.id, data.nbytes, self.category)
            self._finalizer = weakref.finalize(self, ledger.on_free, self.id)
        else:
            self._finalizer = None

    # -- lifetime ------------------------------------------------------------

    def release(self) -> None:
        """Free the buffer now. Idempotent; use-after-release raises."""
        if self._finalizer is not None:
            if self._finalizer.alive:
                self._finalizer.detach()
                self._ledger.on_free(self.id)
            self._finalizer = None
        self.data = None

    @property
    def released(self) -> bool:
        return self.data is None

    # -- convenience -----------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def nbytes(self) -> int:
        return 0 if self.data is None else self.data.nbytes

    def numpy(self) -> np.ndarray:
        if self.data is None:
            raise StateError(f"tensor id {self.id} used after release")
        return self.data

    def clone(self, requires_grad: bool | None = None) -> "Tensor":
        """Deep copy under a fresh id; never shares the buffer."""
        rg = self.requires_grad if requires_grad is None else requires_grad
        # a view is not OWNDATA, so __init__ takes its copy branch
        return Tensor(self.numpy().view(), requires_grad=rg)

    def __repr__(self):
        if self.data is None:
            return f"Tensor(id={self.id}, released)"
        return f"Tensor(id={self.id}, shape={tuple(self.data.shape)}, dtype={self.data.dtype})"


class Parameter:
    """Named model parameter. Frozen parameters never get a grad buffer."""

    __slots__ = ("tensor", "name", "trainable", "grad")

    def __init__(self, data: np.ndarray, name: str, trainable: bool = True):
        with alloc_category("weights"):
            self.tensor = Tensor(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad: Tensor | None = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.numpy()

    @property
    def shape(self) -> tuple:
        return self.tensor.shape

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.trainable:
            raise StateError(f"gradient written to frozen parameter {self.name}")
        if self.grad is None:
            with alloc_category("gradients"):
                self.grad = Tensor(g)  # Tensor copies unless it can own the buffer
        else:
            self.grad.data += g

    def free_grad(self) -> None:
        if self.grad is not None:
            self.grad.release()
            self.grad = None

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.tensor.shape}, trainable={self.trainable})"


# ---------------------------------------------------------------------------
# Tape and nodes
# ---------------------------------------------------------------------------


class Node:
    """One recorded op. Subclasses define backward().

    Strong tensor references live only in `saved`; inputs/outputs are ids.
    `param_slots` maps input position -> Parameter for trainable params so
    backward can route their grads (or hand them to a clip capture).
    """

    op = "node"
    __slots__ = ("input_ids", "out_id", "saved", "param_slots", "meta")

    def __init__(self, input_ids, out_id, saved=(), param_slots=(), meta=None):
        self.input_ids = input_ids
        self.out_id = out_id
        self.saved = saved
        self.param_slots = param_slots
        self.meta = meta or {}

    def saved_ids(self):
        return tuple(t.id for t in self.saved if isinstance(t, Tensor))

    def backward(self, g_t: "Tensor", sink) -> None:
        # g_t is owned by the node for the duration of the call: read it,
        # mutate it in place, or move it (sink.adopt / a ghost capture).
        # The driver frees whatever was not moved.
        raise NotImplementedError

    def release_saves(self) -> None:
        # Saved tensors referenced elsewhere (user variables, captures) stay
        # alive; this only drops the tape's claim on them.
        self.saved = ()


class Tape:
    """Ordered op record for one forward pass.

    retain_policy is descriptive of how the model was run: 'store-all' for
    ordinary recorded forwards, 'reversible-recompute' when block interiors
    were executed without recording and will be rebuilt during backward.
    """

    def __init__(self, retain_policy: str = "store-all"):
        if retain_policy not in ("store-all", "reversible-recompute"):
            raise ConfigError(f"unknown retain_policy {retain_policy!r}")
        self.retain_policy = retain_policy
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self):
        self.prev = _ctx.tape
        _ctx.tape = self
        return self

    def __exit__(self, *exc):
        _ctx.tape = self.prev
        return False

    def saved_bytes(self) -> int:
        seen = set()
        total = 0
        for n in self.nodes:
            for t in n.saved:
                if isinstance(t, Tensor) and t.id not in seen and t.data is not None:
                    seen.add(t.id)
                    total += t.nbytes
        return total


def _record(node: Node) -> None:
    tape = _ctx.tape
    if tape is not None:
        tape.nodes.append(node)


def _grad_wanted(*tensors) -> bool:
    return _ctx.grad_enabled and _ctx.tape is not None and any(
        isinstance(t, (Tensor, Parameter)) and (t.requires_grad if isinstance(t, Tensor) else t.trainable)
        for t in tensors
    )


class GradSink:
    """Cotangent store for one backward pass.

    Holds grad tensors keyed by tensor id, allocated under the 'gradients'
    category so the ledger sees the backward working set. Every entry owns
    its buffer exclusively: contributors either hand in freshly computed
    arrays (add), move an owned tensor over without copying (adopt), or
    donate a seed. Exclusive ownership is what makes in-place cotangent
    updates in the elementwise nodes safe. Parameter grads are routed either
    into Parameter.grad or into a clip capture context.
    """

    def __init__(self, clip_ctx=None):
        self.grads: dict[int, Tensor] = {}
        self.clip_ctx = clip_ctx

    def seed(self, tensor_id: int, g) -> None:
        if isinstance(g, Tensor):
            # donated: the caller hands over ownership and must not touch
            # the tensor again (it may be accumulated into and is released
            # when the backward walk consumes it)
            self.grads[tensor_id] = g
            return
        # arrays are copied: callers may reuse their buffer
        with alloc_category("gradients"):
            self.grads[tensor_id] = Tensor(np.array(g))

    def add(self, tensor_id: int, g: np.ndarray) -> None:
        cur = self.grads.get(tensor_id)
        if cur is None:
            with alloc_category("gradients"):
                self.grads[tensor_id] = Tensor(g)
        else:
            cur.data += g

    def adopt(self, tensor_id: int, t: Tensor) -> None:
        """Move an owned cotangent under tensor_id without copying it.

        Pass-through nodes route their incoming cotangent straight to their
        input's slot this way; the backward driver sees t.moved and leaves
        the buffer to its new owner. The caller must not touch t afterwards.
        """
        t.moved = True
        cur = self.grads.get(tensor_id)
        if cur is None:
            self.grads[tensor_id] = t
        else:
            cur.data += t.numpy()
            t.release()

    def pop(self, tensor_id: int) -> Tensor | None:
        t = self.grads.pop(tensor_id, None)
        if t is not None:
            t.moved = False  # ownership is back with the caller
        return t

    def param_grad(self, param: Parameter, g: np.ndarray) -> None:
        param.accumulate_grad(g)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def _as_array(x) -> np.ndarray:
    if isinstance(x, Parameter):
        return x.tensor.numpy()
    if isinstance(x, Tensor):
        return x.numpy()
    return np.asarray(x)


def _wrap_out(arr: np.ndarray, requires_grad: bool) -> Tensor:
    return Tensor(arr, requires_grad=requires_grad)


def _check_float(name, *arrays):
    dt = {a.dtype for a in arrays}
    if len(dt) > 1:
        raise DimensionError(f"{name}: mixed dtypes {sorted(str(d) for d in dt)}")


class MatmulNode(Node):
    op = "matmul"

    def backward(self, g_t: Tensor, sink: GradSink) -> None:
        g = g_t.numpy()
        a_t, b_t = self.saved  # either may be None when not needed
        a_id, b_id = self.input_ids
        a_req, b_req = self.meta["requires"]
        param = dict(self.param_slots)
        if a_req:
            b_arr = _as_array(b_t)
            ga = g @ np.swapaxes(b_arr, -1, -2)
            if 0 in param:
                p = param[0]
                sink.param_grad(p, ga.reshape(p.shape) if ga.shape != p.shape else ga)
            else:
                sink.add(a_id, ga)
        if b_req:
            a_arr = _as_array(a_t)
            p = param.get(1)
            if p is not None and self.meta.get("capture") is not None and sink.clip_ctx is not None:
                # Per-sample clipping owns this weight's gradient; hand over
                # the (input, output-grad) pair instead of summing over B.
                # The capture may keep g_t, in which case it marks it moved.
                sink.clip_ctx.capture_matmul(self.meta["capture"], p, a_t, g_t)
            else:
                if a_arr.ndim == 2:
                    gb = a_arr.T @ g
                else:
                    lead = a_arr.reshape(-1, a_arr.shape[-1])
                    gb = lead.T @ g.reshape(-1, g.shape[-1])
                if p is not None:
                    sink.param_grad(p, gb.reshape(p.shape) if gb.shape != p.shape else gb)
                else:
                    sink.add(b_id, gb)


def matmul(a, b, capture: str | None = None) -> Tensor:
    """Batched matrix product [.., m, k] @ [.., k, n] -> [.., m, n].

    `capture` names the layer for per-sample clipping when b is a trainable
    Parameter (weight on the right, activations on the left).
    """
    a_arr, b_arr = _as_array(a), _as_array(b)
    _check_float("matmul", a_arr, b_arr)
    if a_arr.ndim < 2 or b_arr.ndim < 2 or a_arr.shape[-1] != b_arr.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a_arr.shape} @ {b_arr.shape}")
    out_arr = a_arr @ b_arr
    wants = _grad_wanted(a, b)
    out = _wrap_out(out_arr, wants)
    if wants:
        a_req = isinstance(a, Parameter) and a.trainable or isinstance(a, Tensor) and a.requires_grad
        b_req = isinstance(b, Parameter) and b.trainable or isinstance(b, Tensor) and b.requires_grad
        param_slots = []
        if isinstance(a, Parameter) and a.trainable:
            param_slots.append((0, a))
        if isinstance(b, Parameter) and b.trainable:
            param_slots.append((1, b))
        a_keep = a if isinstance(a, Parameter) else (a if b_req else None)
        b_keep = b if isinstance(b, Parameter) else (b if a_req else None)
        ids = (a.id if isinstance(a, Tensor) else -1, b.id if isinstance(b, Tensor) else -1)
        _record(
            MatmulNode(
                ids,
                out.id,
                saved=(a_keep, b_keep),
                param_slots=tuple(param_slots),
                meta={"requires": (a_req, b_req), "capture": capture},
            )
        )
    return out


class AddNode(Node):
    op = "add"

    def backward(self, g_t: Tensor, sink: GradSink) -> None:
        g = g_t.numpy()
        a_id, b_id = self.input_ids
        a_req, b_req = self.meta["requires"]
        a_shape, b_shape = self.meta["shapes"]
        gb = None
        if b_req:
            param = dict(self.param_slots)
            p = param.get(1)
            if p is not None and self.meta.get("capture") is not None and sink.clip_ctx is not None:
                sink.clip_ctx.capture_bias(self.meta["capture"], p, g)
            elif p is not None:
                gp = _unbroadcast(g, b_shape)
                sink.param_grad(p, np.array(gp) if gp is g else gp)
            else:
                gb = _unbroadcast(g, b_shape)
        if a_req:
            ga = _unbroadcast(g, a_shape)
            if gb is not None:
                # two tensor destinations share the incoming buffer: the
                # passthrough below keeps it, so this side takes a copy
                sink.add(b_id, np.array(gb) if gb is g else gb)
            if ga is g:
                sink.adopt(a_id, g_t)
            else:
                sink.add(a_id, ga)
        elif gb is not None:
            if gb is g:
                sink.adopt(b_id, g_t)
            else:
                sink.add(b_id, gb)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b, capture: str | None = None) -> Tensor:
    """Elementwise add with numpy broadcasting; used for bias and residual."""
    a_arr, b_arr = _as_array(a), _as_array(b)
    _check_float("add", a_arr, b_arr)
    try:
        out_arr = a_arr + b_arr
    except ValueError:
        raise DimensionError(f"add: shapes {a_arr.shape} + {b_arr.shape} do not broadcast")
    wants = _grad_wanted(a, b)
    out = _wrap_out(out_arr, wants)
    if wants:
        a_req = isinstance(a, Parameter) and a.trainable or isinstance(a, Tensor) and a.requires_grad
        b_req = isinstance(b, Parameter) and b.trainable or isinstance(b, Tensor) and b.requires_grad
        param_slots = []
        if isinstance(a, Parameter) and a.trainable:
            param_slots.append((0, a))
        if isinstance(b, Parameter) and b.trainable:
            param_slots.append((1, b))
        ids = (a.id if isinstance(a, Tensor) else -1, b.id if isinstance(b, Tensor) else -1)
        _record(
            AddNode(
                ids,
                out.id,
                saved=(),
                param_slots=tuple(param_slots),
                meta={"requires": (a_req, b_req), "shapes": (a_arr.shape, b_arr.shape), "capture": capture},
            )
        )
    return out


def _adopt_buffer(t: Tensor) -> np.ndarray:
    """Take ownership of t's buffer; t becomes released.

    The ledger sees a free now and an alloc when the new owner wraps the
    array: equal sizes, so live bytes never double-count the buffer.
    """
    arr = t.numpy()
    if t._finalizer is not None:
        if t._finalizer.alive:
            t._finalizer.detach()
            t._ledger.on_free(t.id)
        t._finalizer = None
    t.data = None
    return arr


def add_into(target: Tensor, other, capture: str | None = None) -> Tensor:
    """In-place add: result owns target's mutated buffer, no new allocation.

    Gradient semantics are identical to add(target, other). The constraint is
    on the caller: target must be a freshly computed Tensor that no recorded
    node has saved and that is not read again (bias adds onto a matmul
    output, residual adds onto a block output). Passing a nonlinearity
    output or a tensor something else still needs corrupts backward.
    """
    if not isinstance(target, Tensor) or target.dtype.kind != "f":
        raise DimensionError("add_into: target must be a float Tensor")
    other_arr = _as_array(other)
    _check_float("add_into", target.numpy(), other_arr)
    t_shape = target.shape
    if np.broadcast_shapes(t_shape, other_arr.shape) != t_shape:
        raise DimensionError(f"add_into: {other_arr.shape} does not broadcast into {t_shape}")
    wants = _grad_wanted(target, other)
    t_req = target.requires_grad
    o_req = isinstance(other, Parameter) and other.trainable or isinstance(other, Tensor) and other.requires_grad
    t_id = target.id
    arr = _adopt_buffer(target)
    arr += other_arr
    out = _wrap_out(arr, wants)
    if wants:
        param_slots = ((1, other),) if isinstance(other, Parameter) and other.trainable else ()
        o_id = other.id if isinstance(other, Tensor) else -1
        _record(
            AddNode(
                (t_id, o_id),
                out.id,
                saved=(),
                param_slots=param_slots,
                meta={"requires": (t_req, o_req), "shapes": (t_shape, other_arr.shape), "capture": capture},
            )
        )
    return out


class ScaleNode(Node):
    op = "scale"

    def backward(self, g_t: Tensor, sink: GradSink) -> None:
        arr = g_t.numpy()
        arr *= arr.dtype.type(self.meta["c"])
        sink.adopt(self.input_ids[0], g_t)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar."""
    a_arr = _as_array(a)
    out = _wrap_out(a_arr * a_arr.dtype.type(c), _grad_wanted(a))
    if out.requires_grad:
        _record(ScaleNode((a.id,), out.id, meta={"c": float(c)}))
    return out


NONLINEARITIES = ("relu", "gelu", "tanh", "identity")


def _gelu(x: np.ndarray) -> np.ndarray:
    # exact erf form, not the tanh approximation
    return (0.5 * x * (1.0 + _sp.erf(x / np.sqrt(2.0)))).astype(x.dtype)


def _gelu_deriv(x: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    Phi = 0.5 * (1.0 + _sp.erf(x / np.sqrt(2.0)))
    return (Phi + x * phi).astype(x.dtype)


def nonlinearity_value_and_deriv(kind: str, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference value and analytic derivative, for checks."""
    if kind == "relu":
        return np.maximum(x, 0), (x > 0).astype(x.dtype)
    if kind == "gelu":
        return _gelu(x), _gelu_deriv(x)
    if kind == "tanh":
        t = np.tanh(x)
        return t, 1.0 - t * t
    if kind == "identity":
        return x.copy(), np.ones_like(x)
    raise ConfigError(f"unknown nonlinearity {kind!r}")


class NonlinNode(Node):
    op = "nonlinearity"

    def backward(self, g_t: Tensor, sink: GradSink) -> None:
        kind = self.meta["kind"]
        (saved,) = self.saved if self.saved else (None,)
        arr = g_t.numpy()
        if kind == "relu":
            np.multiply(arr, saved.numpy(), out=arr)  # boolean mask zeroes the rest
        elif kind == "gelu":
            arr *= _gelu_deriv(saved.numpy())
        elif kind == "tanh":
            t = saved.numpy()
            arr *= 1.0 - t * t
        sink.adopt(self.input_ids[0], g_t)


def apply_nonlinearity(x, kind: str) -> Tensor:
    """Elementwise nonlinearity. Saved-for-backward depends on the kind:
    relu keeps a 1-byte sign mask, gelu its input, tanh its output,
    identity nothing."""
    if kind not in NONLINEARITIES:
        raise ConfigError(f"unknown nonlinearity {kind!r}")
    x_arr = _as_array(x)
    if kind == "relu":
        out_arr = np.maximum(x_arr, 0)
    elif kind == "gelu":
        out_arr = _gelu(x_arr)
    elif kind == "tanh":
        out_arr = np.tanh(x_arr)
    else:
        out_arr = x_arr.copy()
    out = _wrap_out(out_arr, _grad_wanted(x))
    if out.requires_grad:
        if kind == "relu":
            saved = (Tensor(x_arr > 0),)
        elif kind == "gelu":
            saved = (x,)
        elif kind == "tanh":
            saved = (out,)
        else:
            saved = ()
        _record(NonlinNode((x.id,), out.id, saved=saved, meta={"kind": kind}))
    return out


class EmbedNode(Node):
    op = "embed"

    def backward(self, g_t: Tensor, sink: GradSink) -> None:
        g = g_t.numpy()
        (tokens_t,) = self.saved
        param = dict(self.param_slots)[0]
        if self.meta.get("capture") is not None and sink.clip_ctx is not None:
            sink.clip_ctx.capture_embed(self.meta["capture"], param, tokens_t, g_t)
        else:
            acc = np.zeros(param.shape, dtype=g.dtype)
            np.add.at(acc, tokens_t.numpy().ravel(), g.reshape(-1, g.shape[-1]))
            sink.param_grad(param, acc)


def embed(table: Parameter, tokens, capture: str | None = None) -> Tensor:
    """Row lookup: tokens [B, T] int -> [B, T, d]."""
    tok_arr = tokens.numpy() if isinstance(tokens, Tensor) else np.asarray(tokens)
    if tok_arr.dtype.kind not in "iu":
        raise DataError("embed: token ids must be integers")
    tab = table.data
    if tok_arr.size and (tok_arr.min() < 0 or tok_arr.max() >= tab.shape[0]):
        raise DataError(f"embed: token id out of range [0, {tab.shape[0]})")
    out = _wrap_out(tab[tok_arr], _grad_wanted(table))
    if out.requires_grad:
        tok_t = tokens if isinstance(tokens, Tensor) else Tensor(tok_arr.astype(np.int32))
        _record(EmbedNode((-1,), out.id, saved=(tok_t,), param_slots=((0, table),), meta={"capture": capture}))
    return out


class MeanTimeNode(Node):
    op = "mean_over_time"

    def backward(self, g_t: Tensor, sink: GradSink) -> None:
        g = g_t.numpy()
        T = self.meta["T"]
        sink.add(self.input_ids[0], np.repeat(g[:, None, :] / g.dtype.type(T), T, axis=1))


def mean_over_time(x) -> Tensor:
    """[B, T, d] -> [B, d], mean over the sequence axis."""
    x_arr = _as_array(x)
    if x_arr.ndim != 3:
        raise DimensionError(f"mean_over_time: expected [B, T, d], got {x_arr.shape}")
    out = _wrap_out(x_arr.mean(axis=1), _grad_wanted(x))
    if out.requires_grad:
        _record(MeanTimeNode((x.id,), out.id, meta={"T": x_arr.shape[1]}))
    return out


class SumNode(Node):
    op = "sum_all"

    def backward(self, g_t: Tensor, sink: GradSink) -> None:
        shape = self.meta["shape"]
        sink.add(self.input_ids[0], np.broadcast_to(g_t.numpy(), shape).copy())


def sum_all(x) -> Tensor:
    """Reduce to a scalar tensor (shape ())."""
    x_arr = _as_array(x)
    out = _wrap_out(np.asarray(x_arr.sum(), dtype=x_arr.dtype), _grad_wanted(x))
    if out.requires_grad:
        _record(SumNode((x.id,), out.id, meta={"shape": x_arr.shape}))
    return out


class PerExampleLossNode(Node):
    op = "per_example_loss"

    def backward(self, g_t: Tensor, sink: GradSink) -> None:
        g = g_t.numpy()
        probs_t, labels_t = self.saved
        probs = probs_t.numpy()
        labels = labels_t.numpy()
        gl = probs * g[:, None]
        gl[np.arange(len(labels)), labels] -= g
        sink.add(self.input_ids[0], gl.astype(probs.dtype))


def per_example_loss(logits, labels) -> Tensor:
    """Softmax cross-entropy per example: [B, C] + [B] -> [B].

    The mean (or sum) is taken downstream, so each row of the output is one
    example's loss and backward keeps per-example rows independent.
    """
    z = _as_array(logits)
    lab = labels.numpy() if isinstance(labels, Tensor) else np.asarray(labels)
    if z.ndim != 2:
        raise DimensionError(f"per_example_loss: logits must be [B, classes], got {z.shape}")
    if lab.shape != (z.shape[0],):
        raise DimensionError(f"per_example_loss: labels shape {lab.shape} vs logits {z.shape}")
    C = z.shape[1]
    bad = np.nonzero((lab < 0) | (lab >= C))[0]
    if bad.size:
        raise DataError(f"label out of range at example index {int(bad[0])}: {int(lab[bad[0]])} not in [0, {C})")
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    se = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(se)
    losses = -logp[np.arange(len(lab)), lab]
    out = _wrap_out(losses.astype(z.dtype), _grad_wanted(logits))
    if out.requires_grad:
        probs = Tensor((ez / se).astype(z.dtype))
        lab_t = Tensor(lab.astype(np.int64))
        _record(PerExampleLossNode((logits.id,), out.id, saved=(probs, lab_t)))
    return out


# ---------------------------------------------------------------------------
# Backward driver
# ---------------------------------------------------------------------------


def backward(tape: Tape, seeds: dict[Tensor, np.ndarray] | Tensor, clip_ctx=None) -> GradSink:
    """Reverse sweep over the tape.

    `seeds` is either a scalar loss Tensor (seeded with 1.0) or an explicit
    {tensor: cotangent} dict. Trainable-parameter grads are written into
    Parameter.grad, or handed to `clip_ctx` for per-sample treatment.
    Saved activations are released as soon as their node is done, and each
    node takes ownership of its incoming cotangent, so wide buffers move
    through the walk instead of being copied at every hop. Returns the sink
    so callers can read cotangents of leaf tensors they seeded
    requires_grad on.
    """
    if tape.consumed:
        raise StateError("backward on a consumed tape")
    tape.consumed = True
    sink = GradSink(clip_ctx)
    if isinstance(seeds, Tensor):
        if seeds.numpy().ndim != 0:
            raise DimensionError(f"backward: loss must be scalar, got shape {seeds.shape}")
        sink.seed(seeds.id, np.ones((), dtype=seeds.dtype))
    else:
        for t, g in seeds.items():
            if isinstance(g, Tensor):
                if g.dtype != t.dtype:
                    raise DimensionError(f"backward: seed dtype {g.dtype} vs tensor {t.dtype}")
                sink.seed(t.id, g)
            else:
                sink.seed(t.id, np.asarray(g, dtype=t.dtype))
    for node in reversed(tape.nodes):
        g_t = sink.pop(node.out_id)
        if g_t is None:
            node.release_saves()
            continue
        # the node owns g_t while its backward runs: it may mutate the buffer
        # in place, move it onward (sink.adopt, a ghost capture), or leave it.
        # Whatever was not moved is dead after the node and freed here.
        node.backward(g_t, sink)
        if not g_t.moved:
            g_t.release()
        node.release_saves()
    return sink


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator: PCG64 stream, Gaussians via numpy's ziggurat.

    Same seed gives a bit-identical stream on every platform numpy supports.
    """
    return np.random.Generator(np.random.PCG64(int(seed)))


def spawn_rngs(seed: int, names: list[str]) -> dict[str, np.random.Generator]:
    """Independent named streams derived from one seed via SeedSequence.spawn."""
    ss = np.random.SeedSequence(int(seed))
    children = ss.spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(c)) for n, c in zip(names, children)}
