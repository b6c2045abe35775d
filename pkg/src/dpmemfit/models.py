"""Sequence classifiers over a residual-FFN backbone, one per tuning scheme.

Every model is embed -> N blocks -> mean pool -> linear head, where a block
is h = W2 sigma(W1 x + b1) + b2 + x. The schemes differ only in which
parameters train and what small machinery is attached:

  full       everything trains, including the embedding
  lora       low-rank deltas on both FFN projections, rank r, zero at init
  adapter    bottleneck residual sub-network after each block, zero at init
  bitfit     bias vectors of the frozen network (the task head always trains)
  side       narrow parallel network fed by per-block down-projected taps;
             the frozen backbone records nothing for backward
  reversible coupled two-stream blocks, constant activation memory (see
             reversible.py)

The task head is trainable in every scheme: it is a fresh task-specific
layer, not part of the frozen network. Frozen parameters never receive
gradients, which the engine enforces by construction.

Weight draws come from named substreams of one seed, fixed per component,
so two kinds built from the same seed share identical frozen weights. With
zero-initialized deltas that makes initial logits of lora/adapter models
bit-equal to the frozen baseline's.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine as E
from .errors import ConfigError, DataError, StateError

_STREAM_NAMES = ("embed", "backbone", "head", "tuning", "tuning_g")

MODEL_KINDS = ("full", "lora", "adapter", "bitfit", "side", "reversible")


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 6
    width: int = 256
    ffn_hidden: int | None = None  # None means 4 * width
    vocab: int = 1000
    seq_len: int = 128
    num_classes: int = 4
    nonlinearity: str = "relu"

    @property
    def ffn(self) -> int:
        return 4 * self.width if self.ffn_hidden is None else self.ffn_hidden

    def validate(self) -> None:
        for name in ("depth", "width", "vocab", "seq_len", "num_classes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"backbone {name} must be positive, got {getattr(self, name)}")
        if self.ffn <= 0:
            raise ConfigError(f"backbone ffn_hidden must be positive, got {self.ffn_hidden}")
        if self.nonlinearity not in E.NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 32
    scaling: float | None = None  # None means 1 / rank

    @property
    def scale(self) -> float:
        return 1.0 / self.rank if self.scaling is None else self.scaling

    def validate(self) -> None:
        if self.rank <= 0:
            raise ConfigError(f"lora rank must be positive, got {self.rank}")
        if self.scaling is not None and self.scaling <= 0:
            raise ConfigError(f"lora scaling must be positive, got {self.scaling}")


@dataclass(frozen=True)
class AdapterConfig:
    bottleneck: int = 64

    def validate(self) -> None:
        if self.bottleneck <= 0:
            raise ConfigError(f"adapter bottleneck must be positive, got {self.bottleneck}")


@dataclass(frozen=True)
class SideConfig:
    reduction: int = 8  # side width is backbone width / reduction

    def validate(self, width: int) -> None:
        if self.reduction <= 0:
            raise ConfigError(f"side reduction must be positive, got {self.reduction}")
        if width % self.reduction:
            raise ConfigError(f"backbone width {width} not divisible by side reduction {self.reduction}")


F_KINDS = ("lora-ffn", "parallel-adapter", "prefix-like", "dylora-like")

# inversion divides by alpha and beta, so tiny values are rejected at build
COUPLING_FLOOR = 1e-2


@dataclass(frozen=True)
class RevConfig:
    alpha: float = 1.0
    beta: float = 1.0
    exchange_after_first: bool = True
    f_kind: str = "lora-ffn"
    f_rank: int = 8
    g_bottleneck: int = 8

    def validate(self) -> None:
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (COUPLING_FLOOR <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [{COUPLING_FLOOR}, 1], got {v}")
        if self.f_kind not in F_KINDS:
            raise ConfigError(f"unknown f_kind {self.f_kind!r}; choose from {F_KINDS}")
        if self.f_rank <= 0 or self.g_bottleneck <= 0:
            raise ConfigError("f_rank and g_bottleneck must be positive")


@dataclass(frozen=True)
class ModelSpec:
    """Manifest embedded in run reports."""

    kind: str
    depth: int
    width: int
    ffn_hidden: int
    vocab: int
    seq_len: int
    num_classes: int
    nonlinearity: str
    dtype: str
    seed: int
    tuning: dict = field(default_factory=dict)
    total_params: int = 0
    trainable_params: int = 0
    trainable_fraction: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Base model
# ---------------------------------------------------------------------------


class Model:
    """Parameter store plus tape plumbing shared by all schemes.

    forward_loss opens a tape and leaves it active on return, so the caller
    can still append the loss reduction; backward closes and consumes it.
    One pending forward at a time.
    """

    kind = "base"
    retain_policy = "store-all"

    def __init__(self, backbone: BackboneConfig, seed: int, dtype: str, embed_init: np.ndarray | None = None):
        backbone.validate()
        if dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {dtype!r}")
        self.backbone = backbone
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, E.Parameter] = {}
        self._clip_specs: list[dict] = []
        self._tape: E.Tape | None = None
        self._rngs = E.spawn_rngs(self.seed, list(_STREAM_NAMES))
        self._embed_init = embed_init
        self.lora: LoRAConfig | None = None
        self.adapter: AdapterConfig | None = None

    # -- construction helpers --------------------------------------------------

    def _add_param(self, name: str, arr: np.ndarray, trainable: bool) -> E.Parameter:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = E.Parameter(np.asarray(arr, dtype=self.dtype), name, trainable=trainable)
        self.params[name] = p
        return p

    def _spec_weight(self, name: str, d_in: int, p_out: int, pooled: bool = False) -> None:
        self._clip_specs.append({"name": name, "kind": "weight", "p": p_out, "d": d_in, "pooled": pooled})

    def _spec_bias(self, name: str, p_out: int) -> None:
        self._clip_specs.append({"name": name, "kind": "bias", "p": p_out, "d": 1, "pooled": False})

    def _init_linear(self, prefix, d_in, d_out, rng, w_train, b_train, w_zero=False, pooled=False):
        w = np.zeros((d_in, d_out)) if w_zero else rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_out))
        self._add_param(f"{prefix}.w", w, w_train)
        self._add_param(f"{prefix}.b", np.zeros(d_out), b_train)
        if w_train:
            self._spec_weight(f"{prefix}.w", d_in, d_out, pooled=pooled)
        if b_train:
            self._spec_bias(f"{prefix}.b", d_out)

    def _init_embed(self, trainable: bool) -> None:
        cfg = self.backbone
        if self._embed_init is not None:
            init = np.asarray(self._embed_init, dtype=self.dtype)
            if init.shape[0] != cfg.vocab or init.shape[1] > cfg.width:
                raise ConfigError(
                    f"embed_init shape {init.shape} incompatible with vocab {cfg.vocab}, width {cfg.width}"
                )
            table = np.zeros((cfg.vocab, cfg.width))
            table[:, : init.shape[1]] = init
        else:
            table = self._rngs["embed"].normal(0.0, 1.0, (cfg.vocab, cfg.width))
        self._add_param("embed", table, trainable)
        if trainable:
            self._clip_specs.append(
                {"name": "embed", "kind": "embed", "p": cfg.vocab, "d": cfg.width, "pooled": False}
            )

    def _init_backbone(self, w_train: bool, b_train: bool) -> None:
        cfg = self.backbone
        rng = self._rngs["backbone"]
        for i in range(1, cfg.depth + 1):
            pre = f"block{i:02d}"
            self._init_linear(f"{pre}.in", cfg.width, cfg.ffn, rng, w_train, b_train)
            self._init_linear(f"{pre}.out", cfg.ffn, cfg.width, rng, w_train, b_train)

    def _init_head(self, d_in: int) -> None:
        self._init_linear("head", d_in, self.backbone.num_classes, self._rngs["head"], True, True, pooled=True)

    # -- forward pieces ----------------------------------------------------------

    def _linear(self, x, prefix: str) -> E.Tensor:
        h = E.matmul(x, self.params[f"{prefix}.w"], capture=f"{prefix}.w")
        return E.add_into(h, self.params[f"{prefix}.b"], capture=f"{prefix}.b")

    def _block_forward(self, x: E.Tensor, i: int) -> E.Tensor:
        cfg = self.backbone
        pre = f"block{i:02d}"
        # low-rank deltas come first so wide temporaries never coexist
        delta = self._lora_delta(x, f"{pre}.lora_in") if self.lora is not None else None
        h = E.matmul(x, self.params[f"{pre}.in.w"], capture=f"{pre}.in.w")
        if delta is not None:
            h = E.add_into(h, delta)
            del delta
        h = E.add_into(h, self.params[f"{pre}.in.b"], capture=f"{pre}.in.b")
        a = E.apply_nonlinearity(h, cfg.nonlinearity)
        delta = self._lora_delta(a, f"{pre}.lora_out") if self.lora is not None else None
        y = E.matmul(a, self.params[f"{pre}.out.w"], capture=f"{pre}.out.w")
        if delta is not None:
            y = E.add_into(y, delta)
            del delta
        y = E.add_into(y, self.params[f"{pre}.out.b"], capture=f"{pre}.out.b")
        out = E.add_into(y, x)  # residual; x stays untouched
        if self.adapter is not None:
            out = self._adapter_forward(out, f"{pre}.adapter")
        return out

    def _lora_delta(self, x, prefix: str) -> E.Tensor:
        u = E.matmul(x, self.params[f"{prefix}.a"], capture=f"{prefix}.a")
        v = E.matmul(u, self.params[f"{prefix}.b"], capture=f"{prefix}.b")
        return E.scale(v, self.lora.scale)

    def _adapter_forward(self, z: E.Tensor, prefix: str) -> E.Tensor:
        t = self._linear(z, f"{prefix}.down")
        t = E.apply_nonlinearity(t, self.backbone.nonlinearity)
        t = self._linear(t, f"{prefix}.up")
        return E.add_into(t, z)  # residual inside the adapter

    def _forward_logits(self, tok: np.ndarray) -> E.Tensor:
        x = E.embed(self.params["embed"], tok, capture="embed")
        for i in range(1, self.backbone.depth + 1):
            x = self._block_forward(x, i)
        pooled = E.mean_over_time(x)
        return self._linear(pooled, "head")

    # -- protocol ---------------------------------------------------------------

    def _check_tokens(self, tokens) -> np.ndarray:
        tok = np.asarray(tokens)
        if tok.ndim != 2:
            raise DataError(f"tokens must be [batch, seq_len], got shape {tok.shape}")
        if tok.shape[1] != self.backbone.seq_len:
            raise DataError(f"sequence length {tok.shape[1]} does not match configured {self.backbone.seq_len}")
        return tok

    def forward_loss(self, tokens, labels) -> E.Tensor:
        """Per-example loss vector [B]; the tape stays active for the caller."""
        if self._tape is not None:
            raise StateError("forward_loss while a previous forward is still pending")
        tok = self._check_tokens(tokens)
        self._tape = E.Tape(self.retain_policy)
        self._tape.__enter__()
        try:
            logits = self._forward_logits(tok)
            return E.per_example_loss(logits, np.asarray(labels))
        except BaseException:
            self._tape.__exit__(None, None, None)
            self._tape = None
            raise

    def backward(self, loss: E.Tensor, clip_ctx=None) -> None:
        if self._tape is None:
            raise StateError("backward called without a pending forward")
        tape = self._tape
        self._tape = None
        tape.__exit__(None, None, None)
        E.backward(tape, loss, clip_ctx)

    def predict_logits(self, tokens) -> np.ndarray:
        tok = self._check_tokens(tokens)
        with E.no_grad():
            out = self._forward_logits(tok)
            arr = out.numpy().copy()
        return arr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.free_grad()
        if self._tape is not None:
            self._tape.__exit__(None, None, None)
            self._tape = None

    def parameters(self) -> list[E.Parameter]:
        return list(self.params.values())

    def trainable_parameters(self) -> list[E.Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def clip_layer_specs(self, T: int) -> list[dict]:
        return [dict(s) for s in self._clip_specs]

    def total_param_count(self) -> int:
        return sum(p.tensor.numpy().size for p in self.params.values())

    def trainable_param_count(self) -> int:
        return sum(p.tensor.numpy().size for p in self.trainable_parameters())

    def trainable_fraction(self) -> float:
        return self.trainable_param_count() / self.total_param_count()

    def tuning_dict(self) -> dict:
        return {}

    def spec(self) -> ModelSpec:
        cfg = self.backbone
        return ModelSpec(
            kind=self.kind,
            depth=cfg.depth,
            width=cfg.width,
            ffn_hidden=cfg.ffn,
            vocab=cfg.vocab,
            seq_len=cfg.seq_len,
            num_classes=cfg.num_classes,
            nonlinearity=cfg.nonlinearity,
            dtype=str(self.dtype),
            seed=self.seed,
            tuning=self.tuning_dict(),
            total_params=self.total_param_count(),
            trainable_params=self.trainable_param_count(),
            trainable_fraction=self.trainable_fraction(),
        )


# ---------------------------------------------------------------------------
# The four baseline schemes
# ---------------------------------------------------------------------------


class FullModel(Model):
    kind = "full"

    def __init__(self, backbone, seed=0, dtype="float32", embed_init=None):
        super().__init__(backbone, seed, dtype, embed_init)
        self._init_embed(trainable=True)
        self._init_backbone(w_train=True, b_train=True)
        self._init_head(backbone.width)


class BitFitModel(Model):
    kind = "bitfit"

    def __init__(self, backbone, seed=0, dtype="float32", embed_init=None):
        super().__init__(backbone, seed, dtype, embed_init)
        self._init_embed(trainable=False)
        self._init_backbone(w_train=False, b_train=True)
        self._init_head(backbone.width)


class LoRAModel(Model):
    kind = "lora"

    def __init__(self, backbone, tuning: LoRAConfig, seed=0, dtype="float32", embed_init=None):
        super().__init__(backbone, seed, dtype, embed_init)
        tuning.validate()
        self.lora = tuning
        self._init_embed(trainable=False)
        self._init_backbone(w_train=False, b_train=False)
        rng = self._rngs["tuning"]
        r = tuning.rank
        for i in range(1, backbone.depth + 1):
            for tag, d_in, d_out in ((f"block{i:02d}.lora_in", backbone.width, backbone.ffn),
                                     (f"block{i:02d}.lora_out", backbone.ffn, backbone.width)):
                self._add_param(f"{tag}.a", rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, r)), True)
                self._add_param(f"{tag}.b", np.zeros((r, d_out)), True)  # delta exactly zero at init
                self._spec_weight(f"{tag}.a", d_in, r)
                self._spec_weight(f"{tag}.b", r, d_out)
        self._init_head(backbone.width)

    def tuning_dict(self) -> dict:
        return {"rank": self.lora.rank, "scaling": self.lora.scale}


class AdapterModel(Model):
    kind = "adapter"

    def __init__(self, backbone, tuning: AdapterConfig, seed=0, dtype="float32", embed_init=None):
        super().__init__(backbone, seed, dtype, embed_init)
        tuning.validate()
        self.adapter = tuning
        self._init_embed(trainable=False)
        self._init_backbone(w_train=False, b_train=False)
        rng = self._rngs["tuning"]
        m = tuning.bottleneck
        for i in range(1, backbone.depth + 1):
            pre = f"block{i:02d}.adapter"
            self._init_linear(f"{pre}.down", backbone.width, m, rng, True, True)
            # up-projection starts at zero, so the adapter is invisible at init
            self._init_linear(f"{pre}.up", m, backbone.width, rng, True, True, w_zero=True)
        self._init_head(backbone.width)

    def tuning_dict(self) -> dict:
        return {"bottleneck": self.adapter.bottleneck}


class SideModel(Model):
    """Narrow trainable stream beside the frozen backbone.

    y_0 = down(x_0); y_i = SideBlock_i(y_{i-1} + tap_i(x_i)). The backbone
    never requires grad, so the engine records none of its ops: no backbone
    activation survives the forward pass.
    """

    kind = "side"

    def __init__(self, backbone, tuning: SideConfig, seed=0, dtype="float32", embed_init=None):
        super().__init__(backbone, seed, dtype, embed_init)
        tuning.validate(backbone.width)
        self.side = tuning
        self.side_width = backbone.width // tuning.reduction
        self._init_embed(trainable=False)
        self._init_backbone(w_train=False, b_train=False)
        rng = self._rngs["tuning"]
        r = self.side_width
        self._init_linear("side.pool", backbone.width, r, rng, True, True)
        for i in range(1, backbone.depth + 1):
            self._init_linear(f"side.tap{i:02d}", backbone.width, r, rng, True, True)
            self._init_linear(f"side.block{i:02d}.in", r, 4 * r, rng, True, True)
            self._init_linear(f"side.block{i:02d}.out", 4 * r, r, rng, True, True)
        self._init_head(r)

    def tuning_dict(self) -> dict:
        return {"reduction": self.side.reduction, "side_width": self.side_width}

    def _side_block(self, y_in: E.Tensor, i: int) -> E.Tensor:
        h = self._linear(y_in, f"side.block{i:02d}.in")
        a = E.apply_nonlinearity(h, self.backbone.nonlinearity)
        o = self._linear(a, f"side.block{i:02d}.out")
        return E.add_into(o, y_in)

    def _forward_logits(self, tok: np.ndarray) -> E.Tensor:
        x = E.embed(self.params["embed"], tok)
        y = self._linear(x, "side.pool")
        for i in range(1, self.backbone.depth + 1):
            x = self._block_forward(x, i)  # frozen: nothing recorded, nothing saved
            t = self._linear(x, f"side.tap{i:02d}")
            y = self._side_block(E.add_into(t, y), i)
        pooled = E.mean_over_time(y)
        return self._linear(pooled, "head")


# ---------------------------------------------------------------------------
# Factory
# ---------------------------------------------------------------------------


_DEFAULT_TUNING = {
    "lora": LoRAConfig,
    "adapter": AdapterConfig,
    "side": SideConfig,
}


def build_model(kind: str, backbone: BackboneConfig, tuning=None, *,
                seed: int = 0, dtype: str = "float32", embed_init: np.ndarray | None = None) -> Model:
    """Construct one of the six schemes; see the module docstring."""
    if kind == "full" or kind == "bitfit":
        if tuning is not None:
            raise ConfigError(f"kind {kind!r} takes no tuning config")
        cls = FullModel if kind == "full" else BitFitModel
        return cls(backbone, seed=seed, dtype=dtype, embed_init=embed_init)
    if kind in ("lora", "adapter", "side"):
        default = _DEFAULT_TUNING[kind]
        tuning = default() if tuning is None else tuning
        if not isinstance(tuning, default):
            raise ConfigError(f"kind {kind!r} expects {default.__name__}, got {type(tuning).__name__}")
        cls = {"lora": LoRAModel, "adapter": AdapterModel, "side": SideModel}[kind]
        return cls(backbone, tuning, seed=seed, dtype=dtype, embed_init=embed_init)
    if kind == "reversible":
        from .reversible import ReversibleModel

        tuning = RevConfig() if tuning is None else tuning
        if not isinstance(tuning, RevConfig):
            raise ConfigError(f"kind 'reversible' expects RevConfig, got {type(tuning).__name__}")
        return ReversibleModel(backbone, tuning, seed=seed, dtype=dtype, embed_init=embed_init)
    raise ConfigError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
