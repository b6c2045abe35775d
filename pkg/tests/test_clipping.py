"""Per-sample norm and clipped-sum tests.

The naive per-example oracle (one backward per example) is the ground truth
throughout; the production two-pass path must match it for every strategy
and every model kind. Memory-shape claims are checked against the ledger,
not inferred from the code.
"""

import math

import numpy as np
import pytest

from dpmemfit import engine as E
from dpmemfit.clipping import (
    GHOST,
    INSTANTIATE,
    REDUCE,
    ClipContext,
    ClipPlan,
    bk_clip_step,
    build_clip_plan,
    choose_strategy,
    clip_factors,
    clipped_grad_sum_layer,
    ghost_norm_layer,
    naive_per_sample_grads,
    per_sample_grads_matmul,
)
from dpmemfit.errors import ConfigError, StateError
from dpmemfit.ledger import MemoryLedger
from dpmemfit.models import MODEL_KINDS, BackboneConfig, Model, build_model

from test_models import batch, make, perturb, small_cfg


class OneLayerModel(Model):
    """Frozen embedding feeding a single trainable projection.

    The smallest model with a real (input, output-grad) pair per example;
    used wherever the contract speaks about one linear layer.
    """

    kind = "onelayer"

    def __init__(self, d=5, p=2, T=3, vocab=13, seed=0):
        cfg = BackboneConfig(depth=1, width=d, ffn_hidden=4, vocab=vocab, seq_len=T, num_classes=p)
        super().__init__(cfg, seed, "float64")
        self._init_embed(trainable=False)
        self._init_linear("proj", d, p, self._rngs["head"], True, True)

    def _forward_logits(self, tok):
        x = E.embed(self.params["embed"], tok)
        h = self._linear(x, "proj")
        return E.mean_over_time(h)


def oracle_clipped_sum(naive, norms_sq, C):
    factors = np.minimum(1.0, C / np.maximum(np.sqrt(norms_sq), 1e-300))
    out = {}
    for name in naive[0]:
        out[name] = sum(f * g[name] for f, g in zip(factors, naive))
    return out, factors


def oracle_norms_sq(naive):
    return np.array([sum(float((g**2).sum()) for g in grads.values()) for grads in naive])


def run_bk(m, tok, lab, C, plan=None):
    m.zero_grad()
    plan = plan or build_clip_plan(m, m.backbone.seq_len, C)
    res = bk_clip_step(m, tok, lab, plan)
    grads = {p.name: p.grad.numpy().copy() for p in m.trainable_parameters() if p.grad is not None}
    m.zero_grad()
    return res, grads


def rel_err(a, b):
    denom = max(np.max(np.abs(b)), 1e-300)
    return np.max(np.abs(a - b)) / denom


# ---------------------------------------------------------------------------
# strategy choice
# ---------------------------------------------------------------------------


def test_choose_strategy_direct_cases():
    assert choose_strategy(T=128, p=1024, d=1024) == GHOST  # 2T² = 32768 ≤ 1048576
    assert choose_strategy(T=1024, p=16, d=16) == INSTANTIATE  # 2097152 > 256
    assert choose_strategy(T=4, p=8, d=4) == GHOST  # exact tie, 32 == 32
    with pytest.raises(ConfigError):
        choose_strategy(T=0, p=1, d=1)
    with pytest.raises(ConfigError):
        choose_strategy(T=4, p=-2, d=4)


def test_build_clip_plan_respects_pooled_and_bias():
    m = make("full", cfg=small_cfg(seq_len=12))  # 2T² = 288 > p·d for every block weight
    plan = build_clip_plan(m, 12, 1.0)
    assert plan.strategy("block01.in.w") == INSTANTIATE  # p·d = 240
    assert plan.strategy("block01.in.b") == REDUCE
    assert plan.strategy("head.w") == GHOST  # pooled input: effective T is 1
    assert plan.strategy("embed") == INSTANTIATE  # p·d = 17·12 = 204 < 288

    m2 = make("full")  # seq_len 6: 2T² = 72 ≤ 240
    plan2 = build_clip_plan(m2, 6, 1.0)
    assert plan2.strategy("block01.in.w") == GHOST


def test_plan_missing_layer_raises():
    plan = ClipPlan(per_layer={}, clip_bound=1.0)
    with pytest.raises(ConfigError):
        plan.strategy("anything")


# ---------------------------------------------------------------------------
# per-layer primitives
# ---------------------------------------------------------------------------


def test_ghost_norm_scalar_case():
    x = np.array([[[2.0]]])
    g = np.array([[[3.0]]])
    assert ghost_norm_layer(x, g) == pytest.approx([36.0])  # grad 6, squared norm 36


def test_ghost_norm_zero_grad_gives_zeros():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4, 5))
    assert np.array_equal(ghost_norm_layer(x, np.zeros((3, 4, 2))), np.zeros(3))


def test_ghost_norm_matches_instantiated_norms():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 3, 5))
    g = rng.standard_normal((4, 3, 2))
    per = per_sample_grads_matmul(x, g)
    assert per.shape == (4, 5, 2)
    expected = np.einsum("bdp,bdp->b", per, per)
    got = ghost_norm_layer(x, g)
    assert rel_err(got, expected) < 1e-10
    # the instantiated grads themselves are the plain per-example products
    for i in range(4):
        assert np.allclose(per[i], x[i].T @ g[i], rtol=1e-12)


def test_ghost_norm_accepts_pooled_2d_inputs():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 5))
    g = rng.standard_normal((6, 3))
    per = np.einsum("bd,bp->bdp", x, g)
    expected = np.einsum("bdp,bdp->b", per, per)
    assert rel_err(ghost_norm_layer(x, g), expected) < 1e-12


def test_clip_factors_basics():
    f = clip_factors(np.array([4.0, 0.25]), C=1.0)
    assert np.allclose(f, [0.5, 1.0], rtol=0, atol=1e-15)  # norms 2.0 and 0.5
    assert np.array_equal(clip_factors(np.array([0.5, 0.81]), C=1.0), np.ones(2))
    f = clip_factors(np.array([1e30]), C=1.0)
    assert f == pytest.approx([1e-15])
    clipped_norm = math.sqrt(1e30) * f[0]
    assert clipped_norm == pytest.approx(1.0, rel=1e-6)
    assert np.array_equal(clip_factors(np.array([4.0]), C=math.inf), np.ones(1))
    with pytest.raises(ConfigError):
        clip_factors(np.array([1.0]), C=0.0)
    with pytest.raises(ConfigError):
        clip_factors(np.array([1.0]), C=-2.0)


def test_clipped_grad_sum_layer_linearity():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3, 5))
    g = rng.standard_normal((4, 3, 2))
    full = clipped_grad_sum_layer(x, g, np.ones(4))
    plain = np.einsum("btd,btp->dp", x, g)
    assert rel_err(full, plain) < 1e-10
    half = clipped_grad_sum_layer(x, g, np.full(4, 0.5))
    assert np.allclose(half, 0.5 * plain, rtol=1e-12)
    factors = rng.uniform(0.1, 1.0, 4)
    per = per_sample_grads_matmul(x, g)
    expected = np.tensordot(factors, per, axes=1)
    assert rel_err(clipped_grad_sum_layer(x, g, factors), expected) < 1e-10
    with pytest.raises(Exception):
        clipped_grad_sum_layer(x, g, np.ones(3))


# ---------------------------------------------------------------------------
# the naive oracle itself
# ---------------------------------------------------------------------------


def test_naive_oracle_single_example_equals_plain_backward():
    m = OneLayerModel()
    tok, lab = batch(m.backbone, B=1, seed=4)
    naive = naive_per_sample_grads(m, tok, lab)
    per = m.forward_loss(tok, lab)
    m.backward(E.sum_all(per))
    for p in m.trainable_parameters():
        assert np.allclose(naive[0][p.name], p.grad.numpy(), rtol=1e-12)
    m.zero_grad()


def test_naive_oracle_sums_to_batch_gradient():
    m = OneLayerModel()
    tok, lab = batch(m.backbone, B=5, seed=5)
    naive = naive_per_sample_grads(m, tok, lab)
    per = m.forward_loss(tok, lab)
    m.backward(E.sum_all(per))
    for p in m.trainable_parameters():
        summed = sum(g[p.name] for g in naive)
        assert rel_err(summed, p.grad.numpy()) < 1e-10
    m.zero_grad()


def test_naive_oracle_duplicate_rows_get_identical_grads():
    m = OneLayerModel()
    tok, lab = batch(m.backbone, B=4, seed=6)
    tok[2] = tok[0]
    lab[2] = lab[0]
    naive = naive_per_sample_grads(m, tok, lab)
    for name in naive[0]:
        assert np.array_equal(naive[0][name], naive[2][name])


# ---------------------------------------------------------------------------
# the two-pass step against the oracle
# ---------------------------------------------------------------------------


def test_bk_single_layer_matches_oracle():
    m = OneLayerModel()
    tok, lab = batch(m.backbone, B=4, seed=7)
    naive = naive_per_sample_grads(m, tok, lab)
    norms_sq = oracle_norms_sq(naive)
    C = 0.9 * float(np.median(np.sqrt(norms_sq)))  # some clip, some do not
    res, grads = run_bk(m, tok, lab, C)
    assert rel_err(res.norms.total, norms_sq) < 1e-10
    expected, factors = oracle_clipped_sum(naive, norms_sq, C)
    assert np.allclose(res.factors, factors, rtol=1e-10)
    for name, g in expected.items():
        assert rel_err(grads[name], g) < 1e-8, name


def test_bk_infinite_bound_equals_plain_backward():
    m = make("full")
    perturb(m)
    tok, lab = batch(m.backbone, B=4, seed=8)
    res, grads = run_bk(m, tok, lab, math.inf)
    assert np.array_equal(res.factors, np.ones(4))
    per = m.forward_loss(tok, lab)
    m.backward(E.sum_all(per))
    for p in m.trainable_parameters():
        assert rel_err(grads[p.name], p.grad.numpy()) < 1e-12, p.name
    m.zero_grad()


def test_norm_additivity_across_layers():
    m = make("full")  # well over three trainable layers
    tok, lab = batch(m.backbone, B=4, seed=9)
    res, _ = run_bk(m, tok, lab, C=1.0)
    assert len(res.norms.per_layer) >= 3
    stacked = sum(res.norms.per_layer.values())
    assert np.allclose(stacked, res.norms.total, rtol=1e-12)
    naive = naive_per_sample_grads(m, tok, lab)
    assert rel_err(res.norms.total, oracle_norms_sq(naive)) < 1e-10


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_bk_matches_oracle_for_every_model_kind(kind):
    m = make(kind)
    perturb(m)
    tok, lab = batch(m.backbone, B=4, seed=10)
    naive = naive_per_sample_grads(m, tok, lab)
    norms_sq = oracle_norms_sq(naive)
    C = float(np.median(np.sqrt(norms_sq)))
    res, grads = run_bk(m, tok, lab, C)
    assert rel_err(res.norms.total, norms_sq) < 1e-8
    expected, _ = oracle_clipped_sum(naive, norms_sq, C)
    assert set(grads) == set(expected)
    for name, g in expected.items():
        assert rel_err(grads[name], g) < 1e-8, f"{kind}:{name}"


def test_bk_embedding_with_repeated_tokens():
    # tiny vocabulary forces rows to collide inside each example, which is
    # exactly what the token-equality Gram must account for
    cfg = small_cfg(vocab=4)
    m = build_model("full", cfg, seed=3, dtype="float64")
    tok, lab = batch(cfg, B=5, seed=11)
    naive = naive_per_sample_grads(m, tok, lab)
    norms_sq = oracle_norms_sq(naive)
    C = float(np.median(np.sqrt(norms_sq)))
    res, grads = run_bk(m, tok, lab, C)
    assert rel_err(res.norms.total, norms_sq) < 1e-10
    expected, _ = oracle_clipped_sum(naive, norms_sq, C)
    for name, g in expected.items():
        assert rel_err(grads[name], g) < 1e-8, name


def forced_plan(m, strategy, C):
    plan = build_clip_plan(m, m.backbone.seq_len, C)
    forced = {
        name: (strategy if s in (GHOST, INSTANTIATE) else s) for name, s in plan.per_layer.items()
    }
    return ClipPlan(per_layer=forced, clip_bound=C)


def test_strategy_invariance_ghost_vs_instantiate():
    m = make("full")
    perturb(m)
    tok, lab = batch(m.backbone, B=4, seed=12)
    C = 1.0
    res_g, grads_g = run_bk(m, tok, lab, C, plan=forced_plan(m, GHOST, C))
    res_i, grads_i = run_bk(m, tok, lab, C, plan=forced_plan(m, INSTANTIATE, C))
    assert rel_err(res_g.norms.total, res_i.norms.total) < 1e-10
    assert set(grads_g) == set(grads_i)
    for name in grads_g:
        assert rel_err(grads_g[name], grads_i[name]) < 1e-10, name


def test_permutation_equivariance():
    m = make("full")
    perturb(m)
    tok, lab = batch(m.backbone, B=6, seed=13)
    res_a, grads_a = run_bk(m, tok, lab, C=1.0)
    perm = np.array([3, 0, 5, 1, 4, 2])
    res_b, grads_b = run_bk(m, tok[perm], lab[perm], C=1.0)
    assert np.allclose(res_b.norms.total, res_a.norms.total[perm], rtol=1e-12)
    assert np.allclose(res_b.factors, res_a.factors[perm], rtol=1e-12)
    for name in grads_a:
        assert rel_err(grads_b[name], grads_a[name]) < 1e-12, name


def test_clipping_bound_holds_per_example():
    m = make("full")
    perturb(m, scale=0.3)  # make norms spread out
    tok, lab = batch(m.backbone, B=6, seed=14)
    C = 0.05
    res, _ = run_bk(m, tok, lab, C)
    clipped = np.sqrt(res.norms.total) * res.factors
    assert np.all(clipped <= C * (1 + 1e-9))


def test_capture_twice_raises():
    ctx = ClipContext(ClipPlan(per_layer={"b": REDUCE}, clip_bound=1.0), batch_size=2)

    class P:
        shape = (3,)
        name = "b"

    g = np.ones((2, 3))
    ctx.capture_bias("b", P(), g)
    with pytest.raises(StateError):
        ctx.capture_bias("b", P(), g)
    ctx.release()


def test_apply_before_finalize_raises():
    ctx = ClipContext(ClipPlan(per_layer={}, clip_bound=1.0), batch_size=2)
    with pytest.raises(StateError):
        ctx.apply_clipped_sums(np.ones(2))


# ---------------------------------------------------------------------------
# memory shape, straight from the ledger
# ---------------------------------------------------------------------------


def test_ghost_path_never_materializes_per_sample_grads():
    m = OneLayerModel(d=24, p=24, T=4, vocab=11)  # 2T² = 32 ≤ 576
    B = 6
    tok, lab = batch(m.backbone, B=B, seed=15)
    plan = build_clip_plan(m, 4, 1.0)
    assert plan.strategy("proj.w") == GHOST
    led = MemoryLedger(record_events=True)
    with E.use_ledger(led):
        bk_clip_step(m, tok, lab, plan)
        m.zero_grad()
    itemsize = 8
    bpd = B * 24 * 24 * itemsize
    dp_allocs = [e.nbytes for e in led.events if e.category == "dp_buffers" and e.direction == "alloc"]
    assert dp_allocs, "ghost path should still allocate Gram and norm buffers"
    assert max(dp_allocs) < bpd, "ghost path materialized a per-sample grad buffer"
    # the Gram pair is the dominant dp allocation: B·T² each
    assert max(dp_allocs) <= 2 * B * 4 * 4 * itemsize


def test_instantiate_path_allocates_per_sample_grads():
    m = OneLayerModel(d=4, p=4, T=24, vocab=11)  # 2T² = 1152 > 16
    B = 6
    tok, lab = batch(m.backbone, B=B, seed=16)
    plan = build_clip_plan(m, 24, 1.0)
    assert plan.strategy("proj.w") == INSTANTIATE
    led = MemoryLedger(record_events=True)
    with E.use_ledger(led):
        bk_clip_step(m, tok, lab, plan)
        m.zero_grad()
    bpd = B * 4 * 4 * 8
    dp_allocs = [e.nbytes for e in led.events if e.category == "dp_buffers" and e.direction == "alloc"]
    assert bpd in dp_allocs, "no [B, d, p] per-sample buffer was allocated"
    assert led.peak_by_category["dp_buffers"] >= bpd
