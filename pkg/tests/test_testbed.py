import math

import numpy as np
import pytest

from tenslora import autograd as ag
from tenslora.adapters import VARIANTS, ModelDims, init_adapter, merge
from tenslora.planner import plan_isorank
from tenslora.testbed import (
    AdamW,
    BackboneConfig,
    Dataset,
    SyntheticTask,
    TrainConfig,
    evaluate,
    forward,
    init_backbone,
    loss_graph,
    lr_at,
    majority_label,
    make_task,
    pairwise_label,
    train_adapter,
)

SMALL = BackboneConfig(ModelDims(16, 2, 2), vocab=8, seq_len=6, seed=0)


def small_adapter(variant="QKV_Depth", r=2, seed=0):
    return init_adapter(variant, SMALL.dims, plan_isorank(variant, SMALL.dims, r).ranks, seed=seed)


def small_task(count=64, seed=1, generator="majority-token"):
    return make_task(SyntheticTask(generator, {"vocab": SMALL.vocab, "seq_len": SMALL.seq_len}, seed), count)


# ---------------------------------------------------------------- schedule


def test_lr_endpoints_default_warmup():
    cfg = TrainConfig(total_steps=500)
    assert cfg.warmup_steps == 50
    assert lr_at(0, cfg) == 0.0
    assert lr_at(50, cfg) == 1e-3
    assert lr_at(500, cfg) == 1e-6


def test_lr_warmup_linear_and_cosine_monotone():
    cfg = TrainConfig(total_steps=200, warmup_steps=20)
    warm = [lr_at(s, cfg) for s in range(21)]
    np.testing.assert_allclose(np.diff(warm), 1e-3 / 20, rtol=1e-12)
    decay = [lr_at(s, cfg) for s in range(20, 201)]
    assert all(b <= a for a, b in zip(decay, decay[1:]))
    mid = lr_at(110, cfg)
    assert math.isclose(mid, 1e-6 + 0.5 * (1e-3 - 1e-6), rel_tol=1e-12)


def test_lr_no_warmup():
    cfg = TrainConfig(total_steps=10, warmup_steps=0)
    assert lr_at(0, cfg) == 1e-3 and lr_at(10, cfg) == 1e-6


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(peak_lr=1e-6, min_lr=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(total_steps=10, warmup_steps=10)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)


# ---------------------------------------------------------------- tasks


def test_majority_all_a():
    assert majority_label(np.zeros(16, dtype=int)) == 1
    assert majority_label([1, 1, 0, 5]) == 0


def test_pairwise_label():
    assert pairwise_label([3, 1, 3], 0, 2) == 1
    assert pairwise_label([3, 1, 4], 0, 2) == 0


@pytest.mark.parametrize("generator", ["majority-token", "pairwise-match"])
def test_task_balance_and_labels(generator):
    data = make_task(SyntheticTask(generator, {"vocab": 8, "seq_len": 16}, 3), 10_000)
    assert abs(data.labels.mean() - 0.5) < 0.05
    fn = (lambda s: majority_label(s)) if generator == "majority-token" else (lambda s: pairwise_label(s, 0, 15))
    assert all(fn(s) == y for s, y in zip(data.tokens[:500], data.labels[:500]))
    assert data.tokens.min() >= 0 and data.tokens.max() < 8


def test_majority_never_ties():
    data = make_task(SyntheticTask("majority-token", {"vocab": 5, "seq_len": 8}, 0), 2000)
    assert np.all((data.tokens == 0).sum(1) != (data.tokens == 1).sum(1))


def test_majority_vocab_two():
    data = make_task(SyntheticTask("majority-token", {"vocab": 2, "seq_len": 5}, 0), 200)
    assert set(np.unique(data.tokens)) <= {0, 1}


def test_task_deterministic():
    t = SyntheticTask("pairwise-match", {"vocab": 6, "seq_len": 5, "i": 1, "j": 3}, 9)
    a, b = make_task(t, 100), make_task(t, 100)
    assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.labels, b.labels)


@pytest.mark.parametrize(
    "generator, params",
    [
        ("sorting", {"vocab": 4, "seq_len": 4}),
        ("majority-token", {"vocab": 1, "seq_len": 4}),
        ("majority-token", {"vocab": 4, "seq_len": 4, "a": 2, "b": 2}),
        ("pairwise-match", {"vocab": 4, "seq_len": 4, "i": 0, "j": 4}),
        ("pairwise-match", {"vocab": 4, "seq_len": 4, "k": 1}),
    ],
)
def test_task_rejects_bad_params(generator, params):
    with pytest.raises(ValueError):
        make_task(SyntheticTask(generator, params), 4)


# ---------------------------------------------------------------- forward


def test_forward_shape_and_token_checks():
    bb = init_backbone(SMALL)
    out = forward(bb, None, np.zeros((3, 6), dtype=int))
    assert out.shape == (3, 2) and np.all(np.isfinite(out))
    with pytest.raises(ValueError):
        forward(bb, None, np.zeros((3, 5), dtype=int))
    with pytest.raises(ValueError):
        forward(bb, None, np.full((1, 6), 8))
    with pytest.raises(TypeError):
        forward(bb, None, np.zeros((1, 6)))


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_init_adapter_leaves_logits_unchanged(variant):
    bb = init_backbone(SMALL)
    tokens = small_task(16).tokens
    assert np.array_equal(forward(bb, small_adapter(variant), tokens), forward(bb, None, tokens))


def test_batch_permutation_equivariance():
    bb = init_backbone(SMALL)
    ad = small_adapter().randomized(0.3, seed=1)
    tokens = small_task(12).tokens
    perm = np.random.default_rng(0).permutation(12)
    np.testing.assert_allclose(forward(bb, ad, tokens)[perm], forward(bb, ad, tokens[perm]), atol=1e-12)


def test_adapter_changes_output_and_matches_merge():
    bb = init_backbone(SMALL)
    ad = small_adapter("Att_QKV_Depth").randomized(0.3, seed=2)
    tokens = small_task(8).tokens
    dyn = forward(bb, ad, tokens)
    assert not np.allclose(dyn, forward(bb, None, tokens))
    assert np.max(np.abs(dyn - forward(merge(ad, bb), None, tokens))) < 1e-9


def test_adapter_dims_mismatch():
    bb = init_backbone(SMALL)
    ad = init_adapter("QKV", ModelDims(16, 2, 3), plan_isorank("QKV", ModelDims(16, 2, 3), 2).ranks)
    with pytest.raises(ValueError):
        forward(bb, ad, np.zeros((1, 6), dtype=int))


def test_evaluate_untrained_near_chance():
    bb = init_backbone(SMALL)
    acc = evaluate(bb, None, small_task(2000))
    assert 0.4 <= acc <= 0.6


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(init_backbone(SMALL), None, Dataset(np.zeros((0, 6), dtype=int), np.zeros(0, dtype=int)))


def test_checksum_tracks_frozen_weights_only():
    bb = init_backbone(SMALL)
    c = bb.checksum()
    other = bb.with_head({"head.w": np.zeros((16, 2)), "head.b": np.ones(2)})
    assert other.checksum() == c and other.checksum(frozen_only=False) != bb.checksum(frozen_only=False)
    moved = bb.copy()
    moved.weights["layer0.wq"][0, 0] += 1e-12
    assert moved.checksum() != c


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("variant", VARIANTS)
def test_end_to_end_gradients(variant):
    bb = init_backbone(SMALL)
    ad = small_adapter(variant, r=2).randomized(0.1, seed=3)
    data = small_task(4)
    names = sorted(ad.params) + ["head.w"]
    values = [ad.params[n] for n in names[:-1]] + [bb.weights["head.w"]]

    def f(vs):
        return loss_graph(bb, ad, data.tokens, data.labels, dict(zip(names, vs)))

    assert ag.finite_diff_check(f, values, h=1e-5, max_coords=40) < 1e-5


# ---------------------------------------------------------------- optimiser & training


def test_adamw_first_step():
    p = {"w": np.array([1.0, -2.0])}
    opt = AdamW(p, weight_decay=0.0)
    opt.step({"w": np.array([0.5, -0.1])}, lr=0.1)
    # bias-corrected first step moves each coordinate by ~lr against the gradient sign
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-6)


def test_adamw_decoupled_decay():
    p = {"w": np.array([2.0])}
    AdamW(p, weight_decay=0.5).step({"w": np.zeros(1)}, lr=0.1)
    np.testing.assert_allclose(p["w"], [1.9])


def test_training_keeps_backbone_frozen_and_is_deterministic():
    bb = init_backbone(SMALL)
    before = {k: v.copy() for k, v in bb.weights.items()}
    cfg = TrainConfig(total_steps=20, batch=16)
    data = small_task(64)
    r1 = train_adapter(bb, small_adapter(), data, cfg)
    r2 = train_adapter(bb, small_adapter(), data, cfg)
    for k, v in before.items():
        assert np.array_equal(bb.weights[k], v)
    assert r1.backbone.checksum() == bb.checksum()
    assert r1.log == r2.log
    for k in r1.adapter.params:
        assert np.array_equal(r1.adapter.params[k], r2.adapter.params[k])
    assert [row["lr"] for row in r1.log] == [lr_at(s, cfg) for s in range(1, 21)]


def test_training_does_not_mutate_input_adapter():
    ad = small_adapter()
    snap = {k: v.copy() for k, v in ad.params.items()}
    train_adapter(init_backbone(SMALL), ad, small_task(32), TrainConfig(total_steps=5, batch=8))
    assert all(np.array_equal(ad.params[k], snap[k]) for k in snap)


def test_training_reduces_loss():
    res = train_adapter(init_backbone(SMALL), small_adapter(), small_task(256), TrainConfig(total_steps=120, batch=32))
    first = np.mean([r["loss"] for r in res.log[:10]])
    last = np.mean([r["loss"] for r in res.log[-10:]])
    assert last < first


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_nonfinite_loss_raises():
    bb = init_backbone(SMALL)
    bb.weights["head.w"][:] = np.inf
    with pytest.raises(FloatingPointError):
        train_adapter(bb, None, small_task(16), TrainConfig(total_steps=3, batch=4))


@pytest.mark.slow
def test_adapter_beats_head_only():
    cfg_bb = BackboneConfig(ModelDims(32, 4, 3), vocab=32, seq_len=16)
    bb = init_backbone(cfg_bb)
    task = SyntheticTask("majority-token", {"vocab": 32, "seq_len": 16}, 1)
    data = make_task(task, 2048)
    cfg = TrainConfig(total_steps=500, batch=64)
    ad = init_adapter("QKV_Depth", cfg_bb.dims, plan_isorank("QKV_Depth", cfg_bb.dims, 4).ranks)
    with_adapter = train_adapter(bb, ad, data, cfg)
    head_only = train_adapter(bb, None, data, cfg)
    acc_ad = evaluate(with_adapter.backbone, with_adapter.adapter, data)
    acc_head = evaluate(head_only.backbone, None, data)
    assert acc_ad >= 0.95
    assert acc_ad - acc_head > 0.03
