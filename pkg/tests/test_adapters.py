import numpy as np
import pytest

from tenslora import autograd as ag
from tenslora.adapters import (
    TENSOR_VARIANTS,
    VARIANTS,
    VIT_BASE,
    ModelDims,
    apply,
    delta,
    delta_graph,
    init_adapter,
    merge,
    mode_labels,
    param_count,
    parse_variant,
    tensor_catalog,
    validate_ranks,
)
from tenslora.adapters import delta_full
from tenslora.planner import plan_isorank
from tenslora.tensor import hosvd, tucker_reconstruct

TINY = ModelDims(d=8, h=2, L=3)


def iso(variant, dims, r):
    return plan_isorank(variant, dims, r).ranks


def enumerate_scalars(adapter):
    """Count trainable scalars one by one through the public tensor views."""
    n = 0
    for t in adapter.tensors:
        arrays = t if isinstance(t, tuple) else [t.core, *t.factors]
        for a in arrays:
            for _ in np.nditer(a):
                n += 1
    return n


# ---------------------------------------------------------------- dims & catalog


def test_model_dims():
    assert VIT_BASE.d_h == 64
    with pytest.raises(ValueError):
        ModelDims(10, 3, 2)
    with pytest.raises(ValueError):
        ModelDims(8, 2, 2, n=4)


def test_parse_variant():
    assert parse_variant("att_qkv_depth") == "Att_QKV_Depth"
    assert parse_variant("QKV-Depth") == "QKV_Depth"
    with pytest.raises(ValueError):
        parse_variant("mlp")


def test_catalog_qkv_depth_vit():
    (e,) = tensor_catalog("QKV_Depth", VIT_BASE)
    assert e.shape == (768, 768, 3, 12) and e.multiplicity == 1


def test_catalog_att_vit():
    (e,) = tensor_catalog("Att", VIT_BASE)
    assert e.shape == (768, 64, 12) and e.multiplicity == 36


def test_catalog_lora():
    (e,) = tensor_catalog("LoRA", ModelDims(16, 4, 5))
    assert e.multiplicity == 15


@pytest.mark.parametrize(
    "variant, shape, mult",
    [
        ("Att", (768, 64, 12), 36),
        ("QKV", (768, 768, 3), 12),
        ("Depth", (768, 768, 12), 3),
        ("Att_QKV", (768, 64, 12, 3), 12),
        ("Att_Depth", (768, 64, 12, 12), 3),
        ("QKV_Depth", (768, 768, 3, 12), 1),
        ("Att_QKV_Depth", (768, 64, 12, 3, 12), 1),
        ("LoRA", (768, 768), 36),
    ],
)
def test_catalog_full(variant, shape, mult):
    (e,) = tensor_catalog(variant, VIT_BASE)
    assert (e.shape, e.multiplicity) == (shape, mult)
    assert len(e.labels) == len(shape)


def test_validate_ranks():
    with pytest.raises(ValueError):
        validate_ranks("QKV", {"d_in": 2, "d_out": 2})
    with pytest.raises(ValueError):
        validate_ranks("QKV", {"d_in": 2, "d_out": 2, "qkv": 2, "h": 1})
    with pytest.raises(ValueError):
        validate_ranks("LoRA", {"r": 0})


# ---------------------------------------------------------------- init


@pytest.mark.parametrize("variant", VARIANTS)
def test_init_delta_is_zero(variant):
    ad = init_adapter(variant, TINY, iso(variant, TINY, 3), seed=5)
    assert len(ad.tensors) == tensor_catalog(variant, TINY)[0].multiplicity
    for p, l in ad.slots():
        d = delta(ad, p, l)
        assert d.shape == (8, 8) and np.max(np.abs(d)) == 0.0


@pytest.mark.parametrize("variant", VARIANTS)
def test_init_deterministic(variant):
    a = init_adapter(variant, TINY, iso(variant, TINY, 2), seed=11)
    b = init_adapter(variant, TINY, iso(variant, TINY, 2), seed=11)
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_init_factors_orthonormal():
    ad = init_adapter("Att_QKV", TINY, iso("Att_QKV", TINY, 3), seed=0)
    for t in ad.tensors:
        for u in t.factors:
            if u.shape[0] >= u.shape[1]:
                np.testing.assert_allclose(u.T @ u, np.eye(u.shape[1]), atol=1e-12)
            else:
                np.testing.assert_allclose(u @ u.T, np.eye(u.shape[0]), atol=1e-12)


def test_lora_init_is_identity_update():
    ad = init_adapter("LoRA", TINY, {"r": 2})
    w0 = {(p, l): np.random.default_rng(p * 10 + l).standard_normal((8, 8)) for p, l in ad.slots()}
    out = apply(ad, w0)
    for k in w0:
        assert np.array_equal(out[k], w0[k])
    A = ad.params["A.0.0"]
    np.testing.assert_allclose(A.T @ A, np.eye(2), atol=1e-12)


def test_init_rejects_bad_ranks():
    with pytest.raises(ValueError):
        init_adapter("QKV", TINY, {"d_in": 2})


# ---------------------------------------------------------------- delta


def test_qkv_delta_is_slice_of_known_tensor():
    ad = init_adapter("QKV", TINY, {"d_in": 8, "d_out": 8, "qkv": 3})
    T = np.random.default_rng(0).standard_normal((8, 8, 3))
    f = hosvd(T)
    ad.params["t1.core"][...] = f.core
    for m in range(3):
        ad.params[f"t1.u{m}"][...] = f.factors[m]
    np.testing.assert_allclose(delta(ad, "K", 1), T[:, :, 1], atol=1e-12)
    np.testing.assert_allclose(delta(ad, 2, 1), T[:, :, 2], atol=1e-12)
    assert not delta(ad, "K", 0).any()


def test_att_single_entry_placement():
    d, h = 8, 2
    dims = ModelDims(d, h, 3)
    dh = d // h
    ad = init_adapter("Att", dims, {"d_in": d, "d_h": dh, "h": h})
    p, l = 1, 2
    tid, fixed = ad.slot(p, l)
    assert fixed == {}
    for m, n in enumerate((d, dh, h)):
        ad.params[f"t{tid}.u{m}"][...] = np.eye(n)
    i, j, head = 5, 3, 1
    ad.params[f"t{tid}.core"][i, j, head] = 2.5
    dw = delta(ad, p, l)
    nz = np.argwhere(dw)
    assert nz.tolist() == [[i, head * dh + j]]
    assert dw[i, head * dh + j] == 2.5


@pytest.mark.parametrize("variant", VARIANTS)
def test_delta_slice_equals_full_reconstruction(variant):
    ad = init_adapter(variant, TINY, iso(variant, TINY, 3), seed=1).randomized(1.0, seed=2)
    for p, l in ad.slots():
        assert np.max(np.abs(delta(ad, p, l) - delta_full(ad, p, l))) < 1e-12


@pytest.mark.parametrize("variant", [v for v in TENSOR_VARIANTS if "Att" in v])
def test_head_reassembly(variant):
    ad = init_adapter(variant, TINY, iso(variant, TINY, 2), seed=3).randomized(1.0, seed=4)
    labels = mode_labels(variant)
    for p, l in ad.slots():
        tid, fixed = ad.slot(p, l)
        full = tucker_reconstruct(ad.tucker(tid))
        key = tuple(fixed.get(m, slice(None)) for m in range(len(labels)))
        s = full[key]  # (d, d_h, h)
        blocks = np.concatenate([s[:, :, j] for j in range(TINY.h)], axis=1)
        np.testing.assert_array_equal(blocks.shape, (8, 8))
        assert np.max(np.abs(blocks - delta(ad, p, l))) < 1e-12


@pytest.mark.parametrize("variant", VARIANTS)
def test_delta_graph_matches_numpy(variant):
    ad = init_adapter(variant, TINY, iso(variant, TINY, 2), seed=6).randomized(0.5, seed=7)
    leaves = {k: ag.constant(v) for k, v in ad.params.items()}
    graph = delta_graph(ad, leaves)
    assert set(graph) == set(ad.slots())
    for (p, l), node in graph.items():
        assert np.max(np.abs(node.value - delta(ad, p, l))) < 1e-12


def test_delta_index_errors():
    ad = init_adapter("QKV", TINY, iso("QKV", TINY, 2))
    with pytest.raises(IndexError):
        delta(ad, "Q", 3)
    with pytest.raises(ValueError):
        delta(ad, "O", 0)


def test_slot_table_covers_every_slot_once():
    for variant in VARIANTS:
        ad = init_adapter(variant, TINY, iso(variant, TINY, 1))
        seen = {(ad.slot(p, l)[0], tuple(sorted(ad.slot(p, l)[1].items()))) for p, l in ad.slots()}
        assert len(seen) == 3 * TINY.L


# ---------------------------------------------------------------- counting


def test_param_count_lora_vit():
    assert param_count("LoRA", VIT_BASE, {"r": 4}) == 221_184


def test_param_count_att_isorank_vit():
    assert param_count("Att", VIT_BASE, iso("Att", VIT_BASE, 4)) == 36 * (64 + 3072 + 256 + 48) == 123_840


def test_param_count_att_qkv_uncapped():
    assert param_count("Att_QKV", VIT_BASE, iso("Att_QKV", VIT_BASE, 4)) == 43_728


def test_param_count_qkv_depth_preset():
    ranks = {"d_in": 60, "d_out": 60, "qkv": 3, "depth": 12}
    assert param_count("QKV_Depth", VIT_BASE, ranks) == 60 * 60 * 3 * 12 + 2 * 768 * 60 + 9 + 144 == 221_913


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("r", [1, 2, 5, 9])
def test_param_count_matches_enumeration(variant, r):
    ad = init_adapter(variant, TINY, iso(variant, TINY, r))
    assert param_count(variant, TINY, ad.ranks) == enumerate_scalars(ad) == ad.num_parameters()


def test_param_count_heterogeneous_ranks():
    ranks = {"d_in": 5, "d_h": 2, "h": 1, "qkv": 3, "depth": 2}
    ad = init_adapter("Att_QKV_Depth", TINY, ranks)
    assert param_count("Att_QKV_Depth", TINY, ranks) == enumerate_scalars(ad)


# ---------------------------------------------------------------- apply / merge


class _Weights:
    """Minimal backbone exposing the merge interface."""

    def __init__(self, dims, seed=0):
        self.dims = dims
        rng = np.random.default_rng(seed)
        self.w = {(p, l): rng.standard_normal((dims.d, dims.d)) for p in range(3) for l in range(dims.L)}

    def projection(self, p, l):
        return self.w[(p, l)]

    def with_projections(self, mapping):
        new = _Weights(self.dims)
        new.w = {k: mapping.get(k, v).copy() for k, v in self.w.items()}
        return new


def test_apply_alpha_zero_is_identity():
    ad = init_adapter("Depth", TINY, iso("Depth", TINY, 2)).randomized(1.0)
    ad.alpha = 0.0
    w0 = _Weights(TINY).w
    out = apply(ad, w0)
    for k in w0:
        assert np.array_equal(out[k], w0[k])


def test_apply_default_alpha_four():
    ad = init_adapter("Att_Depth", TINY, iso("Att_Depth", TINY, 2)).randomized(1.0, seed=3)
    assert ad.alpha == 4.0
    w0 = _Weights(TINY).w
    out = apply(ad, w0)
    for (p, l), w in w0.items():
        assert np.max(np.abs(out[(p, l)] - (w + 4.0 * delta(ad, p, l)))) < 1e-12


def test_apply_shape_mismatch():
    ad = init_adapter("QKV", TINY, iso("QKV", TINY, 2))
    with pytest.raises(ValueError):
        apply(ad, {(0, 0): np.zeros((8, 7))})


def test_merge_fresh_adapter_unchanged():
    bb = _Weights(TINY)
    merged = merge(init_adapter("QKV_Depth", TINY, iso("QKV_Depth", TINY, 2)), bb)
    for k in bb.w:
        assert np.array_equal(merged.w[k], bb.w[k])


def test_merge_emptied_adapter_idempotent():
    bb = _Weights(TINY)
    ad = init_adapter("QKV_Depth", TINY, iso("QKV_Depth", TINY, 2)).randomized(1.0)
    once = merge(ad, bb)
    twice = merge(ad.zeroed(), once)
    for k in bb.w:
        assert np.array_equal(twice.w[k], once.w[k])
        assert not np.array_equal(once.w[k], bb.w[k])


def test_merge_dims_mismatch():
    with pytest.raises(ValueError):
        merge(init_adapter("QKV", TINY, iso("QKV", TINY, 2)), _Weights(ModelDims(8, 2, 2)))
