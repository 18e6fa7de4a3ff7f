import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moedisco import checkpoint
from moedisco import tensor as T
from moedisco.errors import AssemblyError, ConfigError, DomainError, SchemaError
from moedisco.merge import (MergeWeights, SubmodelCheckpoint, assemble, concat_experts, init_gating,
                            merge_checkpoints, merge_report, merge_shared, wp_weights)
from moedisco.model import MoEConfig, ParamStore, all_shapes, extract_submodel

from oracles import scalar_weighted_sum

CFG = dict(vocab_size=9, d_model=8, n_layers=2, n_heads=2, d_ff=6, max_seq_len=8)


def cfg_for(e, k=1):
    return MoEConfig(**CFG, num_experts=e, top_k=k)


def trained_like(cfg, seed, n_k=10):
    """E checkpoints whose shared params have drifted apart, as after independent training."""
    rng = np.random.default_rng(seed)
    base = ParamStore(cfg, {p: rng.standard_normal(s) * 0.3 for p, s in all_shapes(cfg).items()})
    out = []
    for k in range(cfg.num_experts):
        sub = extract_submodel(base, k)
        shared = {p: t.data + 0.1 * rng.standard_normal(t.shape) for p, t in sub.shared.items()}
        expert = {p: t.data.copy() for p, t in sub.expert.items()}
        n = n_k if np.isscalar(n_k) else n_k[k]
        out.append(SubmodelCheckpoint(k, shared, expert, n, seed=seed, steps=5))
    return base, out


# -- weights -----------------------------------------------------------------------

def test_balanced_weights_are_uniform():
    assert wp_weights([100] * 4).gammas == (0.25, 0.25, 0.25, 0.25)
    for e in range(1, 9):
        assert all(g == 1.0 / e for g in wp_weights([7] * e))


def test_weights_are_ratios():
    assert wp_weights([300, 100]).gammas == (0.75, 0.25)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 10**6), min_size=1, max_size=12))
def test_weights_sum_to_one(counts):
    g = wp_weights(counts)
    assert abs(sum(g) - 1.0) <= 1e-12
    assert np.allclose(g.gammas, np.array(counts) / sum(counts), rtol=1e-12, atol=1e-15)


def test_weight_errors():
    with pytest.raises(DomainError):
        wp_weights([3, 0])
    with pytest.raises(DomainError):
        MergeWeights((0.5, 0.6))
    with pytest.raises(DomainError):
        MergeWeights((1.5, -0.5))


# -- shared average ----------------------------------------------------------------

def test_identical_inputs_come_back_unchanged():
    cfg = cfg_for(3)
    _, ck = trained_like(cfg, 0)
    for c in ck[1:]:
        c.shared = {p: a.copy() for p, a in ck[0].shared.items()}
    merged = merge_shared(ck, wp_weights([1, 2, 4]))
    for p, a in merged.items():
        assert np.array_equal(a, ck[0].shared[p])


def test_midpoint():
    a = SubmodelCheckpoint(0, {"shared/x": np.zeros(3)}, {}, 1)
    b = SubmodelCheckpoint(1, {"shared/x": np.full(3, 2.0)}, {}, 1)
    assert np.array_equal(merge_shared([a, b], MergeWeights((0.5, 0.5)))["shared/x"], np.ones(3))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matches_scalar_oracle_and_stays_convex(e, seed):
    cfg = cfg_for(e)
    _, ck = trained_like(cfg, seed)
    raw = np.random.default_rng(seed).random(e) + 0.01
    w = wp_weights((raw * 1000).astype(int) + 1)
    merged = merge_shared(ck, w)
    for p in ["shared/head", "shared/layer/1/attn.wk", "shared/lnf.b"]:
        inputs = [c.shared[p] for c in ck]
        assert np.abs(merged[p] - scalar_weighted_sum(inputs, list(w))).max() <= 1e-12
        stack = np.stack(inputs)
        assert (merged[p] >= stack.min(axis=0) - 1e-15).all() and (merged[p] <= stack.max(axis=0) + 1e-15).all()


def test_permuting_checkpoints_with_weights():
    cfg = cfg_for(3)
    _, ck = trained_like(cfg, 4)
    w = wp_weights([5, 9, 2])
    order = [2, 0, 1]
    a = merge_shared(ck, w)
    b = merge_shared([ck[i] for i in order], MergeWeights(tuple(w.gammas[i] for i in order)))
    for p in a:
        assert np.allclose(a[p], b[p], rtol=0, atol=1e-14)


def test_structural_mismatch_names_path():
    cfg = cfg_for(2)
    _, ck = trained_like(cfg, 1)
    del ck[1].shared["shared/lnf.g"]
    with pytest.raises(SchemaError, match="shared/lnf.g"):
        merge_shared(ck, wp_weights([1, 1]))
    _, ck = trained_like(cfg, 1)
    ck[1].shared["shared/head"] = np.zeros((2, 2))
    with pytest.raises(SchemaError, match="shared/head"):
        merge_shared(ck, wp_weights([1, 1]))
    with pytest.raises(SchemaError):
        merge_shared(ck, wp_weights([1, 1, 1]))


def test_merge_keeps_float32():
    a = SubmodelCheckpoint(0, {"shared/x": np.ones(2, np.float32)}, {}, 1)
    b = SubmodelCheckpoint(1, {"shared/x": np.zeros(2, np.float32)}, {}, 3)
    assert merge_shared([a, b], wp_weights([1, 3]))["shared/x"].dtype == np.float32


# -- experts -----------------------------------------------------------------------

def test_concat_preserves_and_ignores_order():
    cfg = cfg_for(4)
    base, ck = trained_like(cfg, 2)
    a = concat_experts(ck)
    b = concat_experts(list(reversed(ck)))
    assert list(a) == list(b)
    for p, arr in a.items():
        assert arr is b[p]
        assert np.array_equal(arr, base.params[p].data)


@pytest.mark.parametrize("indices", [[0, 0], [0, 2], [1, 2]])
def test_concat_index_errors(indices):
    cfg = cfg_for(2)
    _, ck = trained_like(cfg, 0)
    for c, i in zip(ck, indices):
        c.expert_index = i
    with pytest.raises(AssemblyError):
        concat_experts(ck)


def test_concat_rejects_foreign_paths():
    cfg = cfg_for(2)
    _, ck = trained_like(cfg, 0)
    ck[0].expert, ck[1].expert = ck[1].expert, ck[0].expert
    with pytest.raises(AssemblyError):
        concat_experts(ck)


# -- gate --------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["column-concat-random", "centroid"])
def test_gate_shapes(mode):
    cfg = cfg_for(3)
    cent = np.random.default_rng(0).standard_normal((3, 8))
    gates = init_gating(cfg, mode, seed=1, centroids=cent)
    assert sorted(gates) == ["gate/0", "gate/1"]
    assert all(g.shape == (8, 3) for g in gates.values())


def test_random_gate_is_reproducible_and_columnwise():
    cfg3, cfg4 = cfg_for(3), cfg_for(4)
    a = init_gating(cfg3, seed=5)
    b = init_gating(cfg3, seed=5)
    c = init_gating(cfg4, seed=5)
    for p in a:
        assert a[p].tobytes() == b[p].tobytes()
        assert np.array_equal(c[p][:, :3], a[p])  # each column depends only on (seed, layer, k)
    assert not np.array_equal(init_gating(cfg3, seed=6)["gate/0"], a["gate/0"])


def test_centroid_gate_routes_to_its_cluster():
    cfg = cfg_for(4)
    q = np.linalg.qr(np.random.default_rng(3).standard_normal((8, 4)))[0].T * np.array([1.0, 3.0, 0.5, 2.0])[:, None]
    gates = init_gating(cfg, "centroid", centroids=q)
    for k in range(4):
        for g in gates.values():
            _, idx = T.topk_gate(T.Tensor(q[k:k + 1] @ g), 1)
            assert idx[0, 0] == k


def test_gate_mode_errors():
    cfg = cfg_for(2)
    with pytest.raises(ConfigError):
        init_gating(cfg, "centroid")
    with pytest.raises(ConfigError):
        init_gating(cfg, "centroid", centroids=np.ones((3, 8)))
    with pytest.raises(ConfigError):
        init_gating(cfg, "learned")


# -- assembly ----------------------------------------------------------------------

def test_reassembly_identity():
    cfg = cfg_for(3, 2)
    base, _ = trained_like(cfg, 6)
    subs = [extract_submodel(base, k) for k in range(3)]
    ck = [SubmodelCheckpoint(k, {p: t.data for p, t in s.shared.items()}, {p: t.data for p, t in s.expert.items()}, 5)
          for k, s in enumerate(subs)]
    store = assemble(cfg, merge_shared(ck, wp_weights([5] * 3)), concat_experts(ck),
                     {p: t.data for p, t in base.gates.items()})
    x = np.random.default_rng(0).integers(0, 9, (2, 8))
    assert np.array_equal(store.forward(x).data, base.forward(x).data)


def test_merged_forced_routing_reproduces_submodel():
    cfg = cfg_for(4, 2)
    _, ck = trained_like(cfg, 7, n_k=[3, 5, 8, 13])
    store, w, _ = merge_checkpoints(cfg, ck)
    x = np.random.default_rng(1).integers(0, 9, 8)
    for c in ck:
        for p in c.expert:
            assert np.array_equal(store.params[p].data, c.expert[p])
        # a submodel that already carries the merged backbone
        probe = SubmodelCheckpoint(c.expert_index, {p: store.params[p].data for p in c.shared}, c.expert, c.n_k)
        sub_store = assemble(cfg, probe.shared, concat_experts(ck), {p: t.data for p, t in store.gates.items()})
        assert np.array_equal(extract_submodel(sub_store, c.expert_index).forward(x).data,
                              store.forward(x, force_expert=c.expert_index).data)
    assert w.gammas == pytest.approx((3 / 29, 5 / 29, 8 / 29, 13 / 29))


def test_single_expert_assembly():
    cfg = cfg_for(1)
    _, (c,) = trained_like(cfg, 8)
    store, w, shared = merge_checkpoints(cfg, [c])
    assert w.gammas == (1.0,)
    for p, a in {**c.shared, **c.expert}.items():
        assert np.array_equal(store.params[p].data, a)
    assert sorted(store.gates) == ["gate/0", "gate/1"]


def test_assemble_missing_path():
    cfg = cfg_for(2)
    _, ck = trained_like(cfg, 0)
    shared = merge_shared(ck, wp_weights([1, 1]))
    del shared["shared/pos_emb"]
    with pytest.raises(SchemaError, match="pos_emb"):
        assemble(cfg, shared, concat_experts(ck), init_gating(cfg))


def test_assembled_store_roundtrips_through_file(tmp_path):
    cfg = cfg_for(2, 2)
    _, ck = trained_like(cfg, 9)
    store, _, _ = merge_checkpoints(cfg, ck)
    checkpoint.save(tmp_path / "m.ckpt", store.arrays())
    back, _ = checkpoint.load(tmp_path / "m.ckpt")
    assert back.keys() == store.arrays().keys()
    for p, a in store.arrays().items():
        assert back[p].tobytes() == a.tobytes()


def test_submodel_checkpoint_file_roundtrip(tmp_path):
    cfg = cfg_for(2)
    _, ck = trained_like(cfg, 3)
    ck[1].extra["note"] = "x"
    ck[1].save(tmp_path / "s.ckpt")
    back = SubmodelCheckpoint.load(tmp_path / "s.ckpt", wall_time_s=1.5)
    assert (back.expert_index, back.n_k, back.seed, back.steps, back.wall_time_s) == (1, 10, 3, 5, 1.5)
    assert back.extra == {"note": "x"} and back.shard_id == 1
    for p, a in {**ck[1].shared, **ck[1].expert}.items():
        assert np.array_equal(a, {**back.shared, **back.expert}[p])
    with pytest.raises(DomainError):
        SubmodelCheckpoint(0, {}, {}, 0)


def test_merge_report_lists_weights(tmp_path):
    cfg = cfg_for(2)
    _, ck = trained_like(cfg, 0, n_k=[1, 3])
    w = wp_weights([1, 3])
    merge_report(tmp_path / "r.csv", w, ck, merge_shared(ck, w))
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[1] == "expert,n_k,gamma" and lines[2] == "0,1,0.25" and lines[3] == "1,3,0.75"
    assert any(ln.startswith("shared/head,") for ln in lines)
