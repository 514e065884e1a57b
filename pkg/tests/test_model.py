import re

import numpy as np
import pytest

from gaitkit import tensor as tn
from gaitkit.features import PoseSequence, stack_branches
from gaitkit.model import (Block, BlockConfig, ConfigError, Linear, ModelConfig, Pointwise, GraphConv,
                           ResGCN, TemporalConv, activation_from_features, activation_map,
                           count_parameters, preset_config)
from gaitkit.skeleton import COCO17, spatial_partition
from gaitkit.synthetic import generate_synthetic, random_identity

from oracles import model_param_count

N21_PARAMS = 409_066
N51_PARAMS = 977_626

# every convolution bias is followed, directly or through the residual stream, by a
# training-mode BN whose batch mean cancels it, so its gradient is provably zero
CONV_BIAS = re.compile(r"(\.op|_res)\.bias$")


def _batch(rng, B=2, T=8, dtype=np.float64):
    return {"joints": rng.standard_normal((B, 5, T, 17)).astype(dtype),
            "velocity": rng.standard_normal((B, 4, T, 17)).astype(dtype),
            "bones": rng.standard_normal((B, 4, T, 17)).astype(dtype)}


@pytest.fixture(scope="module")
def small():
    return ResGCN(preset_config("n21-r8", width=0.25), seed=3, dtype=np.float64)


@pytest.mark.parametrize("T", [1, 5, 30])
def test_embedding_shape(small, rng, T):
    out = small(_batch(rng, 3, T), mode="eval")
    assert out.shape == (3, 128)


def test_identical_inputs_identical_embeddings(small, rng):
    b = _batch(rng, 1, 12)
    doubled = {k: np.concatenate([v, v]) for k, v in b.items()}
    out = small(doubled, mode="eval").data
    assert out[0].tobytes() == out[1].tobytes()


def test_eval_forward_is_pure(small, rng):
    b = _batch(rng, 2, 10)
    a = small(b, mode="eval").data
    assert a.tobytes() == small(b, mode="eval").data.tobytes()


def test_joint_permutation_with_conjugated_adjacency(rng):
    model = ResGCN(preset_config("n21-r8", width=0.25), seed=1, dtype=np.float64)
    b = _batch(rng, 2, 9)
    ref = model(b, mode="eval").data
    perm = rng.permutation(17)
    model.set_partition(spatial_partition(COCO17).permuted(perm))
    out = model({k: v[..., perm] for k, v in b.items()}, mode="eval").data
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_residual_identity_with_zero_inner_weights(rng):
    blk = Block(BlockConfig(16, 16, "bottleneck", 4), spatial_partition(COCO17), rng, dtype=np.float64)
    for m in blk.modules():
        if isinstance(m, (Pointwise, GraphConv, TemporalConv)):
            for p in m.parameters():
                p.data[:] = 0
    x = tn.Tensor(rng.standard_normal((2, 16, 7, 17)))
    blk.train()
    np.testing.assert_array_equal(blk(x).data, x.data)


@pytest.mark.parametrize("T", [8, 9, 30])
def test_temporal_stride_bookkeeping(small, rng, T):
    def out_len(t, k=9, s=2):
        return (t + 2 * ((k - 1) // 2) - k) // s + 1
    feat = small.features(_batch(rng, 1, T))
    assert feat.shape[2] == out_len(out_len(T))
    assert small.config.temporal_stride == 4


def test_every_parameter_receives_gradient(rng):
    model = ResGCN(preset_config("n21-r8", width=0.25), seed=2, dtype=np.float64)
    model.train()
    out = model(_batch(rng, 4, 8))
    tn.backward(tn.sum(out * out))
    dead = [p.name for p in model.parameters() if np.abs(p.grad).max() < 1e-10]
    assert [n for n in dead if not CONV_BIAS.search(n)] == []
    for p in model.parameters():
        if CONV_BIAS.search(p.name):
            assert np.abs(p.grad).max() < 1e-8


def test_parameter_names_unique(small):
    names = [n for n, _ in small.named_parameters()]
    assert len(names) == len(set(names))
    assert all(p.name == n for n, p in small.named_parameters())


def test_count_single_linear():
    assert count_parameters(Linear(96, 128, np.random.default_rng(0))) == 12_416


def _hand_schedule(r, main_repeats):
    stems = [[(c, 64, "basic", 1, 9, 1), (64, 64, "bottleneck", r, 9, 1), (64, 32, "bottleneck", r, 9, 1)]
             for c in (5, 4, 4)]
    main = [(96, 128, "bottleneck", r, 9, 2)] + [(128, 128, "bottleneck", r, 9, 1)] * main_repeats[0]
    main += [(128, 256, "bottleneck", r, 9, 2)] + [(256, 256, "bottleneck", r, 9, 1)] * main_repeats[1]
    return stems, main


def test_counts_match_hand_formula():
    assert count_parameters(preset_config("n21-r8")) == model_param_count(*_hand_schedule(8, (1, 1)))
    assert count_parameters(preset_config("n51-r4")) == model_param_count(*_hand_schedule(4, (2, 4)))


def test_preset_budgets():
    n21 = count_parameters(preset_config("n21-r8"))
    n51 = count_parameters(preset_config("n51-r4"))
    assert n21 == N21_PARAMS and abs(n21 - 350_000) <= 0.3 * 350_000
    assert n51 == N51_PARAMS and abs(n51 - 765_000) <= 0.3 * 765_000
    assert n21 < n51


def test_config_json_roundtrip():
    cfg = preset_config("n51-r4", width=0.5, branches=("joints", "bones"))
    back = ModelConfig.from_json(cfg.to_json())
    assert back.to_json() == cfg.to_json()
    assert count_parameters(back) == count_parameters(cfg)


def test_state_dict_roundtrip(rng):
    a = ResGCN(preset_config("n21-r8", width=0.25), seed=0)
    b = ResGCN(preset_config("n21-r8", width=0.25), seed=9)
    a.train()
    a(_batch(rng, 2, 6, np.float32))
    b.load_state_dict(a.state_dict())
    x = _batch(rng, 2, 6, np.float32)
    assert a(x, mode="eval").data.tobytes() == b(x, mode="eval").data.tobytes()


@pytest.mark.parametrize("bad", [
    lambda b: {k: v for k, v in b.items() if k != "bones"},
    lambda b: {**b, "joints": b["joints"][:, :4]},
    lambda b: {**b, "velocity": b["velocity"][..., :16]},
    lambda b: [b["joints"]],
])
def test_input_errors(small, rng, bad):
    with pytest.raises(ConfigError):
        small(bad(_batch(rng)), mode="eval")


def test_config_errors():
    with pytest.raises(ConfigError):
        preset_config("n99")
    with pytest.raises(ConfigError):
        BlockConfig(16, 30, "bottleneck", 8)
    with pytest.raises(ConfigError):
        BlockConfig(16, 32, residual="identity")
    with pytest.raises(ConfigError):
        BlockConfig(16, 16, kernel=4)
    with pytest.raises(ConfigError):
        ModelConfig(branches={"joints": [BlockConfig(4, 8, "basic")]}, main=[])


def test_single_branch_model(rng):
    model = ResGCN(preset_config("n21-r8", width=0.25, branches=("joints",)), dtype=np.float64)
    out = model({"joints": _batch(rng)["joints"]}, mode="eval")
    assert out.shape == (2, 128)


# ----------------------------------------------------------------- activation maps

def test_activation_constant_features_give_zero():
    out = activation_from_features(np.ones((4, 3, 17)), 12)
    assert out.shape == (12, 17) and not out.any()


def test_activation_nearest_upsampling():
    feat = np.zeros((1, 2, 3))
    feat[0, 1] = [1, 2, 3]
    out = activation_from_features(feat, 4)
    np.testing.assert_allclose(out[:2], 0)
    np.testing.assert_allclose(out[2:], [[1 / 3, 2 / 3, 1]] * 2)


def test_activation_map_shape_and_flag(rng):
    seq = generate_synthetic(random_identity(rng), 21, 90.0, rng)
    model = ResGCN(preset_config("n21-r8", width=0.25))
    amap = activation_map(seq, model)
    assert amap.values.shape == (21, 17)
    assert amap.values.min() >= 0 and amap.values.max() <= 1
    assert amap.meta["trained"] is False and "warning" in amap.meta


def test_stack_branches_feeds_model(rng):
    seqs = [generate_synthetic(random_identity(rng), 10, 54.0, rng) for _ in range(2)]
    model = ResGCN(preset_config("n21-r8", width=0.25))
    assert model(stack_branches(seqs, COCO17), mode="eval").shape == (2, 128)


def test_pose_sequence_used_directly_is_rejected(small):
    with pytest.raises(ConfigError):
        small([PoseSequence(np.ones((3, 17, 3)))] * 3, mode="eval")
