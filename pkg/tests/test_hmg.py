import numpy as np
import pytest

from dpm import encoder, hmg
from dpm.config import ConfigError, EncoderConfig, MaskGeneratorConfig
from dpm.numeric import FreezeGroup, ParamStore, ShapeError, Tensor, grad_check_many, ops, precision

ENC = EncoderConfig(image_h=12, image_w=8, patch=4, stride=4, dim=6, depth=4, heads=2, mlp_ratio=2, cameras=2)


def fake_state(feats):
    return encoder.EncoderState([Tensor(f) for f in feats], [Tensor(np.zeros((f.shape[0], f.shape[2]))) for f in feats],
                                None, None)


def test_default_gate_selects_paper_blocks():
    cfg = MaskGeneratorConfig()
    assert cfg.hmg_gate == [2, 4, 10, 12]
    assert cfg.gate_vector(12) == [0, 1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1]
    assert cfg.mask_variant == "Pn"


def test_gate_validation():
    with pytest.raises(ConfigError):
        MaskGeneratorConfig(hmg_gate=[]).validate(12)
    with pytest.raises(ConfigError):
        MaskGeneratorConfig(hmg_gate=[13]).validate(12)
    with pytest.raises(ConfigError):
        MaskGeneratorConfig(mask_variant="X").validate(12)


def test_gather_single_gate_is_reshaped_last_block(rng):
    feats = [rng.normal(size=(2, 6, 3)).astype(np.float32) for _ in range(4)]
    out = hmg.gather_features(fake_state(feats), [4], (3, 2))
    np.testing.assert_array_equal(out.data, feats[3].reshape(2, 3, 2, 3))


def test_gather_default_gate_stacks_4c_channels(rng):
    feats = [rng.normal(size=(1, 21, 5)).astype(np.float32) for _ in range(12)]
    out = hmg.gather_features(fake_state(feats), [2, 4, 10, 12], (7, 3))
    assert out.shape == (1, 7, 3, 20)
    for k, blk in enumerate([2, 4, 10, 12]):
        np.testing.assert_array_equal(out.data[..., 5 * k:5 * (k + 1)], feats[blk - 1].reshape(1, 7, 3, 5))


def test_gather_duplicate_features_give_equal_groups(rng):
    f = rng.normal(size=(1, 6, 3))
    out = hmg.gather_features(fake_state([f, f]), [1, 2], (3, 2)).data
    np.testing.assert_array_equal(out[..., :3], out[..., 3:])


def test_gather_rejects_wrong_grid(rng):
    with pytest.raises(ShapeError):
        hmg.gather_features(fake_state([rng.normal(size=(1, 6, 3))]), [1], (2, 2))


def _store(cfg=MaskGeneratorConfig(hmg_gate=[2, 4]), seed=0):
    store = ParamStore()
    hmg.init_hmg(store, ENC, cfg, np.random.default_rng(seed))
    return store, cfg


def test_zero_conv_output_gives_half_mask(rng):
    store, cfg = _store()
    store["hmg.conv2.w"].data[:] = 0.0
    stacked = Tensor(rng.normal(size=(2, 3, 2, 12)))
    np.testing.assert_array_equal(hmg.generate_mask(store, cfg, stacked).data, 0.5)


def test_large_logits_saturate_mask(rng):
    store, cfg = _store()
    with precision(np.float64):
        store.astype(np.float64)
        store["hmg.conv2.w"].data[:] = 0.0
        store["hmg.conv2.b"].data[:] = 50.0
        m = hmg.generate_mask(store, cfg, Tensor(rng.normal(size=(1, 3, 2, 12)))).data
    assert np.all(np.abs(m - 1.0) < 1e-8)


def test_mask_entries_strictly_inside_unit_interval(rng):
    store, cfg = _store()
    m = hmg.generate_mask(store, cfg, Tensor(rng.normal(0, 3, size=(4, 3, 2, 12)))).data
    assert m.shape == (4, ENC.dim) and np.all((m > 0) & (m < 1))


def test_mask_monotone_in_a_pre_pool_logit(rng):
    store, cfg = _store()
    stacked = Tensor(rng.normal(size=(1, 3, 2, 12)))
    base = hmg.generate_mask(store, cfg, stacked).data
    # raise the bias of the last conv for one channel: every pre-pool logit of that channel grows
    store["hmg.conv2.b"].data[2] += 0.5
    bumped = hmg.generate_mask(store, cfg, stacked).data
    assert bumped[0, 2] > base[0, 2]
    np.testing.assert_array_equal(np.delete(bumped, 2, axis=1), np.delete(base, 2, axis=1))


def test_apply_mask_examples():
    w = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(hmg.apply_mask(w, Tensor([0.5, 1.0])).data, [[0.5, 2.0], [1.5, 4.0]])
    np.testing.assert_array_equal(hmg.apply_mask(w, Tensor([1.0, 1.0])).data, w.data)
    np.testing.assert_array_equal(hmg.apply_mask(w, Tensor([0.0, 0.0])).data, 0.0)
    with pytest.raises(ShapeError):
        hmg.apply_mask(w, Tensor([1.0, 1.0, 1.0]))


def test_apply_mask_batched_rows(rng):
    w, m = rng.normal(size=(5, 4)), rng.uniform(size=(3, 4))
    out = hmg.apply_mask(Tensor(w), Tensor(m)).data
    assert out.shape == (3, 5, 4)
    for i in range(3):
        np.testing.assert_allclose(out[i], w * m[i], rtol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_apply_mask_linear_monotone_and_permutation_commuting(seed):
    rng = np.random.default_rng(seed)
    w1, w2 = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    m = rng.uniform(size=6)
    a, b = rng.normal(size=2)
    lhs = hmg.apply_mask(Tensor(a * w1 + b * w2, dtype=np.float64), Tensor(m, dtype=np.float64)).data
    rhs = a * hmg.apply_mask(Tensor(w1, dtype=np.float64), Tensor(m, dtype=np.float64)).data \
        + b * hmg.apply_mask(Tensor(w2, dtype=np.float64), Tensor(m, dtype=np.float64)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    wp = np.abs(w1)
    bigger = m + rng.uniform(0, 0.5, 6)
    assert np.all(hmg.apply_mask(Tensor(wp), Tensor(bigger)).data >= hmg.apply_mask(Tensor(wp), Tensor(m)).data)
    perm = rng.permutation(4)
    np.testing.assert_array_equal(hmg.apply_mask(Tensor(w1[perm]), Tensor(m)).data,
                                  hmg.apply_mask(Tensor(w1), Tensor(m)).data[perm])


def test_gradient_flows_into_conv_parameters(rng):
    with precision(np.float64):
        store, cfg = _store()
        store.astype(np.float64)
        for _, p in store.items():
            p.tensor.data = p.tensor.data + rng.normal(0, 0.3, p.tensor.shape)
        stacked = Tensor(rng.normal(size=(2, 3, 2, 12)))
        w = Tensor(rng.normal(size=(3, ENC.dim)))
        target = rng.normal(size=(2, 3, ENC.dim))

        def f():
            wm = hmg.apply_mask(w, hmg.generate_mask(store, cfg, stacked))
            return ops.sum(ops.mul(wm, target))

        rep = grad_check_many(f, store.tensors([FreezeGroup.HMG]), tol=1e-4)
    assert rep.passed, rep.worst


def test_last_block_only_and_hierarchy_both_valid(rng):
    feats = [rng.normal(size=(2, 6, ENC.dim)).astype(np.float32) for _ in range(ENC.depth)]
    for gate in ([4], [1, 2, 3, 4]):
        cfg = MaskGeneratorConfig(hmg_gate=gate)
        store = ParamStore()
        hmg.init_hmg(store, ENC, cfg, np.random.default_rng(0))
        m = hmg.mask_from_state(store, ENC, cfg, fake_state(feats)).data
        assert m.shape == (2, ENC.dim) and np.all((m > 0) & (m < 1))
