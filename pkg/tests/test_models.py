import struct

import numpy as np
import pytest

from sphnet import autodiff as ad
from sphnet import checkpoint
from sphnet.cloud import normalize, random_rotations
from sphnet.models import (
    Classifier,
    ClassifierConfig,
    Segmenter,
    SegmenterConfig,
    build_model,
    config_from_dict,
    count_params,
    load_model,
    param_table,
    save_model,
)


def small_classifier(**kw):
    base = dict(n_classes=3, n_points=64, channels=(4, 6, 8), pool_ratios=(4, 4), fc=(8, 6), k=8, rho=0.3)
    base.update(kw)
    return ClassifierConfig(**base)


def small_segmenter(**kw):
    base = dict(n_labels=3, n_points=64, channels=(4, 6, 8), pool_ratios=(4, 2, 2), k=8, rho=0.3)
    base.update(kw)
    return SegmenterConfig(**base)


def clouds(b, n, seed=0):
    rng = np.random.default_rng(seed)
    return np.stack([normalize(rng.normal(size=(n, 3)) * [1.0, 0.6, 0.3]) for _ in range(b)])


# --------------------------------------------------------------------------- configs


def test_default_configs_follow_the_architecture():
    c = ClassifierConfig()
    assert (c.n_points, c.channels, c.pool_ratios, c.fc, c.k, c.rho) == (1024, (64, 256, 1024), (4, 4), (512, 256), 64, 0.1)
    s = SegmenterConfig()
    assert (s.n_points, s.channels, s.pool_ratios, s.k, s.rho) == (2048, (64, 128, 256), (4, 4, 8), 48, 0.08)
    assert c.n_radial == s.n_radial == 2 and c.n_degrees == s.n_degrees == 4


def test_config_round_trip_and_validation():
    cfg = small_classifier(variant="sphbase")
    assert ClassifierConfig.from_json(cfg.to_json()) == cfg
    assert config_from_dict(cfg.to_dict()) == cfg
    d = cfg.to_dict()
    with pytest.raises(ValueError):
        ClassifierConfig.from_dict({**d, "version": 99})
    with pytest.raises(ValueError):
        ClassifierConfig.from_dict({**d, "bogus": 1})
    with pytest.raises(ValueError):
        SegmenterConfig.from_dict(d)
    with pytest.raises(ValueError):
        ClassifierConfig(n_points=96)
    with pytest.raises(ValueError):
        ClassifierConfig(pool_ratios=(4, 3))
    with pytest.raises(ValueError):
        ClassifierConfig(n_points=8)


def test_variants_differ_only_in_flag():
    a, b = small_classifier().to_dict(), small_classifier(variant="sphbase").to_dict()
    assert {k for k in a if a[k] != b[k]} == {"variant"}


# --------------------------------------------------------------------------- parameter counts


def conv_params(g, j, n_r, per_degree):
    return g * j * n_r * per_degree + g


def test_count_params_by_formula():
    cfg = ClassifierConfig(n_classes=40)
    table = param_table(cfg)
    assert table["conv0.W"] + table["conv0.b"] == 576
    expected = (
        conv_params(64, 1, 2, 4) + conv_params(256, 64, 2, 4) + conv_params(1024, 256, 2, 4)
        + 2 * (64 + 256 + 1024)  # batchnorm gamma and beta
        + (1024 * 512 + 512) + 2 * 512 + (512 * 256 + 256) + 2 * 256 + (256 * 40 + 40)
    )
    assert count_params(cfg) == expected
    base = param_table(ClassifierConfig(variant="sphbase"))
    assert base["conv0.W"] + base["conv0.b"] == 2112


def test_segmenter_param_count_by_formula():
    cfg = small_segmenter()
    c0, c1, c2 = cfg.channels
    per = 4
    expected = (
        conv_params(c0, 1, 2, per) + conv_params(c1, c0, 2, per) + conv_params(c2, c1, 2, per)
        + conv_params(c2, c2 + c2, 2, per) + conv_params(c1, c2 + c1, 2, per) + conv_params(c0, c1 + c0, 2, per)
        + conv_params(3, c0, 2, per)
        + 2 * 2 * (c0 + c1 + c2)
    )
    assert count_params(cfg) == expected


# --------------------------------------------------------------------------- forward contracts


def test_classifier_output_and_determinism():
    cfg = small_classifier()
    x = clouds(2, 64)
    a = Classifier(cfg)(x).data
    assert a.shape == (2, 3)
    np.testing.assert_allclose(ad.softmax_np(a).sum(-1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(a, Classifier(cfg)(x).data)


def test_segmenter_output_shape_and_order():
    cfg = small_segmenter()
    model = Segmenter(cfg)
    x = clouds(2, 64, seed=1)
    out = model(x).data
    assert out.shape == (2, 64, 3)
    np.testing.assert_allclose(ad.softmax_np(out).sum(-1), 1.0, atol=1e-6)
    # logits follow the input order: permuting the input permutes the output
    shuffle = np.random.default_rng(0).permutation(64)
    np.testing.assert_allclose(model(x[:, shuffle]).data, out[:, shuffle], rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("make", [small_classifier, small_segmenter])
def test_input_validation(make):
    model = build_model(make())
    with pytest.raises(ValueError):
        model(clouds(1, 32))
    with pytest.raises(ValueError):
        model(2 * clouds(1, 64))


def test_build_model_rejects_unknown():
    with pytest.raises(TypeError):
        build_model({"schema": "x"})


def test_intermediate_sizes():
    cfg = ClassifierConfig(channels=(8, 8, 8), fc=(8, 8), n_classes=4, k=16)
    shapes = {}
    Classifier(cfg)(clouds(1, 1024), record=lambda name, t: shapes.__setitem__(name, t.shape))
    assert shapes["conv0"][1] == 1024 and shapes["conv1"][1] == 256 and shapes["conv2"][1] == 64
    assert shapes["fc0"] == (1, 8)
    seg = small_segmenter()
    shapes = {}
    Segmenter(seg)(clouds(1, 64), record=lambda name, t: shapes.__setitem__(name, t.shape))
    assert [shapes[f"enc{i}"][1] for i in range(3)] == [64, 16, 8]
    assert [shapes[f"dec{i}"][1] for i in range(3)] == [64, 16, 8]


def test_decoder_input_is_upsample_then_skip():
    coarse = ad.Tensor(np.arange(6.0).reshape(1, 2, 3))
    skip = ad.Tensor(-np.arange(8.0).reshape(1, 4, 2))
    out = Segmenter.decoder_input(coarse, skip, 1).data
    np.testing.assert_array_equal(out[0, :, :3], np.repeat(coarse.data[0], 2, axis=0))
    np.testing.assert_array_equal(out[0, :, 3:], skip.data[0])


def test_skip_bookkeeping_on_recorded_encoder_features():
    # pooling the decoder input recovers the coarse features exactly, and the
    # skip half is the encoder output at the same resolution
    model = Segmenter(small_segmenter(precision="float64"))
    recorded = {}
    model(clouds(1, 64, seed=2), record=lambda n, t: recorded.__setitem__(n, t.data))
    fine = recorded["enc1"]
    coarse = fine.reshape(1, -1, 2, fine.shape[-1]).max(axis=2)
    x_in = Segmenter.decoder_input(ad.Tensor(coarse), ad.Tensor(fine), 1).data
    width = coarse.shape[-1]
    np.testing.assert_array_equal(x_in[..., :width].reshape(1, -1, 2, width).max(axis=2), coarse)
    np.testing.assert_array_equal(x_in[..., width:], fine)


# --------------------------------------------------------------------------- invariance


def test_classifier_invariant_with_shared_trees_single_precision():
    cfg = small_classifier(precision="float32", channels=(8, 8, 8))
    model = Classifier(cfg)
    x = clouds(1, 64, seed=3)
    perms = model.leaf_order(x)
    from sphnet.experiments import patch_plan

    plan = patch_plan(model, x, perms)
    base = model(x, perms=perms, patches=plan).data
    for rot in random_rotations(5, seed=4):
        got = model(x @ rot.T, perms=perms, patches=plan).data
        assert np.abs(got - base).max() / np.abs(base).max() < 1e-3


def test_segmenter_agreement_with_rebuilt_trees():
    cfg = SegmenterConfig(n_labels=3, n_points=256, channels=(8, 16, 16), pool_ratios=(4, 4, 4), k=16, rho=0.15)
    model = Segmenter(cfg)
    x = clouds(1, 256, seed=5)
    base = model(x).data.argmax(-1)
    agree = [np.mean(model(x @ rot.T).data.argmax(-1) == base) for rot in random_rotations(20, seed=6)]
    assert np.mean(agree) >= 0.9


# --------------------------------------------------------------------------- gradients of full models

# Central differences at h = 1e-5 carry ~3e-11 absolute round-off on an O(1) loss, so
# entries below 1e-5 are compared against a 1e-5 denominator (absolute error < 1e-10).
MODEL_FLOOR = 1e-5


def test_classifier_gradients():
    model = Classifier(small_classifier(precision="float64"))
    x = clouds(2, 64, seed=7)
    labels = np.array([0, 2])
    loss = lambda: ad.softmax_cross_entropy(model(x, train=True, rng=np.random.default_rng(0)), labels)
    report = ad.grad_check(loss, list(model.parameters().values()), floor=MODEL_FLOOR)
    assert report.max_rel_error < 1e-5, report


def test_segmenter_gradients():
    model = Segmenter(small_segmenter(precision="float64"))
    x = clouds(2, 64, seed=8)
    labels = np.random.default_rng(9).integers(0, 3, size=(2, 64))
    loss = lambda: ad.softmax_cross_entropy(model(x, train=True, rng=np.random.default_rng(0)), labels)
    report = ad.grad_check(loss, list(model.parameters().values()), floor=MODEL_FLOOR, max_entries=60)
    assert report.max_rel_error < 1e-5, report


# --------------------------------------------------------------------------- checkpoints


def test_model_checkpoint_round_trip(tmp_path):
    model = Segmenter(small_segmenter())
    model.layers["enc_bn0"].buffers["running_mean"][:] = 0.25
    path = tmp_path / "m.ckpt"
    save_model(path, model, {"step": np.array([3], dtype=np.int64)}, {"note": "x"})
    loaded, tensors, meta = load_model(path)
    assert meta["note"] == "x" and tensors["optim"]["step"][0] == 3
    x = clouds(1, 64, seed=10)
    np.testing.assert_array_equal(loaded(x).data, model(x).data)
    np.testing.assert_array_equal(loaded.buffers()["enc_bn0.running_mean"], 0.25)


def test_checkpoint_layout_is_bit_exact():
    blob = checkpoint.dumps({"param": {"w": np.array([1.5, -2.0], dtype=np.float32)}}, {"a": 1})
    meta = b'{"a": 1}'
    expected = (
        b"SPHNCKPT" + struct.pack("<II", 1, len(meta)) + meta + struct.pack("<I", 1)
        + struct.pack("<I", 1) + b"w" + struct.pack("<BBI", 0, 0, 1) + struct.pack("<Q", 2)
        + struct.pack("<2f", 1.5, -2.0)
    )
    assert blob == expected


def test_checkpoint_dtypes_and_errors():
    tensors = {
        "param": {"a": np.arange(6, dtype=np.float64).reshape(2, 3)},
        "buffer": {"b": np.ones(2, dtype=np.float32)},
        "optim": {"step": np.array([7], dtype=np.int64), "scalar": np.array(2.0)},
    }
    back, meta = checkpoint.loads(checkpoint.dumps(tensors))
    assert meta == {}
    for group in tensors:
        for name, arr in tensors[group].items():
            np.testing.assert_array_equal(back[group][name], arr)
            assert back[group][name].dtype == arr.dtype
    blob = checkpoint.dumps(tensors)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:-3])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOTACKPT" + blob[8:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:8] + struct.pack("<I", 2) + blob[12:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.dumps({"param": {"c": np.ones(2, dtype=np.complex64)}})


def test_checkpoint_layout_mismatch():
    model = Classifier(small_classifier())
    other = Classifier(small_classifier(channels=(4, 6, 10)))
    with pytest.raises(checkpoint.CheckpointError):
        other.load_state(model.state())
