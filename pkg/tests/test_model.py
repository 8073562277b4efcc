import numpy as np
import pytest

from sgnet import autodiff as ad
from sgnet import model as M
from sgnet.autodiff import Tensor
from sgnet.errors import ConfigError, FormatError, ShapeError

MICRO = dict(input_extents=(8, 8), conv_filters=(2, 2, 2))


def micro_config(**kw):
    return M.ModelConfig(**{**MICRO, **kw})


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_config_invariants():
    with pytest.raises(ConfigError):
        M.ModelConfig(n_classes=3)
    with pytest.raises(ConfigError):
        M.ModelConfig(input_extents=(7, 36))  # collapses below 1 after 3 pools
    with pytest.raises(ConfigError):
        M.ModelConfig(spatial_rank=3, input_extents=(30, 36))
    with pytest.raises(ConfigError):
        M.ModelConfig(conv_filters=(8, 8))


def test_flattened_sizes_match_paper_dims():
    assert M.ModelConfig().flat_features() == 192
    assert M.ModelConfig(spatial_rank=3, input_extents=(33, 46, 48)).flat_features() == 1920


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def test_he_std_of_first_conv_layer():
    # fan_in = 1 * 4 * 4 = 16 -> std = sqrt(2/16); pool draws across seeds
    draws = []
    for seed in range(80):
        m = M.init(M.ModelConfig(), seed=seed)
        draws.append(m.params["conv1.kernel"].data.ravel())
    draws = np.concatenate(draws)
    assert draws.size >= 10000
    expected = np.sqrt(2.0 / 16.0)
    assert abs(draws.std() - expected) / expected < 0.05


def test_init_deterministic_and_biases_zero():
    a = M.init(M.ModelConfig(), seed=9)
    b = M.init(M.ModelConfig(), seed=9)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    for i in (1, 2, 3):
        np.testing.assert_array_equal(a.params[f"conv{i}.bias"].data, 0.0)
        np.testing.assert_array_equal(a.params[f"bn{i}.scale"].data, 1.0)
        np.testing.assert_array_equal(a.params[f"bn{i}.shift"].data, 0.0)
    np.testing.assert_array_equal(a.params["dense.bias"].data, 0.0)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_forward_shapes_2d(rng):
    m = M.init(M.ModelConfig(), seed=0)
    x = rng.normal(size=(3, 1, 30, 36)).astype(np.float32)
    fp = M.forward(m, x)
    assert fp.logits.shape == (3, 2)
    assert fp.features.shape == (3, 16, 7, 9)


def test_forward_shapes_3d(rng):
    cfg = M.ModelConfig(spatial_rank=3, input_extents=(33, 46, 48))
    m = M.init(cfg, seed=0)
    x = rng.normal(size=(1, 1, 33, 46, 48)).astype(np.float32)
    fp = M.forward(m, x)
    assert fp.logits.shape == (1, 2)
    assert fp.features.shape == (1, 16, 8, 11, 12)
    assert cfg.feature_extents() == (8, 11, 12)


def test_forward_inference_deterministic(rng):
    m = M.init(micro_config(), seed=1)
    x = rng.normal(size=(4, 1, 8, 8)).astype(np.float32)
    a = M.forward(m, x, training=False).logits.data
    b = M.forward(m, x, training=False).logits.data
    np.testing.assert_array_equal(a, b)


def test_forward_shape_error(rng):
    m = M.init(M.ModelConfig(), seed=0)
    with pytest.raises(ShapeError):
        M.forward(m, rng.normal(size=(2, 1, 30, 35)).astype(np.float32))
    with pytest.raises(ShapeError):
        M.forward(m, rng.normal(size=(2, 2, 30, 36)).astype(np.float32))


def test_dropout_zeroes_about_half_the_units():
    x = Tensor(np.ones((64, 192), dtype=np.float32))
    out = ad.dropout(x, 0.5, np.random.default_rng(3), training=True)
    n = out.size
    zeros = int(np.sum(out.data == 0.0))
    # binomial 99% CI around p = 0.5
    margin = 2.576 * np.sqrt(n * 0.25)
    assert abs(zeros - n / 2) < margin
    assert np.all(np.isin(out.data, [0.0, 2.0]))


# ---------------------------------------------------------------------------
# probabilities and penalty
# ---------------------------------------------------------------------------

def test_predict_proba_symmetry_and_hand_value(rng):
    m = M.init(micro_config(), seed=2)
    x = rng.normal(size=(5, 1, 8, 8)).astype(np.float32)
    # zero dense weights force logits == dense bias for every input
    m.params["dense.weight"].data[:] = 0.0
    m.params["dense.bias"].data[:] = 0.0
    p = M.predict_proba(m, x).data
    np.testing.assert_allclose(p, 0.5, atol=1e-7)
    m.params["dense.bias"].data[:] = [np.log(3.0), 0.0]
    p = M.predict_proba(m, x).data
    np.testing.assert_allclose(p[:, 0], 0.75, atol=1e-6)
    np.testing.assert_allclose(p[:, 1], 0.25, atol=1e-6)
    q = M.predict_proba(m, rng.normal(size=(7, 1, 8, 8)).astype(np.float32)).data
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-6)


def test_l2_penalty_values():
    m = M.init(micro_config(), seed=0)
    for w in m.weight_tensors():
        w.data[:] = 0.0
    assert M.l2_penalty(m).item() == 0.0
    m.params["conv1.kernel"].data.ravel()[:10] = 1.0
    assert abs(M.l2_penalty(m).item() - 0.001 * 10) < 1e-9


def test_l2_penalty_gradient(f64):
    m = M.init(micro_config(), seed=0)
    w = m.params["conv2.kernel"]

    def pen(t):
        m.params["conv2.kernel"] = t
        try:
            return M.l2_penalty(m)
        finally:
            m.params["conv2.kernel"] = w

    err = ad.finite_diff_check(pen, w)
    assert err < 1e-6
    g = ad.grad(M.l2_penalty(m), [w])[0]
    np.testing.assert_allclose(g.data, 0.002 * w.data, rtol=1e-10)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    m = M.init(M.ModelConfig(), seed=5)
    m.step = 1234
    # perturb running stats so they are not the init values
    m.bn_states[0].mean[:] = rng.normal(size=8)
    m.bn_states[2].var[:] = np.abs(rng.normal(size=16)) + 0.5
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    M.save(m, p1)
    m2 = M.load(p1)
    M.save(m2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert m2.step == 1234
    for name, arr in m.named_arrays().items():
        np.testing.assert_array_equal(arr, m2.named_arrays()[name])
    x = rng.normal(size=(2, 1, 30, 36)).astype(np.float32)
    np.testing.assert_array_equal(M.forward(m, x).logits.data,
                                  M.forward(m2, x).logits.data)


def test_checkpoint_truncation_and_magic(tmp_path):
    m = M.init(micro_config(), seed=5)
    p = tmp_path / "m.ckpt"
    M.save(m, p)
    blob = p.read_bytes()
    for cut in (4, len(blob) // 2, len(blob) - 3):
        (tmp_path / "cut.ckpt").write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            M.load(tmp_path / "cut.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(FormatError):
        M.load(tmp_path / "bad.ckpt")
    (tmp_path / "trail.ckpt").write_bytes(blob + b"\x00")
    with pytest.raises(FormatError):
        M.load(tmp_path / "trail.ckpt")


def test_checkpoint_shape_mismatch(tmp_path):
    m = M.init(micro_config(), seed=5)
    p = tmp_path / "m.ckpt"
    M.save(m, p)
    blob = bytearray(p.read_bytes())
    # flip one extent byte inside the first tensor record's header
    import json, struct
    json_len = struct.unpack("<I", bytes(blob[12:16]))[0]
    rec = 16 + json_len
    name_len = struct.unpack("<H", bytes(blob[rec:rec + 2]))[0]
    ext_at = rec + 2 + name_len + 1
    blob[ext_at] = blob[ext_at] + 1
    (tmp_path / "shape.ckpt").write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        M.load(tmp_path / "shape.ckpt")
