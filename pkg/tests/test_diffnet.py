import numpy as np
import pytest

from neuraldtw.diffnet import (AdamState, BatchNorm, Checkpoint, ConcatChannels, Conv1d, Dense, GlobalMaxPool,
                               NetworkSpec, NonFiniteGradient, ParamStore, ReLU, ShapeError, StaleCache,
                               UpsampleNearest, adam_step, backward, build_decoder, build_direct, build_encoder,
                               forward, init_params, load_checkpoint, save_checkpoint)
from neuraldtw.diffnet.gradcheck import check_network, rel_error

NET_TOL = 1e-3


def _f64(spec, seed=0):
    return init_params(spec, np.random.default_rng(seed), dtype=np.float64)


def _check(spec, x, mode="train", **kw):
    params = _f64(spec)
    errs = check_network(spec, params, x, np.random.default_rng(1), mode=mode, **kw)
    worst = max(errs.values())
    assert worst < NET_TOL, errs
    return errs


@pytest.mark.parametrize("layer", [
    Conv1d(2, 3, 5, 1, (2, 2), name="c"),
    Conv1d(2, 3, 3, 2, (1, 1), name="c"),
    Conv1d(2, 3, 4, 1, (4, 5), 3, name="c"),
])
def test_conv_gradients(layer, rng):
    _check(NetworkSpec("n", (layer,)), rng.normal(size=(3, 2, 17)))


def test_batchnorm_gradients_both_modes(rng):
    spec = NetworkSpec("n", (Conv1d(2, 3, 3, name="c"), BatchNorm(3, name="bn")))
    x = rng.normal(size=(4, 2, 11))
    _check(spec, x, "train")
    _check(spec, x, "infer")


def test_dense_relu_pool_upsample_concat(rng):
    spec = NetworkSpec("n", (ConcatChannels(name="cat"), Conv1d(3, 4, 3, 1, (1, 1), name="c"), ReLU(name="r"),
                             GlobalMaxPool(name="p"), Dense(4, 6, name="d"), ReLU(name="r2"),
                             UpsampleNearest(15, name="u"), Conv1d(1, 1, 1, name="o")))
    errs = _check(spec, (rng.normal(size=(3, 1, 9)), rng.normal(size=(3, 2, 9))))
    assert {"<input0>", "<input1>"} <= set(errs)


def test_upsample_index_and_adjoint(rng):
    spec = NetworkSpec("n", (UpsampleNearest(7, name="u"),))
    p = ParamStore()
    x = rng.normal(size=(2, 3))
    y, cache = forward(spec, p, x)
    assert y.shape == (2, 1, 7)
    assert np.array_equal(y[0, 0], x[0, (np.arange(7) * 3) // 7])
    g = rng.normal(size=y.shape)
    _, dx = backward(spec, p, cache, g)
    assert np.isclose((y * g).sum(), (x * dx).sum())


def test_encoder_gradients(rng):
    spec = build_encoder(H=8)
    _check(spec, rng.normal(size=(3, 1, 256)), max_entries=6)


def test_decoder_gradients(rng):
    spec = build_decoder(H=8, kernel=5, dilations=(4, 2, 1), channels=4)
    _check(spec, rng.normal(size=(3, 8)), target_length=40)


def test_direct_gradients(rng):
    spec = build_direct(H=8)
    _check(spec, (rng.random((4, 1, 256)), rng.random((4, 1, 256))), max_entries=6)


def test_rel_error_floor():
    assert rel_error(np.zeros(3), np.full(3, 1e-9)) < 1e-2
    assert rel_error([1.0, 2.0], [1.0, 2.0]) == 0.0


def test_topology_shapes(rng):
    enc, dec, direct = build_encoder(16), build_decoder(16), build_direct(16)
    p = init_params(enc, rng).merge(init_params(dec, rng))
    z, _ = forward(enc, p, rng.random((2, 1, 300), dtype=np.float32), "train")
    assert z.shape == (2, 16)
    xhat, _ = forward(dec, p, z, "infer", target_length=300)
    assert xhat.shape == (2, 1, 300)
    pd = init_params(direct, rng)
    y, _ = forward(direct, pd, (np.zeros((2, 1, 256), np.float32), np.ones((2, 1, 256), np.float32)), "train")
    assert y.shape == (2, 1)
    # embedding layer sizes follow the encoder table
    convs = [l for l in enc.layers if isinstance(l, Conv1d)]
    assert [(c.out_ch, c.kernel, c.stride) for c in convs][0] == (8, 7, 2)
    assert len(convs) == 8


def test_admissible_lengths(rng):
    enc = build_encoder(8)
    p = init_params(enc, rng)
    for L in (255, 3001):
        with pytest.raises(ShapeError):
            forward(enc, p, np.zeros((2, 1, L), np.float32))
    forward(enc, p, np.zeros((2, 1, 3000), np.float32))


def test_concat_needs_equal_length():
    spec = NetworkSpec("n", (ConcatChannels(name="cat"),))
    with pytest.raises(ShapeError):
        forward(spec, ParamStore(), (np.zeros((1, 1, 5)), np.zeros((1, 1, 6))))


def test_train_mode_updates_running_stats_infer_does_not(rng):
    spec = NetworkSpec("n", (BatchNorm(2, name="bn"),))
    p = init_params(spec, rng, np.float64)
    x = rng.normal(3.0, 2.0, size=(8, 2, 5))
    forward(spec, p, x, "infer")
    assert np.all(p["n.bn.running_mean"] == 0)
    forward(spec, p, x, "train")
    np.testing.assert_allclose(p["n.bn.running_mean"], 0.1 * x.mean(axis=(0, 2)))
    np.testing.assert_allclose(p["n.bn.running_var"], 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1))
    assert "n.bn.running_mean" not in p.trainable


def test_stale_cache(rng):
    spec = NetworkSpec("n", (Dense(3, 2, name="d"),))
    p = init_params(spec, rng, np.float64)
    y, cache = forward(spec, p, rng.normal(size=(4, 3)), "train")
    grads, _ = backward(spec, p, cache, np.ones_like(y))
    adam_step(p, grads, AdamState(lr=0.1))
    with pytest.raises(StaleCache):
        backward(spec, p, cache, np.ones_like(y))


def test_adam_first_step_moves_by_lr():
    p = ParamStore({"w": np.array([1.0, -2.0, 3.0])})
    adam_step(p, {"w": np.array([0.5, -4.0, 0.0])}, AdamState(lr=0.01))
    # bias correction makes the first step lr * sign(g)
    np.testing.assert_allclose(p["w"], [0.99, -1.99, 3.0], atol=1e-9)


def test_adam_two_steps_hand_computed():
    p = ParamStore({"w": np.array([0.0])})
    s = AdamState(lr=0.1)
    adam_step(p, {"w": np.array([1.0])}, s)
    adam_step(p, {"w": np.array([3.0])}, s)
    m = (0.9 * 0.1 * 1 + 0.1 * 3) / (1 - 0.9**2)
    v = (0.999 * 0.001 * 1 + 0.001 * 9) / (1 - 0.999**2)
    assert p["w"][0] == pytest.approx(-0.1 - 0.1 * m / (np.sqrt(v) + 1e-8))
    assert s.t == 2 and p.version == 2


def test_adam_rejects_bad_grads():
    p = ParamStore({"w": np.zeros(2)})
    with pytest.raises(NonFiniteGradient):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, AdamState())
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(3)}, AdamState())
    with pytest.raises(KeyError):
        adam_step(p, {"nope": np.zeros(2)}, AdamState())
    assert np.all(p["w"] == 0)


def test_checkpoint_roundtrip(tmp_path, rng):
    enc, dec = build_encoder(8), build_decoder(8)
    p = init_params(enc, rng).merge(init_params(dec, rng))
    opt = AdamState(lr=1e-3)
    z, cache = forward(enc, p, rng.random((2, 1, 256), dtype=np.float32), "train")
    grads, _ = backward(enc, p, cache, np.ones_like(z))
    adam_step(p, grads, opt)
    ck = Checkpoint("siamese", {"encoder": enc, "decoder": dec}, p, opt, {"H": 8}, {"epoch": 3, "val_loss": 0.5})
    save_checkpoint(ck, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.kind == "siamese" and back.best == {"epoch": 3, "val_loss": 0.5} and back.config == {"H": 8}
    assert back.specs["encoder"] == enc and back.specs["decoder"] == dec
    assert back.params.checksum() == p.checksum()
    assert back.params.trainable == p.trainable
    assert back.optimizer.t == 1
    for k in opt.m:
        np.testing.assert_array_equal(back.optimizer.m[k], opt.m[k])
    x = rng.random((2, 1, 300), dtype=np.float32)
    np.testing.assert_array_equal(forward(enc, p, x)[0], forward(enc, back.params, x)[0])
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"NDTWCKPT"


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
