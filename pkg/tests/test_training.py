import numpy as np
import pytest

from neuraldtw import training as T
from neuraldtw.metrics import PairGroundTruth, build_ground_truth
from neuraldtw.models import DirectModel, SiameseModel


def _tiny_data(rng, n=8, L=256):
    signals = [rng.random(L).astype(np.float32) for _ in range(n)]
    pairs = np.array([(i, j) for i in range(n) for j in range(n) if i != j])
    return signals, build_ground_truth(signals, pairs)


def _cfg(**kw):
    base = dict(L=256, H=4, batch_size=16, lr=1e-3, max_epochs=3, patience=2, N=8, n_pairs=56)
    base.update(kw)
    return T.TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(patience=60)
    with pytest.raises(ValueError):
        T.TrainConfig(lam=-1)
    with pytest.raises(ValueError):
        T.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        T.TrainConfig.from_dict({"L": 10, "learning_rate": 1})
    assert T.TrainConfig().H == 500 and T.TrainConfig().patience == 8


def test_early_stopping_injected_sequence():
    es = T.EarlyStopping(patience=3)
    seq = [1.0, 0.8, 0.85, 0.8, 0.7, 0.9, 0.9, 0.9, 0.1]
    stopped_at = None
    for epoch, loss in enumerate(seq):
        es.update(epoch, loss)
        if es.should_stop:
            stopped_at = epoch
            break
    # equal loss is not an improvement; three non-improving epochs after 0.7
    assert stopped_at == 7 and es.best_epoch == 4 and es.best == 0.7


def test_training_loop_with_injected_losses(monkeypatch, rng):
    signals, gt = _tiny_data(rng)
    losses = iter([5.0, 4.0, 3.0, 3.5, 3.2, 3.1, 0.0])
    snapshots = {}

    def fake_validate(model, sig, g, lam, bs):
        v = next(losses)
        return {"approx_mse": v, "recon_mse": 0.0, "total": v}

    monkeypatch.setattr(T, "validate", fake_validate)
    cfg = _cfg(model_kind="direct", max_epochs=10, patience=3)
    model = DirectModel.create(4, np.random.default_rng(0))

    def on_epoch(row):
        snapshots[row["epoch"]] = model.params.checksum()

    ckpt, report = T.train_direct(cfg, signals, gt, signals, gt, model=model, on_epoch=on_epoch)
    assert [e["epoch"] for e in report.epochs] == [0, 1, 2, 3, 4, 5]
    assert report.stopped_early and report.best_epoch == 2 and report.best_val_loss == 3.0
    assert ckpt.best == {"epoch": 2, "val_loss": 3.0}
    assert ckpt.params.checksum() == snapshots[2] != snapshots[5]


def test_best_is_epoch_zero_when_nothing_improves(monkeypatch, rng):
    signals, gt = _tiny_data(rng)
    monkeypatch.setattr(T, "validate", lambda *a: {"approx_mse": 1.0, "recon_mse": 0.0, "total": 1.0})
    model = DirectModel.create(4, np.random.default_rng(0))
    before = model.params.checksum()
    ckpt, report = T.train_direct(_cfg(model_kind="direct"), signals, gt, signals, gt, model=model)
    assert report.best_epoch == 0 and ckpt.params.checksum() == before


def test_lambda_zero_decoder_grads_vanish(rng):
    model = SiameseModel.create(4, np.random.default_rng(0))
    xa, xb = rng.random((4, 256), dtype=np.float32), rng.random((4, 256), dtype=np.float32)
    y = rng.random(4).astype(np.float32)
    losses, grads = T.siamese_step(model, xa, xb, y, lam=0.0)
    dec = [k for k in grads if k.startswith("decoder.")]
    enc = [k for k in grads if k.startswith("encoder.")]
    assert dec and all(np.all(grads[k] == 0) for k in dec)
    assert any(np.any(grads[k] != 0) for k in enc)
    assert losses["total"] == losses["approx"]
    _, grads = T.siamese_step(model, xa, xb, y, lam=1.0)
    assert any(np.any(grads[k] != 0) for k in dec)


def test_siamese_loss_decomposition(rng):
    model = SiameseModel.create(4, np.random.default_rng(0))
    xa, xb = rng.random((3, 256), dtype=np.float32), rng.random((3, 256), dtype=np.float32)
    losses, _ = T.siamese_step(model, xa, xb, np.zeros(3, np.float32), lam=0.7, mode="infer", need_grads=False)
    assert losses["approx"] >= 0 and losses["recon"] >= 0
    assert losses["total"] == pytest.approx(losses["approx"] + 0.7 * losses["recon"], rel=1e-12)


def test_identical_pair_distance_zero_grad_finite():
    model = SiameseModel.create(4, np.random.default_rng(0))
    x = np.random.default_rng(1).random((2, 256), dtype=np.float32)
    _, grads = T.siamese_step(model, x, x.copy(), np.zeros(2, np.float32), lam=1.0)
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_validate_constant_predictor():
    # zero head weights turn the direct model into a constant-0.5 predictor
    model = DirectModel.create(4, np.random.default_rng(0))
    model.params["direct.head.weight"][...] = 0.0
    model.params["direct.head.bias"][...] = 0.5
    rng = np.random.default_rng(5)
    signals = [rng.random(256).astype(np.float32) for _ in range(60)]
    i, j = np.divmod(np.arange(3000), 60)
    gt = PairGroundTruth(i, j, rng.random(3000))
    before = model.params.checksum()
    res = T.validate(model, signals, gt, batch_size=1000)
    assert res["approx_mse"] == pytest.approx(1 / 12, abs=0.01)
    assert T.validate(model, signals, gt, batch_size=1000) == res
    assert model.params.checksum() == before


def test_validate_perfect_predictor(rng):
    signals, _ = _tiny_data(rng)
    model = DirectModel.create(4, np.random.default_rng(0))
    pred = model.predict(signals[:3], signals[3:6])
    gt = PairGroundTruth(np.arange(3), np.arange(3, 6), pred)
    assert T.validate(model, signals, gt)["approx_mse"] == pytest.approx(0, abs=1e-10)


def test_rejects_bad_ground_truth(rng):
    signals, gt = _tiny_data(rng)
    bad = PairGroundTruth(gt.i, gt.j, gt.value * 0 + 1.5)
    with pytest.raises(ValueError):
        T.train_direct(_cfg(model_kind="direct"), signals, bad, signals, gt)


def test_divergence_aborts(monkeypatch, rng):
    signals, gt = _tiny_data(rng)
    monkeypatch.setattr(T, "validate", lambda *a: {"approx_mse": np.nan, "recon_mse": 0.0, "total": np.nan})
    with pytest.raises(T.TrainingDiverged):
        T.train_direct(_cfg(model_kind="direct"), signals, gt, signals, gt)


def test_same_seed_same_curve(rng):
    signals, gt = _tiny_data(rng, n=6)
    cfg = _cfg(model_kind="siamese", max_epochs=1, patience=1, batch_size=10)
    a_ck, a = T.train(cfg, signals, gt, signals, gt)
    b_ck, b = T.train(cfg, signals, gt, signals, gt)
    strip = lambda r: [{k: v for k, v in e.items() if k != "time"} for e in r.epochs]
    assert strip(a) == strip(b)
    assert a_ck.params.checksum() == b_ck.params.checksum()


def test_direct_padding_equal_length_is_noop(rng):
    model = DirectModel.create(4, np.random.default_rng(0))
    xs = [rng.random(256).astype(np.float32) for _ in range(3)]
    ys = [rng.random(256).astype(np.float32) for _ in range(3)]
    np.testing.assert_array_equal(model.predict(xs, ys), model.predict(xs, ys, pad_to=256))
    mixed = model.predict([rng.random(300)], [rng.random(260)])
    assert mixed.shape == (1,)


def test_report_curve_csv(rng):
    r = T.TrainReport(epochs=[{"epoch": 0, "train_approx": None, "val_approx": 0.5, "val_total": 0.5}])
    lines = r.curve_csv().splitlines()
    assert lines[0].startswith("epoch,train_approx") and lines[1].startswith("0,,")
