import hashlib
import math

import numpy as np
import pytest

from helpers import tiny_encoder
from oracles import numeric_grad, rel_err
from trajsim import autograd as ag
from trajsim.autograd import ShapeError, Tensor
from trajsim.contrastive import (NegativeQueue, TrainConfig, TrainState, fit, infonce_loss, momentum_update,
                                 train_epoch, train_step)
from trajsim.encoder import encode
from trajsim.optim import adam_step
from trajsim.synth import SynthConfig, generate


def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _digest(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode() + params[k].data.tobytes())
    return h.hexdigest()


SMALL = dict(batch_size=8, queue_size=32, seed=3)


@pytest.fixture(scope="module")
def data():
    return generate(SynthConfig(n=40, min_pts=10, max_pts=40, seed=7))


# --------------------------------------------------------------- InfoNCE


def test_infonce_closed_form():
    e = np.eye(4)
    loss = infonce_loss(Tensor(e[:1]), e[:1], e[1:4], temperature=1.0)
    # -log(e / (e + 3)), evaluated independently
    assert float(loss.data) == pytest.approx(0.7436683806286791, rel=1e-12)


def test_infonce_all_orthogonal_is_log_n_plus_one():
    e = np.eye(8)
    for n in (1, 3, 6):
        loss = infonce_loss(Tensor(e[:1]), e[1:2], e[2:2 + n], temperature=0.3)
        assert float(loss.data) == pytest.approx(math.log(n + 1), abs=1e-12)


def test_infonce_scale_invariant(rng):
    z, zp, q = _unit(rng, 4, 6), _unit(rng, 4, 6), _unit(rng, 10, 6)
    base = float(infonce_loss(Tensor(z), zp, q, 0.5).data)
    for c in (1e-3, 7.0):
        assert float(infonce_loss(Tensor(c * z), c * zp, c * q, 0.5).data) == pytest.approx(base, abs=1e-12)


def test_infonce_empty_queue_is_zero(rng):
    z = _unit(rng, 3, 5)
    assert float(infonce_loss(Tensor(z), z, np.zeros((0, 5)), 0.07).data) == 0.0


def test_infonce_zero_norm_errors(rng):
    z = _unit(rng, 2, 3)
    with pytest.raises(ValueError):
        infonce_loss(Tensor(np.zeros((2, 3))), z, z, 1.0)
    with pytest.raises(ValueError):
        infonce_loss(Tensor(z), z, np.zeros((1, 3)), 1.0)


def test_infonce_shape_mismatch():
    with pytest.raises(ShapeError):
        infonce_loss(Tensor(np.ones((2, 3))), np.ones((3, 3)), np.ones((1, 3)), 1.0)


@pytest.mark.parametrize("batch_negatives", [False, True])
def test_infonce_gradient(rng, batch_negatives):
    z = rng.normal(size=(3, 5))
    zp, q = rng.normal(size=(3, 5)), rng.normal(size=(6, 5))
    zt = Tensor(z.copy(), requires_grad=True)
    infonce_loss(zt, zp, q, 0.2, batch_negatives).backward()

    def f():
        return float(infonce_loss(Tensor(zt.data), zp, q, 0.2, batch_negatives).data)

    assert rel_err(zt.grad, numeric_grad(f, zt.data)) < 1e-4


def test_infonce_batch_negatives_adds_terms(rng):
    z = _unit(rng, 4, 8)
    zp, q = _unit(rng, 4, 8), _unit(rng, 5, 8)
    a = float(infonce_loss(Tensor(z), zp, q, 0.5).data)
    b = float(infonce_loss(Tensor(z), zp, q, 0.5, batch_negatives=True).data)
    assert b > a


def test_infonce_random_unit_vectors_tau_one(rng):
    n = 2048
    z, zp, q = _unit(rng, 64, 128), _unit(rng, 64, 128), _unit(rng, n, 128)
    loss = float(infonce_loss(Tensor(z), zp, q, 1.0).data)
    assert abs(loss - math.log(n + 1)) / math.log(n + 1) < 0.10


def test_infonce_random_unit_vectors_low_temperature(rng):
    # cosines of random unit vectors are ~N(0, 1/d); the log-partition picks up
    # E[exp(s/tau)] = exp(1/(2 d tau^2)), so the loss sits above ln(N+1) by that much
    n, d, tau = 2048, 128, 0.07
    z, zp, q = _unit(rng, 256, d), _unit(rng, 256, d), _unit(rng, n, d)
    loss = float(infonce_loss(Tensor(z), zp, q, tau).data)
    expected = math.log(n + 1) + 1 / (2 * d * tau**2)
    assert loss == pytest.approx(expected, rel=0.02)


# -------------------------------------------------------------- momentum


def test_momentum_update_exact():
    online = {"w": Tensor(np.ones(3))}
    target = {"w": Tensor(np.zeros(3))}
    momentum_update(online, target, 0.999)
    assert np.allclose(target["w"].data, 0.001, rtol=1e-12, atol=0)


def test_momentum_update_elementwise(rng):
    th, tp = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    target = {"w": Tensor(tp.copy())}
    momentum_update({"w": Tensor(th)}, target, 0.999)
    ref = 0.999 * tp + (1 - 0.999) * th
    assert np.abs(target["w"].data - ref).max() <= 4 * np.finfo(float).eps * np.abs(ref).max()


def test_momentum_fixed_point(rng):
    th = rng.normal(size=(3, 3))
    target = {"w": Tensor(th.copy())}
    momentum_update({"w": Tensor(th)}, target, 0.9)
    assert np.allclose(target["w"].data, th, rtol=0, atol=1e-15)


def test_momentum_geometric_decay():
    target = {"w": Tensor(np.array([0.0]))}
    for k in range(1, 51):
        momentum_update({"w": Tensor(np.array([1.0]))}, target, 0.9)
        assert abs(1 - target["w"].data[0]) == pytest.approx(0.9**k, rel=1e-10)


def test_momentum_shape_mismatch():
    with pytest.raises(ShapeError):
        momentum_update({"w": Tensor(np.ones(3))}, {"w": Tensor(np.ones(4))}, 0.5)
    with pytest.raises(ValueError):
        momentum_update({"w": Tensor(np.ones(3))}, {"v": Tensor(np.ones(3))}, 0.5)


# ----------------------------------------------------------------- queue


def test_queue_warm_start():
    q = NegativeQueue(16, 4, np.random.default_rng(0))
    assert len(q) == 0 and q.vectors().shape == (16, 4)
    assert np.allclose(np.linalg.norm(q.vectors(), axis=1), 1, atol=1e-6)


def test_queue_fifo_fill_and_eviction():
    q = NegativeQueue(4, 2, warm=False, dtype=np.float64)
    assert q.vectors().shape == (0, 2)
    rows = np.array([[1, 0], [0, 1], [-1, 0], [0, -1], [3, 4], [4, 3]], float)
    q.enqueue(rows[:2])
    assert len(q) == 2 and q.vectors().tolist() == [[1, 0], [0, 1]]
    q.enqueue(rows[2:])
    assert len(q) == 4
    # the two oldest rows were overwritten in place
    assert np.allclose(q.vectors(), [[0.6, 0.8], [0.8, 0.6], [-1, 0], [0, -1]])


def test_queue_length_after_k_batches(data):
    enc = tiny_encoder(data)
    cfg = TrainConfig(**SMALL)
    st = TrainState.create(enc, cfg)
    rng = np.random.default_rng(0)
    for k in range(1, 4):
        train_step(data[(k - 1) * 8:k * 8], st, cfg, 1e-3, rng)
        assert len(st.queue) == k * 8


# ------------------------------------------------------------- train step


def test_optimizer_never_touches_momentum(data):
    enc = tiny_encoder(data)
    st = TrainState.create(enc, TrainConfig(**SMALL))
    before = _digest(st.momentum_params)
    _, z = encode(enc.batch(data[:8]), enc.params, enc.cfg)
    ag.sum_(z).backward()
    adam_step(enc.params, st.adam, 1e-2)
    assert _digest(st.momentum_params) == before
    assert all(not p.requires_grad and p.grad is None for p in st.momentum_params.values())


def test_train_step_momentum_follows_online(data):
    enc = tiny_encoder(data)
    cfg = TrainConfig(**SMALL)
    st = TrainState.create(enc, cfg)
    rng = np.random.default_rng(1)
    train_step(data[:8], st, cfg, 1e-2, rng)  # online and momentum now differ
    prev = {k: v.data.copy() for k, v in st.momentum_params.items()}
    train_step(data[8:16], st, cfg, 1e-2, rng)
    for k, p in enc.params.items():
        ref = (np.float32(0.999) * prev[k] + np.float32(1 - 0.999) * p.data).astype(np.float32)
        assert np.array_equal(st.momentum_params[k].data, ref)
    # smooth drift: max |d theta'| <= (1 - m) max |theta - theta'| (theta after the Adam step)
    drift = max(np.abs(st.momentum_params[k].data - prev[k]).max() for k in prev)
    gap = max(np.abs(enc.params[k].data - prev[k]).max() for k in prev)
    # float32: allow a few ulps of the parameter magnitude
    ulp = np.finfo(np.float32).eps * max(np.abs(v).max() for v in prev.values())
    assert drift <= (1 - 0.999) * gap + 4 * ulp


def test_train_epoch_deterministic(data):
    def run():
        enc = tiny_encoder(data, seed=1)
        cfg = TrainConfig(**SMALL)
        st = TrainState.create(enc, cfg)
        loss = train_epoch(data, st, cfg)
        return loss, _digest(enc.params), st.queue.data.tobytes()

    assert run() == run()


def test_train_epoch_empty_errors(data):
    enc = tiny_encoder(data)
    cfg = TrainConfig(**SMALL)
    with pytest.raises(ValueError):
        train_epoch([], TrainState.create(enc, cfg), cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(temperature=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=64, queue_size=100)


# ------------------------------------------------------------------- fit


def test_fit_single_epoch(data, tmp_path):
    res = fit(data, tiny_encoder(data), TrainConfig(max_epochs=1, **SMALL), out_dir=tmp_path)
    assert res.epochs_run == 1 and not res.stopped_early
    assert sorted(p.name for p in tmp_path.iterdir()) == ["best.ckpt", "last.ckpt"]
    # after one epoch the best and the final state are the same checkpoint
    assert res.best_path.read_bytes() == res.last_path.read_bytes()


def test_fit_early_stops_on_rising_loss(data):
    cfg = TrainConfig(max_epochs=20, patience=2, **SMALL)
    seen = []

    def rising(epoch, _loss):
        seen.append(epoch)
        return float(epoch)

    res = fit(data[:16], tiny_encoder(data), cfg, monitor=rising)
    assert res.stopped_early and res.epochs_run == cfg.patience + 1
    assert seen == [0, 1, 2]


def test_fit_keeps_best_checkpoint(data, tmp_path):
    losses = [3.0, 1.0, 2.0]
    cfg = TrainConfig(max_epochs=3, patience=5, **SMALL)
    res = fit(data[:16], tiny_encoder(data), cfg, out_dir=tmp_path, monitor=lambda e, _: losses[e])
    best, _ = TrainState.load(res.best_path)
    last, _ = TrainState.load(res.last_path)
    assert (best.epoch, best.best_loss) == (2, 1.0)
    assert last.epoch == 3 and last.bad_epochs == 1


def test_fit_identical_seeds_bit_identical(data, tmp_path):
    cfg = TrainConfig(max_epochs=2, **SMALL)
    fit(data, tiny_encoder(data), cfg, out_dir=tmp_path / "a")
    fit(data, tiny_encoder(data), cfg, out_dir=tmp_path / "b")
    for name in ("best.ckpt", "last.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fit_resume_matches_uninterrupted(data, tmp_path):
    full = fit(data, tiny_encoder(data), TrainConfig(max_epochs=3, **SMALL), out_dir=tmp_path / "full")
    fit(data, tiny_encoder(data), TrainConfig(max_epochs=1, **SMALL), out_dir=tmp_path / "part")
    res = fit(data, None, TrainConfig(max_epochs=3, **SMALL), out_dir=tmp_path / "resumed",
              resume=tmp_path / "part" / "last.ckpt")
    assert res.last_path.read_bytes() == full.last_path.read_bytes()
    assert res.best_path.read_bytes() == full.best_path.read_bytes()


def test_fit_resume_rejects_changed_config(data, tmp_path):
    fit(data[:16], tiny_encoder(data), TrainConfig(max_epochs=1, **SMALL), out_dir=tmp_path)
    with pytest.raises(ValueError):
        fit(data[:16], None, TrainConfig(max_epochs=2, lr=0.01, **SMALL), resume=tmp_path / "last.ckpt")


def test_train_state_roundtrip(data, tmp_path):
    enc = tiny_encoder(data)
    cfg = TrainConfig(**SMALL)
    st = TrainState.create(enc, cfg)
    train_step(data[:8], st, cfg, 1e-3, np.random.default_rng(0))
    st.save(tmp_path / "s.ckpt", cfg)
    back, cfg2 = TrainState.load(tmp_path / "s.ckpt")
    assert cfg2 == cfg and back.step == 1 and len(back.queue) == 8
    assert back.queue.data.tobytes() == st.queue.data.tobytes()
    assert _digest(back.momentum_params) == _digest(st.momentum_params)
    assert all(np.array_equal(back.adam.m[k], st.adam.m[k]) for k in st.adam.m)


@pytest.mark.slow
def test_training_reduces_loss():
    trajs = generate(SynthConfig(n=500, seed=11))
    enc = tiny_encoder(trajs, d_t=32, h=4, h_s=4, l_max=200)
    # the queue is small enough to be flushed of its random warm-start vectors
    # within the first epoch, otherwise epoch 1 is scored against easy negatives
    res = fit(trajs, enc, TrainConfig(max_epochs=4, batch_size=32, queue_size=64, seed=0))
    assert res.state.history[-1] < res.state.history[0]
