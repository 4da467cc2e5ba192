import math

import numpy as np
import pytest

from docdiff.data import make_pair
from docdiff.numerics import Tensor
from docdiff.trainer import (
    MAGIC,
    CheckpointError,
    NonFiniteLossError,
    TrainConfig,
    decode_checkpoint,
    ema_decay_at,
    ema_update,
    encode_checkpoint,
    load_checkpoint,
    new_training_state,
    save_checkpoint,
    train,
    train_step,
)

TINY = dict(base_channels=4, channel_multipliers="1,2", time_embed_dim=8, batch=2, crop=16, eval_every=2)


def tiny(**overrides):
    return TrainConfig(**{**TINY, **overrides})


@pytest.fixture(scope="module")
def corpus():
    return [make_pair("blur", 0, i, 32)[:2] for i in range(6)]


def cp_grad_norm(bundle):
    total = 0.0
    for p in bundle.cp_params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def live_outputs(state, seed=0):
    rng = np.random.default_rng(seed)
    for params in (state.bundle.cp_params, state.bundle.den_params):
        params["out.w"].data[...] = rng.standard_normal(params["out.w"].shape).astype(np.float32) * 0.1
    return state


def test_perfect_nets_have_zero_loss():
    state = new_training_state(tiny())
    x_gt = np.zeros((2, 1, 16, 16), np.float32)  # zero-initialised nets predict x_c = 0 and x_res_hat = 0
    y = np.random.default_rng(0).random(x_gt.shape).astype(np.float32)
    report = train_step(state.bundle, None, (y, x_gt), state.config, state.rng)
    assert all(v == 0.0 for v in report.values())


def test_condition_path_carries_no_gradient():
    state = live_outputs(new_training_state(tiny()))
    rng = np.random.default_rng(1)
    batch = (rng.random((2, 1, 16, 16)).astype(np.float32), rng.random((2, 1, 16, 16)).astype(np.float32))
    t, eps = np.array([30, 70]), rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
    train_step(state.bundle, None, batch, state.config, state.rng, t=t, eps=eps,
               sever_residual=True, pixel_losses=False)
    assert cp_grad_norm(state.bundle) == 0.0
    assert any(p.grad is not None and np.any(p.grad) for p in state.bundle.den_params.values())


def test_residual_path_carries_gradient():
    state = live_outputs(new_training_state(tiny()))
    rng = np.random.default_rng(1)
    batch = (rng.random((2, 1, 16, 16)).astype(np.float32), rng.random((2, 1, 16, 16)).astype(np.float32))
    t, eps = np.array([30, 70]), rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
    train_step(state.bundle, None, batch, state.config, state.rng, t=t, eps=eps, pixel_losses=False)
    assert cp_grad_norm(state.bundle) > 0.0


def test_detach_target_keeps_only_the_noised_path():
    state = live_outputs(new_training_state(tiny(detach_target=True)))
    rng = np.random.default_rng(2)
    batch = (rng.random((2, 1, 16, 16)).astype(np.float32), rng.random((2, 1, 16, 16)).astype(np.float32))
    train_step(state.bundle, None, batch, state.config, state.rng, pixel_losses=False)
    assert cp_grad_norm(state.bundle) > 0.0  # still flows through x_t


def test_no_freqsep_zeroes_filtered_terms(corpus):
    state = new_training_state(tiny(freqsep=False))
    rng = np.random.default_rng(3)
    y, gt = (np.stack(a) for a in zip(*[(p[0][:, :16, :16], p[1][:, :16, :16]) for p in corpus[:2]]))
    report = train_step(state.bundle, None, (y, gt), state.config, rng)
    assert report["low"] == 0.0 and report["high"] == 0.0
    assert report["total"] == pytest.approx(0.5 * report["pixel"] + report["dm"], rel=1e-12)


def test_timesteps_are_drawn_per_sample(monkeypatch):
    import docdiff.trainer as tr
    seen = []
    real = tr.q_sample

    def spy(x0, t, eps, s):
        seen.append(np.array(t))
        return real(x0, t, eps, s)

    monkeypatch.setattr(tr, "q_sample", spy)
    state = new_training_state(tiny(batch=4))
    y = np.zeros((4, 1, 16, 16), np.float32)
    for _ in range(3):
        train_step(state.bundle, None, (y, y), state.config, state.rng)
    assert all(t.shape == (4,) for t in seen)
    draws = state.rng.integers(1, 101, size=10_000)  # the same call the step makes
    assert set(draws.tolist()) == set(range(1, 101))


def test_non_finite_loss_is_reported():
    state = new_training_state(tiny())
    y = np.full((2, 1, 16, 16), np.nan, np.float32)
    with pytest.raises(NonFiniteLossError) as err:
        train_step(state.bundle, state.optimizer, (np.zeros_like(y), y), state.config, state.rng)
    assert set(err.value.terms) == {"pixel", "low", "dm", "high", "total"}


def test_ema_examples():
    state = new_training_state(tiny())
    b = state.bundle
    name = next(iter(b.ema))
    live = b.named_parameters()[name]
    before = b.ema[name].copy()
    ema_update(b, 0.999)  # shadow == live
    assert b.ema[name].tobytes() == before.tobytes()

    live.data[...] = 1.0
    b.ema[name][...] = 0.0
    ema_update(b, 0.999)
    np.testing.assert_allclose(b.ema[name], 0.001, rtol=1e-4)
    ema_update(b, 1.0)  # decay -> 1 limit
    np.testing.assert_allclose(b.ema[name], 0.001, rtol=1e-4)
    with pytest.raises(ValueError):
        ema_update(b, 0.0)


def test_ema_converges_geometrically_when_frozen():
    state = new_training_state(tiny())
    b = state.bundle
    name = next(iter(b.ema))
    b.named_parameters()[name].data[...] = 1.0
    b.ema[name][...] = 0.0
    for _ in range(50):
        ema_update(b, 0.9)
    np.testing.assert_allclose(b.ema[name], 1 - 0.9 ** 50, rtol=1e-4)


def test_ema_warmup():
    assert ema_decay_at(0, 0.999) == pytest.approx(0.1)
    assert ema_decay_at(10_000, 0.999) == 0.999


def test_training_log_and_checkpoint(tmp_path, corpus):
    state = new_training_state(tiny(iters=4))
    train(state, corpus, log_path=tmp_path / "log.csv", checkpoint_path=tmp_path / "ck.ddcp")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iter,L_pixel,L_low,L_DM,L_high,L_total"
    assert [line.split(",")[0] for line in lines[1:]] == ["2", "4"]
    assert (tmp_path / "ck.ddcp").read_bytes()[:4] == MAGIC


def test_checkpoint_round_trip_is_byte_exact(tmp_path, corpus):
    state = new_training_state(tiny(iters=3))
    train(state, corpus)
    save_checkpoint(state, tmp_path / "a.ddcp")
    save_checkpoint(load_checkpoint(tmp_path / "a.ddcp"), tmp_path / "b.ddcp")
    assert (tmp_path / "a.ddcp").read_bytes() == (tmp_path / "b.ddcp").read_bytes()
    tensors, config = decode_checkpoint((tmp_path / "a.ddcp").read_bytes())
    prefixes = {name.split(".")[0] if not name.startswith("opt.") else name[:6] for name in tensors}
    assert prefixes == {"cp", "den", "ema", "opt.m.", "opt.v."}
    assert config["iteration"] == "3"


def test_resume_is_bit_identical(tmp_path, corpus):
    straight = new_training_state(tiny(iters=6))
    train(straight, corpus)

    first = new_training_state(tiny(iters=6))
    train(first, corpus, iters=3, checkpoint_path=tmp_path / "mid.ddcp")
    resumed = load_checkpoint(tmp_path / "mid.ddcp")
    assert resumed.iteration == 3
    train(resumed, corpus)

    a = straight.bundle.named_parameters()
    b = resumed.bundle.named_parameters()
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert all(straight.bundle.ema[k].tobytes() == resumed.bundle.ema[k].tobytes() for k in a)


def test_encoding_layout():
    buf = encode_checkpoint({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"k": "v"})
    assert buf[:4] == b"DDCP"
    assert buf[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert buf[12:14] == (1).to_bytes(2, "little") and buf[14:15] == b"w"
    assert buf[15] == 2
    assert buf[16:24] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(buf[24:48], "<f4").tolist() == [0, 1, 2, 3, 4, 5]
    assert buf[48:52] == (4).to_bytes(4, "little") and buf[52:] == b"k=v\n"


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b"XXXX" + b[4:], 0),
    (lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:], 4),
    (lambda b: b[:30], 24),
])
def test_bad_checkpoints(tmp_path, mutate, offset):
    good = encode_checkpoint({"w": np.zeros((2, 3), np.float32)}, {})
    with pytest.raises(CheckpointError) as err:
        decode_checkpoint(mutate(good))
    assert err.value.offset == offset


def test_failed_load_leaves_no_state(tmp_path):
    path = tmp_path / "bad.ddcp"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_config_parsing():
    cfg = TrainConfig.from_mapping({"lr": "1e-3", "augment": "false", "channel_multipliers": "1,2"})
    assert cfg.lr == 1e-3 and cfg.augment is False and cfg.multipliers == (1, 2)
    with pytest.raises(KeyError):
        TrainConfig.from_mapping({"learning_rate": "1"})
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    assert TrainConfig().beta0 == 2.0 and TrainConfig().beta1 == 0.5 and TrainConfig().T == 100


def test_parameters_stay_finite(corpus):
    state = new_training_state(tiny(iters=5))
    train(state, corpus)
    assert all(np.all(np.isfinite(p.data)) for p in state.bundle.named_parameters().values())


def test_one_gradient_writer(corpus):
    state = new_training_state(tiny(iters=2))
    before = {k: p.data.copy() for k, p in state.bundle.named_parameters().items()}
    rng = np.random.default_rng(0)
    y = rng.random((2, 1, 16, 16)).astype(np.float32)
    train_step(state.bundle, None, (y, y), state.config, state.rng)  # no optimizer: nothing moves
    assert all(np.array_equal(before[k], p.data) for k, p in state.bundle.named_parameters().items())


def test_tensor_leaves_are_the_live_parameters():
    state = new_training_state(tiny())
    assert all(isinstance(p, Tensor) and p.requires_grad for p in state.bundle.named_parameters().values())
