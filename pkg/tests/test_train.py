import math
import threading
import time

import numpy as np
import pytest

from vesselforge import augment, data, net
from vesselforge import tensor as T
from vesselforge import train as tr

SMALL = net.ModelConfig(encoder_stages=((8, 2), (16, 2)), decoder_stages=(16, 8),
                        atrous_rates=(1, 2, 3, 4, 5, 6), msb_branch_channels=4, msb_out_channels=8)


def _probs(p1):
    p1 = np.asarray(p1, dtype=np.float64)
    return T.Tensor(np.stack([1 - p1, p1], axis=1))


def test_uniform_probs_give_ln2():
    loss = tr.loss_ce(_probs(np.full((2, 3, 3), 0.5)), np.random.default_rng(0).integers(0, 2, (2, 3, 3)))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_perfect_prediction_hits_clamp_bound():
    labels = np.random.default_rng(1).integers(0, 2, (1, 4, 4))
    loss = tr.loss_ce(_probs(labels.astype(float)), labels)
    assert 0 <= loss.item() <= -math.log(1 - 1e-7) + 1e-15


def test_masked_loss_equals_subset_loss():
    rng = np.random.default_rng(2)
    p1 = rng.uniform(0.05, 0.95, (1, 4, 6))
    labels = rng.integers(0, 2, (1, 4, 6))
    fov = np.zeros((1, 4, 6))
    fov[..., :3] = 1
    masked = tr.loss_ce(_probs(p1), labels, fov).item()
    subset = tr.loss_ce(_probs(p1[..., :3]), labels[..., :3]).item()
    assert masked == pytest.approx(subset, rel=1e-12)
    want = -np.mean(np.log(np.where(labels[..., :3] == 1, p1[..., :3], 1 - p1[..., :3])))
    assert masked == pytest.approx(want, rel=1e-12)


def test_loss_errors():
    with pytest.raises(ValueError, match="empty field of view"):
        tr.loss_ce(_probs(np.full((1, 2, 2), 0.5)), np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))
    with pytest.raises(T.ShapeError):
        tr.loss_ce(_probs(np.full((1, 2, 2), 0.5)), np.zeros((1, 2, 3)))


def test_softmax_output_uses_logit_path_with_same_value():
    rng = np.random.default_rng(4)
    z = rng.normal(0, 2, (2, 2, 5, 5))
    labels = rng.integers(0, 2, (2, 5, 5))
    fov = rng.integers(0, 2, (2, 5, 5))
    fov[0, 0, 0] = 1
    fused = tr.loss_ce(T.softmax_channel(T.Tensor(z, requires_grad=True)), labels, fov)
    plain = tr.loss_ce(T.Tensor(T.softmax_channel(z).data), labels, fov)
    assert fused.op == "softmax_nll"
    assert fused.item() == pytest.approx(plain.item(), rel=1e-12)


def test_saturated_wrong_pixel_keeps_gradient():
    z = T.Tensor(np.array([[[[60.0]], [[-60.0]]]]), requires_grad=True)  # certain background
    loss = tr.loss_ce(T.softmax_channel(z), np.ones((1, 1, 1)))
    assert loss.item() == pytest.approx(-math.log(1e-7))
    T.backward(loss)
    np.testing.assert_allclose(z.grad[0, :, 0, 0], [1.0, -1.0])


def test_logit_path_clamp_bound_for_perfect_prediction():
    z = T.Tensor(np.array([[[[-80.0]], [[80.0]]]]), requires_grad=True)
    loss = tr.loss_ce(T.softmax_channel(z), np.ones((1, 1, 1)))
    assert 0 <= loss.item() <= -math.log(1 - 1e-7) + 1e-15


def _params_with(values):
    return net.ModelParams(SMALL, {k: T.Tensor(np.asarray(v, dtype=np.float32), requires_grad=True)
                                   for k, v in values.items()})


@pytest.mark.parametrize("g", [0.5, 3.0, -40.0])
def test_adam_first_step_is_lr_sized(g):
    params = _params_with({"w": np.zeros(4)})
    state = tr.AdamState.zeros_like(params)
    cfg = tr.TrainConfig(lr=1e-3)
    tr.adam_step(params, {"w": np.full(4, g, dtype=np.float32)}, state, cfg)
    # m_hat = g and v_hat = g^2 after one step
    want = -cfg.lr * g / (abs(g) + cfg.eps)
    np.testing.assert_allclose(params.tensors["w"].data, want, rtol=1e-5)
    assert state.t == 1


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(3)
    grads = rng.standard_normal((5, 3))
    params = _params_with({"w": np.ones(3)})
    state = tr.AdamState.zeros_like(params)
    cfg = tr.TrainConfig(lr=0.01, beta1=0.8, beta2=0.95, eps=1e-6, amsgrad=False)
    w, m, v = np.ones(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, start=1):
        tr.adam_step(params, {"w": g.astype(np.float32)}, state, cfg)
        g = g.astype(np.float32).astype(np.float64)
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        w = w - 0.01 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.95**t)) + 1e-6)
    np.testing.assert_allclose(params.tensors["w"].data, w, rtol=1e-5)


def test_amsgrad_matches_reference_loop():
    grads = [np.array([3.0, -1.0, 0.5]), np.array([0.01, -0.02, 2.0]), np.array([0.001, 0.0, -0.5])]
    params = _params_with({"w": np.ones(3)})
    state = tr.AdamState.zeros_like(params)
    cfg = tr.TrainConfig(lr=0.01, beta1=0.8, beta2=0.95, eps=1e-6)
    w, m, v, vmax = np.ones(3), np.zeros(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, start=1):
        tr.adam_step(params, {"w": g.astype(np.float32)}, state, cfg)
        g = g.astype(np.float32).astype(np.float64)
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        vmax = np.maximum(vmax, v)
        w = w - 0.01 * (m / (1 - 0.8**t)) / (np.sqrt(vmax / (1 - 0.95**t)) + 1e-6)
    np.testing.assert_allclose(params.tensors["w"].data, w, rtol=1e-5)


def test_amsgrad_steps_shrink_with_gradient():
    moved = {}
    for ams in (False, True):
        params = _params_with({"w": np.zeros(1)})
        state = tr.AdamState.zeros_like(params)
        cfg = tr.TrainConfig(lr=1e-3, amsgrad=ams)
        for _ in range(20):
            tr.adam_step(params, {"w": np.ones(1, dtype=np.float32)}, state, cfg)
        small = {"w": np.full(1, 1e-4, dtype=np.float32)}
        for _ in range(5000):
            tr.adam_step(params, small, state, cfg)
        before = params.tensors["w"].data.copy()
        for _ in range(1000):
            tr.adam_step(params, small, state, cfg)
        moved[ams] = float(abs(params.tensors["w"].data - before)[0])
    # plain Adam renormalises the small gradient back to full-size steps
    assert moved[True] < 0.2 * moved[False]


def test_adam_zero_grad_keeps_params():
    params = _params_with({"w": [1.0, -2.0]})
    state = tr.AdamState.zeros_like(params)
    tr.adam_step(params, {"w": np.zeros(2, dtype=np.float32)}, state, tr.TrainConfig())
    np.testing.assert_array_equal(params.tensors["w"].data, [1.0, -2.0])
    assert state.t == 1


def test_adam_nan_names_parameter_and_leaves_state():
    params = _params_with({"enc0.conv0.w": [1.0], "head.b": [2.0]})
    state = tr.AdamState.zeros_like(params)
    grads = {"enc0.conv0.w": np.ones(1, dtype=np.float32), "head.b": np.array([np.nan], dtype=np.float32)}
    with pytest.raises(tr.TrainingError, match="head.b"):
        tr.adam_step(params, grads, state, tr.TrainConfig())
    assert state.t == 0 and params.tensors["enc0.conv0.w"].data[0] == 1.0


def test_exp_schedule_is_default_and_geometric():
    cfg = tr.TrainConfig(lr=2e-3)
    assert cfg.lr_schedule == "exp"
    assert tr.scheduled_lr(cfg, 0, 100) == 2e-3
    assert tr.scheduled_lr(cfg, 50, 100) == pytest.approx(2e-4)
    assert tr.scheduled_lr(cfg, 100, 100) == pytest.approx(2e-5)
    assert tr.scheduled_lr(cfg, 150, 100) == pytest.approx(2e-5)
    lrs = [tr.scheduled_lr(cfg, t, 100) for t in range(101)]
    ratios = [b / a for a, b in zip(lrs, lrs[1:])]
    np.testing.assert_allclose(ratios, 0.01 ** 0.01)


def test_cosine_schedule_anneals_to_zero():
    cfg = tr.TrainConfig(lr=2e-3, lr_schedule="cosine")
    assert tr.scheduled_lr(cfg, 0, 100) == 2e-3
    assert tr.scheduled_lr(cfg, 50, 100) == pytest.approx(1e-3)
    assert tr.scheduled_lr(cfg, 100, 100) == pytest.approx(0.0, abs=1e-18)
    lrs = [tr.scheduled_lr(cfg, t, 100) for t in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert tr.scheduled_lr(tr.TrainConfig(lr=2e-3, lr_schedule="constant"), 70, 100) == 2e-3


def test_adam_lr_override():
    params = _params_with({"w": np.zeros(2)})
    tr.adam_step(params, {"w": np.ones(2, dtype=np.float32)}, tr.AdamState.zeros_like(params),
                 tr.TrainConfig(lr=1e-3), lr=1e-2)
    np.testing.assert_allclose(params.tensors["w"].data, -1e-2, rtol=1e-5)


def test_train_config_validation():
    for bad in ({"lr": 0}, {"beta1": 1.0}, {"beta2": -0.1}, {"max_iters": 0}, {"lr_schedule": "step"},
                {"amsgrad": "yes"}):
        with pytest.raises(ValueError):
            tr.TrainConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        tr.TrainConfig.from_dict({"momentum": 0.9})


def _patch_set(n=4, size=16, seed=0):
    sample = data.synth_phantom(64, 64, seed=seed)
    return tr.FixedPatchSet(augment.sample_patches(sample, n, seed=seed, size=size))


def test_batches_are_pure_functions_of_iteration():
    stream = tr.PatchStream(data.synth_dataset(2, size=64, seed=1), size=16)
    a, b = stream.batch(5, 4, 9), stream.batch(5, 4, 9)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert a.images.shape == (4, 3, 16, 16) and a.images.dtype == np.float32
    assert stream.batch(6, 4, 9).images.tobytes() != a.images.tobytes()


def test_fixed_set_visits_every_patch_each_epoch():
    ds = _patch_set(4)
    centers = set()
    for it in range(2):
        centers |= {tuple(np.round(b, 6)) for b in ds.batch(it, 2, 0).images[:, 0, 0, :2]}
    assert len(centers) == 4


def test_prefetch_bounds_batches_in_flight():
    produced, consumed, worst = [0], [0], [0]
    lock = threading.Lock()

    class Slow:
        def __len__(self):
            return 100

        def batch(self, it, bs, seed):
            with lock:
                produced[0] += 1
                worst[0] = max(worst[0], produced[0] - consumed[0])
            return it

    cfg = tr.TrainConfig(batch_size=1)
    got = []
    for item in tr._prefetch(Slow(), 0, 20, cfg):
        with lock:
            consumed[0] += 1
        time.sleep(0.005)
        got.append(item)
    assert got == list(range(20))
    assert worst[0] <= tr.PREFETCH_DEPTH


def test_prefetch_propagates_errors():
    class Broken:
        def __len__(self):
            return 10

        def batch(self, it, bs, seed):
            raise OSError("disk gone")

    with pytest.raises(OSError, match="disk gone"):
        list(tr._prefetch(Broken(), 0, 3, tr.TrainConfig()))


def test_train_writes_log_and_checkpoints(tmp_path):
    params = net.build(SMALL, seed=0)
    cfg = tr.TrainConfig(max_iters=4, batch_size=2, checkpoint_every=2, max_epochs=100)
    res = tr.train(params, _patch_set(), cfg, out_dir=tmp_path)
    assert [r[0] for r in res.log] == [0, 1, 2, 3]
    names = sorted(p.name for p in tmp_path.glob("*.vslf"))
    assert names == ["ckpt_000002.vslf", "ckpt_000004.vslf", "final.vslf"]
    rows = (tmp_path / "train_log.csv").read_text().splitlines()
    assert rows[0] == "iter,loss,seconds" and len(rows) == 5
    assert (tmp_path / "final.vslf").read_bytes() == (tmp_path / "ckpt_000004.vslf").read_bytes()


def test_epoch_cap_stops_training():
    cfg = tr.TrainConfig(max_iters=100, max_epochs=2, batch_size=2)
    res = tr.train(net.build(SMALL), _patch_set(4), cfg, prefetch=False)
    assert len(res.log) == 4


def test_training_is_deterministic(tmp_path):
    cfg = tr.TrainConfig(max_iters=10, batch_size=2, max_epochs=100)
    blobs = []
    for run in range(2):
        params = net.build(SMALL, seed=1)
        tr.train(params, _patch_set(), cfg, out_dir=tmp_path / str(run))
        blobs.append((tmp_path / str(run) / "final.vslf").read_bytes())
    assert blobs[0] == blobs[1]


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = tr.TrainConfig(max_iters=6, batch_size=2, checkpoint_every=3, max_epochs=100)
    full = net.build(SMALL, seed=2)
    tr.train(full, _patch_set(), cfg, out_dir=tmp_path / "full")

    part = net.build(SMALL, seed=2)
    tr.train(part, _patch_set(), cfg, out_dir=tmp_path / "part", stop_at=3)
    assert not (tmp_path / "part" / "final.vslf").exists()
    params, state, cfg2 = tr.resume_from(tmp_path / "part" / "ckpt_000003.vslf")
    assert state.t == 3 and cfg2 == cfg
    tr.train(params, _patch_set(), cfg2, out_dir=tmp_path / "part", state=state)
    assert (tmp_path / "part" / "final.vslf").read_bytes() == (tmp_path / "full" / "final.vslf").read_bytes()
    assert len((tmp_path / "part" / "train_log.csv").read_text().splitlines()) == 7


def test_checkpoint_io_failure_surfaces(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        tr.train(net.build(SMALL), _patch_set(), tr.TrainConfig(max_iters=1, batch_size=2), out_dir=blocker)


def test_pixel_accuracy_counts_fov_only():
    params = net.build(SMALL)
    batch = _patch_set().batch(0, 2, 0)
    batch.fov[:] = 0
    batch.fov[:, 0, 0] = 1
    acc = tr.pixel_accuracy(params, batch)
    assert acc in (0.0, 0.5, 1.0)
