"""End-to-end acceptance gate for the toolkit.

Each criterion below is one test; the conftest summary hook prints one
PASS/FAIL line per criterion at the end of the run. The phantom
end-to-end test trains real models and takes a few minutes; everything
else finishes in seconds.
"""
import json
import time
import warnings

import numpy as np
import pytest

from vhskit.data import load_dataset
from vhskit.errors import DegenerateVertebraError
from vhskit.geometry import HeartClass, calc_vhs, classify, vhs_from_flat
from vhskit.model import (ForwardMode, KeypointRegressor, LayerSpec,
                          ModelConfig)
from vhskit.optim import AdamWState, CosineSchedule, adamw_step
from vhskit.phantoms import make_phantom_bundle
from vhskit.pseudo import (McConfig, McPoolStats, mc_predict,
                           run_pseudo_rounds, select_confident)
from vhskit.rng import derive_rng
from vhskit.training import (POINTS_WEIGHT, SOFT_WEIGHT, VHS_WEIGHT,
                             SoftLabelStore, TrainingData, composite_loss_batch,
                             evaluate, train_epoch)

from conftest import TINY_CONFIG, make_points


def _dyadic_points(ab: float, cd: float, ef: float) -> np.ndarray:
    """Axis-aligned keypoints whose three segment lengths are exact floats."""
    return np.array([
        [0.25, 0.5], [0.25 + ab, 0.5],
        [0.375, 0.25], [0.375, 0.25 + cd],
        [0.125, 0.125], [0.125 + ef, 0.125],
    ])


def test_criterion_1_vhs_algebra():
    start = time.perf_counter()

    assert calc_vhs(_dyadic_points(0.25, 0.25, 0.375)) == pytest.approx(8.0, rel=1e-12)
    assert calc_vhs(_dyadic_points(0.25, 0.5, 0.375)) == pytest.approx(12.0, rel=1e-12)
    degenerate = _dyadic_points(0.25, 0.25, 0.375)
    degenerate[5] = degenerate[4]
    with pytest.raises(DegenerateVertebraError):
        calc_vhs(degenerate)

    rng = derive_rng(2026, "invariance")
    for _ in range(1000):
        base = rng.uniform(-1.0, 1.0, (6, 2))
        for a, b in ((0, 1), (2, 3), (4, 5)):
            direction = rng.uniform(-1.0, 1.0, 2)
            direction /= np.hypot(direction[0], direction[1])
            base[b] = base[a] + direction * rng.uniform(0.05, 2.0)
        reference = calc_vhs(base)

        theta = rng.uniform(0.0, 2.0 * np.pi)
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        scale = rng.uniform(0.5, 2.0)
        shift = rng.uniform(-3.0, 3.0, 2)
        moved = scale * (base @ rot.T) + shift
        assert calc_vhs(moved) == pytest.approx(reference, rel=1e-12)

    assert time.perf_counter() - start < 1.0


def test_criterion_2_class_boundaries():
    assert classify(8.2 - 1e-9) == HeartClass.SMALL == 0
    assert classify(8.2) == HeartClass.NORMAL == 1
    assert classify(10.0) == HeartClass.NORMAL == 1
    assert classify(10.0 + 1e-9) == HeartClass.LARGE == 2


def _margins_ok(preds: np.ndarray, labels: np.ndarray) -> bool:
    """True when every coordinate and the score differences sit away from
    the loss kinks and the predicted vertebral segment is well-sized."""
    if np.min(np.abs(preds - labels)) < 1e-3:
        return False
    pts = preds.reshape(-1, 6, 2)
    ef = np.hypot(pts[:, 4, 0] - pts[:, 5, 0], pts[:, 4, 1] - pts[:, 5, 1])
    if ef.min() < 0.05:
        return False
    return all(abs(vhs_from_flat(p) - vhs_from_flat(l)) > 1e-3
               for p, l in zip(preds, labels))


def test_criterion_3_gradient_correctness():
    start = time.perf_counter()
    templates = [
        (LayerSpec("conv", 3), LayerSpec("dense", 6)),
        (LayerSpec("conv", 2), LayerSpec("conv", 4), LayerSpec("dense", 4)),
        (LayerSpec("conv", 4),),
    ]
    h = 1e-6
    worst = 0.0
    for i in range(20):
        size = 8 if i % 2 == 0 else 16
        config = ModelConfig(input_size=size, hidden=templates[i % 3],
                             dropout_rate=0.0)
        data_rng = derive_rng(i, "gradcheck-data")
        images = data_rng.random((2, size, size))
        labels = np.stack([
            make_points(float(data_rng.uniform(7.2, 10.8)),
                        ef=float(data_rng.uniform(0.15, 0.35))).ravel()
            for _ in range(2)
        ])

        for attempt in range(50):
            model = KeypointRegressor(config, rng=derive_rng(i, "gradcheck", attempt))
            preds = model.forward(images, ForwardMode.EVAL)
            if _margins_ok(preds, labels):
                break
        else:
            pytest.fail(f"model {i}: no kink-free start found")

        preds = model.forward(images, ForwardMode.TRAIN)
        _, grad = composite_loss_batch(preds, labels, epoch=5)
        analytic = model.backward(grad / 2.0)

        theta = model.params.copy()
        coords = data_rng.choice(model.n_params, 30, replace=False)
        for j in coords:
            for sign, bucket in ((+1.0, 0), (-1.0, 1)):
                shifted = theta.copy()
                shifted[j] += sign * h
                model.set_params(shifted)
                out = model.forward(images, ForwardMode.EVAL)
                breakdown, _ = composite_loss_batch(out, labels, epoch=5)
                if bucket == 0:
                    f_plus = breakdown.total
                else:
                    f_minus = breakdown.total
            model.set_params(theta)
            numeric = (f_plus - f_minus) / (2.0 * h)
            scale = max(abs(analytic[j]), abs(numeric))
            if scale > 1e-6:
                rel = abs(analytic[j] - numeric) / scale
                worst = max(worst, rel)
                assert rel < 1e-4, f"model {i} param {j}: rel err {rel:.2e}"
            else:
                assert abs(analytic[j] - numeric) < 1e-7

    elapsed = time.perf_counter() - start
    print(f"\ngradcheck: 20 models, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert elapsed < 30.0


def test_criterion_4_mc_statistics():
    start = time.perf_counter()

    model = KeypointRegressor(TINY_CONFIG, rng=derive_rng(40, "init"))
    image = derive_rng(41, "image").random((16, 16))
    stats, passes = mc_predict(model, image, 20, seed=777, return_passes=True)
    assert passes.shape == (20, 12)

    mu = passes.sum(axis=0) / 20.0
    sigma = np.sqrt(((passes - mu) ** 2).sum(axis=0) / 20.0)
    assert np.allclose(stats.mu, mu, rtol=0.0, atol=1e-12)
    assert np.allclose(stats.sigma, sigma, rtol=0.0, atol=1e-12)

    for k in (0, 7, 19):
        manual = model.forward(image, ForwardMode.MC,
                               sample_rngs=[derive_rng(777, "pass", k)])
        assert np.allclose(passes[k], manual, rtol=0.0, atol=1e-12)

    dry = ModelConfig(input_size=16, hidden=TINY_CONFIG.hidden, dropout_rate=0.0)
    dry_model = KeypointRegressor(dry, rng=derive_rng(42, "init"))
    with pytest.warns(UserWarning):
        dry_stats = mc_predict(dry_model, image, 20, seed=5)
    assert np.all(dry_stats.sigma == 0.0)

    pool_rng = derive_rng(43, "pools")
    tau = 0.005
    for _ in range(100):
        n = 40
        max_sigma = pool_rng.choice(
            [tau, tau / 2, tau * 2, float(pool_rng.uniform(0.0, 0.01))], n)
        stats = McPoolStats([str(i) for i in range(n)], np.zeros((n, 12)),
                            np.zeros((n, 12)), max_sigma)
        assert select_confident(stats, tau) == [
            i for i in range(n) if max_sigma[i] < tau]

    assert time.perf_counter() - start < 10.0


def test_criterion_5_loss_gating():
    start = time.perf_counter()

    assert POINTS_WEIGHT == 10.0 and VHS_WEIGHT == 0.1 and SOFT_WEIGHT == 1.0

    labels = np.stack([make_points(8.0).ravel(), make_points(9.5).ravel()])
    preds = labels + 0.125
    soft = labels + 0.25
    for epoch in (1, 5, 10):
        plain, plain_grad = composite_loss_batch(preds, labels, epoch)
        gated, gated_grad = composite_loss_batch(preds, labels, epoch, soft=soft)
        assert gated.soft_term == 0.0
        assert gated.total == plain.total
        assert np.array_equal(plain_grad, gated_grad)
    live, live_grad = composite_loss_batch(preds, labels, 11, soft=soft)
    assert live.soft_term > 0.0
    assert not np.array_equal(live_grad, plain_grad)

    bundle = make_phantom_bundle(n_train=24, n_valid=2, n_test=2,
                                 n_unlabeled=10, side=32, seed=5)
    labeled = TrainingData.from_dataset(bundle, "train", 32)
    pool = TrainingData.from_dataset(bundle, "unlabeled", 32, require_labels=False)
    config = ModelConfig(input_size=32)
    epochs, seed = 12, 7
    schedule = CosineSchedule(1e-3, 1e-6, epochs)

    follower = KeypointRegressor(config, rng=derive_rng(seed, "init"))
    run_pseudo_rounds(follower, labeled, pool,
                      McConfig(k_passes=5, lam=0.0),
                      epochs=epochs, opt_state=AdamWState.init(follower.n_params),
                      schedule=schedule, batch_size=8, seed=seed)

    reference = KeypointRegressor(config, rng=derive_rng(seed, "init"))
    opt = AdamWState.init(reference.n_params)
    store = SoftLabelStore()
    for epoch in range(1, epochs + 1):
        train_epoch(reference, labeled, opt, schedule, epoch, store,
                    batch_size=8, seed=seed)
    assert np.array_equal(follower.params, reference.params)

    assert time.perf_counter() - start < 120.0


def test_criterion_6_optimizer_algebra():
    start = time.perf_counter()

    params = np.array([1.0, -0.5, 0.25])
    grad = np.array([0.5, 0.2, -0.1])
    mask = np.array([1.0, 0.0, 1.0])
    lr, beta1, beta2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 1e-2
    state = AdamWState.init(3)
    stepped = adamw_step(params, grad, state, lr=lr, decay_mask=mask)
    for i in range(3):
        m_hat = ((1 - beta1) * grad[i]) / (1 - beta1)
        v_hat = ((1 - beta2) * grad[i] ** 2) / (1 - beta2)
        expected = params[i] - lr * m_hat / (np.sqrt(v_hat) + eps)
        expected -= lr * wd * params[i] * mask[i]
        assert stepped[i] == pytest.approx(expected, rel=1e-12)

    schedule = CosineSchedule(1e-3, 1e-6, 100)
    assert schedule.lr_at(0) == 1e-3
    assert schedule.lr_at(100) == 1e-6
    assert schedule.lr_at(50) == 0.5 * (1e-3 + 1e-6)

    bundle = make_phantom_bundle(n_train=8, n_valid=1, n_test=1,
                                 n_unlabeled=0, side=16, seed=3)
    data = TrainingData.from_dataset(bundle, "train", 16)
    sched = CosineSchedule(1e-3, 1e-6, 4)
    outcomes = []
    for batch_size, accumulation in ((8, 1), (4, 2)):
        model = KeypointRegressor(TINY_CONFIG, rng=derive_rng(6, "init"))
        opt = AdamWState.init(model.n_params)
        train_epoch(model, data, opt, sched, 1, SoftLabelStore(),
                    batch_size=batch_size, accumulation_steps=accumulation,
                    seed=6)
        outcomes.append(model.params.copy())
    assert np.allclose(outcomes[0], outcomes[1], rtol=0.0, atol=1e-10)

    assert time.perf_counter() - start < 10.0


def test_criterion_7_phantom_end_to_end():
    start = time.perf_counter()
    bundle = make_phantom_bundle(n_train=200, n_valid=50, n_test=100,
                                 n_unlabeled=400, side=64, seed=2026)
    train = TrainingData.from_dataset(bundle, "train", 64)
    test = TrainingData.from_dataset(bundle, "test", 64)
    pool = TrainingData.from_dataset(bundle, "unlabeled", 64, require_labels=False)

    epochs, pseudo_epochs = 50, 15
    baselines, gains = [], []
    for seed in range(5):
        model = KeypointRegressor(ModelConfig(), rng=derive_rng(seed, "init"))
        opt = AdamWState.init(model.n_params)
        schedule = CosineSchedule(1e-3, 1e-6, epochs)
        store = SoftLabelStore()
        first_loss = None
        for epoch in range(1, epochs + 1):
            report = train_epoch(model, train, opt, schedule, epoch, store,
                                 batch_size=16, seed=seed)
            if first_loss is None:
                first_loss = report.loss_total
        assert report.loss_total < 0.25 * first_loss
        baseline = evaluate(model, test).accuracy

        pseudo_opt = AdamWState.init(model.n_params)
        pseudo_schedule = CosineSchedule(3e-4, 1e-6, pseudo_epochs)
        run_pseudo_rounds(model, train, pool, McConfig(),
                          epochs=pseudo_epochs, opt_state=pseudo_opt,
                          schedule=pseudo_schedule, batch_size=16, seed=seed)
        post = evaluate(model, test).accuracy

        baselines.append(baseline)
        gains.append(post - baseline)
        print(f"\nseed {seed}: baseline {baseline:.3f} post {post:.3f} "
              f"gain {post - baseline:+.3f}")

    elapsed = time.perf_counter() - start
    print(f"phantom e2e: baselines {[f'{b:.2f}' for b in baselines]}, "
          f"mean gain {np.mean(gains):+.4f}, {elapsed:.0f}s")
    assert all(b >= 0.70 for b in baselines)
    assert sum(g >= 0.0 for g in gains) >= 4
    assert float(np.mean(gains)) >= 0.0
    assert elapsed < 600.0


def test_criterion_8_determinism(phantom_root, tmp_path):
    from vhskit.commands import (RunConfig, cmd_eval, cmd_phantoms,
                                 cmd_pseudo, cmd_train)

    def run_config(out):
        return RunConfig(dataset_root=str(phantom_root), output_dir=str(out),
                         model=TINY_CONFIG, epochs=3, batch_size=4, seed=1,
                         checkpoint_every=2, mc=McConfig(k_passes=3, tau=0.5),
                         pseudo_epochs=2, pseudo_lr_max=1e-3)

    phantom_bytes, train_bytes, pseudo_bytes, eval_dicts = [], [], [], []
    for tag in ("a", "b"):
        ds_dir = tmp_path / f"ds-{tag}"
        cmd_phantoms(ds_dir, n_train=4, n_valid=2, n_test=2, n_unlabeled=2,
                     side=16, seed=9)
        phantom_bytes.append((ds_dir / "manifest.json").read_bytes()
                             + (ds_dir / "annotations.jsonl").read_bytes())

        run_dir = tmp_path / f"train-{tag}"
        _, manifest = cmd_train(run_config(run_dir))
        train_bytes.append((
            (run_dir / "epochs.jsonl").read_bytes(),
            (run_dir / "snapshot-final.bin").read_bytes(),
            json.dumps(manifest.to_dict()["metrics"], sort_keys=True),
        ))

        pseudo_dir = tmp_path / f"pseudo-{tag}"
        _, pseudo_manifest = cmd_pseudo(run_config(pseudo_dir),
                                        run_dir / "snapshot-final.bin")
        pseudo_bytes.append((
            (pseudo_dir / "rounds.jsonl").read_bytes(),
            (pseudo_dir / "snapshot-pseudo-final.bin").read_bytes(),
            json.dumps(pseudo_manifest.to_dict()["metrics"], sort_keys=True),
        ))

        _, report = cmd_eval(run_dir / "snapshot-final.bin", phantom_root)
        report.pop("snapshot")  # the run directory name, not a metric
        eval_dicts.append(json.dumps(report, sort_keys=True))

    assert phantom_bytes[0] == phantom_bytes[1]
    assert train_bytes[0] == train_bytes[1]
    assert pseudo_bytes[0] == pseudo_bytes[1]
    assert eval_dicts[0] == eval_dicts[1]
