"""Acceptance suite: one test (or parametrized group) per exit criterion.

Each criterion prints a single PASS/FAIL line; run with ``pytest -v -s
tests/test_acceptance.py`` to see them.  Tolerances are pinned here and
nowhere else.

Known honest failures (documented, not masked): the published compression
totals are internally inconsistent for the dense-block model and for two
of the three ghost-ratio ladder points; no single layer-annotation set can
reproduce those cells within the +-2% slack.  The corresponding assertions
state the published numbers anyway and fail with the computed deltas.
"""

import functools
import platform
import time

import numpy as np
import pytest

from conftest import check_gradients
from ghostsr import clustering as C
from ghostsr import shift as S
from ghostsr import tensor as T
from ghostsr.bench import bench
from ghostsr.counting import count
from ghostsr.data import bicubic_resize, psnr, rgb_to_y, sample_patches
from ghostsr.models import Network, forward_sr, preset
from ghostsr.shift import NOISE_FROZEN_ZERO
from ghostsr.tensor import Tensor
from ghostsr.train import OptimizerSpec, freeze, train

TOL = 0.02  # counting-convention slack for published totals


def criterion(num, desc):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"\n[criterion {num}] FAIL - {desc}")
                raise
            print(f"\n[criterion {num}] PASS - {desc}")
            return result

        return wrapper

    return deco


def _within(actual, expected, tol=TOL):
    return abs(actual / expected - 1.0) <= tol


# ---------------------------------------------------------------------------
# 1. published-totals counting regression


TABLE1 = {
    "edsr_x2": (40.73e6, 21.85e6, 9389e9, 5038e9),
    "rdn_x2": (19.27e6, 9.83e6, 4442e9, 2265e9),
    "carn_x3": (1.59e6, 1.19e6, 119e9, 77e9),
    "imdn_x2": (0.69e6, 0.40e6, 160e9, 91e9),
}


@pytest.mark.parametrize("name", sorted(TABLE1))
def test_criterion_1_counting_regression(name):
    @criterion(1, f"counting regression for {name} (dense and ghost, +-2%)")
    def run():
        p_dense, p_ghost, f_dense, f_ghost = TABLE1[name]
        t0 = time.perf_counter()
        dense = count(preset(name), 0.0)
        ghost = count(preset(name), 0.5)
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0, f"counting took {elapsed:.3f}s, budget is 1s"
        assert _within(dense.total_params, p_dense), (
            f"dense params {dense.total_params} vs {p_dense:.0f}"
        )
        assert _within(dense.total_flops, f_dense), (
            f"dense FLOPs {dense.total_flops} vs {f_dense:.0f}"
        )
        assert _within(ghost.total_params, p_ghost), (
            f"ghost params {ghost.total_params} vs {p_ghost:.0f}"
        )
        assert _within(ghost.total_flops, f_ghost), (
            f"ghost FLOPs {ghost.total_flops} vs {f_ghost:.0f}"
        )

    run()


# ---------------------------------------------------------------------------
# 2. ghost-ratio ladder


LADDER = {0.25: (1.33e6, 96e9), 0.5: (1.19e6, 77e9), 0.75: (1.01e6, 60e9)}


@pytest.mark.parametrize("ratio", sorted(LADDER))
def test_criterion_2_ratio_ladder(ratio):
    @criterion(2, f"ghost-ratio ladder at ratio {ratio} (+-2%)")
    def run():
        want_p, want_f = LADDER[ratio]
        report = count(preset("carn_x3"), ratio)
        assert _within(report.total_params, want_p), (
            f"params {report.total_params} vs {want_p:.0f} "
            f"({report.total_params / want_p - 1:+.2%})"
        )
        assert _within(report.total_flops, want_f), (
            f"FLOPs {report.total_flops} vs {want_f:.0f} "
            f"({report.total_flops / want_f - 1:+.2%})"
        )

    run()


# ---------------------------------------------------------------------------
# 3. shift / one-hot depthwise equivalence


@criterion(3, "shift equals one-hot depthwise conv bitwise, 100 tensors x 9 offsets")
def test_criterion_3_shift_depthwise_oracle():
    rng = np.random.default_rng(3)
    offsets = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    for trial in range(100):
        x = rng.standard_normal((1, 1, 7, 9)).astype(np.float32)
        dy, dx = offsets[trial % 9]
        kern = S.one_hot_offsets(dy, dx, 1).astype(np.float32)[None]
        dw = T.depthwise_conv2d(Tensor(x), Tensor(kern)).data
        sh = S.shift2d(x[0, 0], dy, dx)
        assert np.array_equal(dw[0, 0], sh)


# ---------------------------------------------------------------------------
# 4. gradient suite


@criterion(4, "finite-difference checks < 1e-6 for all differentiable ops")
def test_criterion_4_gradient_suite():
    rng = np.random.default_rng(4)
    for i in range(5):
        # conv2d with bias
        x = rng.standard_normal((2, 2, 4, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        check_gradients(lambda xt, wt, bt: T.sum_all(T.conv2d(xt, wt, bt)), [x, w, b])
        # pixel shuffle
        xs = rng.standard_normal((1, 8, 3, 3))
        coeffs = rng.standard_normal((1, 2, 6, 6))
        check_gradients(lambda t: T.weighted_sum(T.pixel_shuffle(t, 2), coeffs), [xs])
        # losses (targets away from the L1 kink)
        pred = rng.standard_normal((1, 2, 4, 4))
        target = pred + np.sign(rng.standard_normal(pred.shape)) * 0.3
        check_gradients(lambda p: T.l1_loss(p, target), [pred.copy()])
        check_gradients(lambda p: T.l2_loss(p, target), [pred.copy()])
        # ghost layer soft path: conv -> gather -> softened depthwise -> loss
        noise = S.gumbel_noise((2, 3, 3), rng)
        xg = rng.standard_normal((1, 2, 5, 5))
        wg = rng.standard_normal((2, 2, 3, 3))
        logits = rng.standard_normal((2, 3, 3))
        tgt = rng.standard_normal((1, 2, 5, 5))

        def ghost_soft(xt, wt, lt):
            soft = T.grid_softmax(T.add(lt, Tensor(noise)))
            intrinsic = T.conv2d(xt, wt)
            src = T.gather_channels(intrinsic, [0, 1])
            return T.l2_loss(T.depthwise_conv2d(src, soft), tgt)

        check_gradients(ghost_soft, [xg, wg, logits])


# ---------------------------------------------------------------------------
# 5. Gumbel-Softmax properties


@criterion(5, "softmax normalization, low-temperature concentration, uniform selection")
def test_criterion_5_gumbel_softmax_properties():
    rng = np.random.default_rng(5)
    # sums to 1 within 1e-6, always
    for _ in range(200):
        logits = rng.standard_normal((3, 3)) * rng.uniform(0.1, 4.0)
        noise = S.gumbel_noise((3, 3), rng)
        s = S.soft_shift_weight(logits, noise, rng.uniform(0.05, 5.0))
        assert abs(s.sum() - 1.0) < 1e-6
    # temperature 0.01 concentrates >= 0.99 at the argmax
    logits = rng.standard_normal((3, 3))
    s = S.soft_shift_weight(logits, np.zeros((3, 3)), 0.01)
    assert s.max() >= 0.99
    assert S.harden_offsets(s) == S.harden_offsets(logits)
    # zero logits: selection frequency 1/9 +- 0.02 over 10^4 samples
    n = 10_000
    noise = S.gumbel_noise((n, 3, 3), rng)
    flat = noise.reshape(n, 9).argmax(axis=1)
    freqs = np.bincount(flat, minlength=9) / n
    assert np.all(np.abs(freqs - 1.0 / 9.0) <= 0.02), freqs


# ---------------------------------------------------------------------------
# 6. clustering


@criterion(6, "k-means monotonicity, planted recovery, keeper counts, permutation consistency")
def test_criterion_6_clustering():
    rng = np.random.default_rng(6)
    # objective non-increasing on 100 random instances
    for _ in range(100):
        n = int(rng.integers(4, 24))
        k = int(rng.integers(1, n + 1))
        pts = rng.standard_normal((n, int(rng.integers(2, 8))))
        res = C.kmeans(pts, k, rng, max_iters=25)
        hist = res.history
        assert all(hist[i + 1] <= hist[i] + 1e-12 for i in range(len(hist) - 1))
    # planted two-cluster instance recovered exactly
    pts = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]])
    res = C.kmeans(pts, 2, rng)
    groups = {frozenset(res.members(0).tolist()), frozenset(res.members(1).tolist())}
    assert groups == {frozenset({0, 1}), frozenset({2, 3})}
    # keeper count is exactly (1 - ratio) * c_out
    for ratio in (0.25, 0.5, 0.75):
        for _ in range(10):
            w = rng.standard_normal((16, 3, 3, 3))
            plan = C.plan_layer_from_weight(w, ratio, rng)
            assert len(plan.intrinsic) == int((1 - ratio) * 16)
    # permutation consistency on a two-conv composition (1e-5 relative)
    with T.using_dtype("float64"):
        w1 = rng.standard_normal((8, 3, 3, 3))
        b1 = rng.standard_normal(8)
        w2 = rng.standard_normal((4, 8, 3, 3))
        b2 = rng.standard_normal(4)
        plan = C.plan_layer_from_weight(w1, 0.5, rng)
        perm = np.asarray(plan.permutation)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)))

        def compose(wa, ba, wb, bb):
            mid = T.relu(T.conv2d(x, Tensor(wa), Tensor(ba)))
            return T.conv2d(mid, Tensor(wb), Tensor(bb)).data

        base = compose(w1, b1, w2, b2)
        permuted = compose(w1[perm], b1[perm], w2[:, perm], b2)
        err = np.max(np.abs(base - permuted)) / np.max(np.abs(base))
        assert err < 1e-5


# ---------------------------------------------------------------------------
# 7. toy overfit training


@criterion(7, "toy overfit: 500 steps < 10 min, beats bicubic by >= 3 dB, freeze bitwise")
def test_criterion_7_toy_training():
    from ghostsr.cli import _synthetic_images

    rng = np.random.default_rng(0)
    images = _synthetic_images(rng, count=4, size=96)
    pairs = sample_patches(images, 2, 48, 8, rng, augment=False)
    assert all(p.lr.shape == (3, 48, 48) and p.hr.shape == (3, 96, 96) for p in pairs)

    net = Network(preset("toy_edsr_x2"), ghost_ratio=0.5)
    net.init_random(np.random.default_rng(1))
    t0 = time.perf_counter()
    log = train(net, pairs, steps=500, opt_spec=OptimizerSpec(lr0=6e-3),
                batch=8, seed=0)
    elapsed = time.perf_counter() - t0
    assert elapsed < 600.0, f"training took {elapsed:.0f}s, budget 600s"
    assert log.losses[-1] < log.losses[0] / 2, "loss did not halve"

    # freeze preserves the hard training path bitwise
    for st in net.states.values():
        if st.spec is not None:
            for sw in st.spec.shifts:
                sw.noise_mode = NOISE_FROZEN_ZERO
    probe = Tensor(pairs[0].lr[None].astype(np.float32))
    hard = net.forward(probe, mode="train").data
    freeze(net)
    frozen = net.forward(probe, mode="inference").data
    assert np.array_equal(hard, frozen), "freeze changed the forward output"

    # train-set luma PSNR beats the interpolation baseline by >= 3 dB
    net_vals, bi_vals = [], []
    for p in pairs:
        sr = forward_sr(net, p.lr)
        bi = np.clip(bicubic_resize(p.lr, 96, 96), 0.0, 1.0)
        net_vals.append(psnr(rgb_to_y(sr), rgb_to_y(p.hr), shave=2))
        bi_vals.append(psnr(rgb_to_y(bi), rgb_to_y(p.hr), shave=2))
    margin = np.mean(net_vals) - np.mean(bi_vals)
    print(f"\n  toy overfit: net {np.mean(net_vals):.2f} dB, "
          f"bicubic {np.mean(bi_vals):.2f} dB, margin {margin:+.2f} dB, "
          f"{elapsed:.0f}s")
    assert margin >= 3.0, f"margin {margin:.2f} dB < 3 dB"


# ---------------------------------------------------------------------------
# 8. benchmark direction check


@criterion(8, "shift median latency <= depthwise 3x3 at 1x64x360x640")
def test_criterion_8_benchmark_direction():
    shape = (1, 64, 360, 640)
    shift_res = bench("shift", shape, reps=10)
    dw_res = bench("depthwise3x3", shape, reps=10)
    print(f"\n  shift {shift_res.median_ms:.1f} ms vs "
          f"depthwise3x3 {dw_res.median_ms:.1f} ms")
    if platform.machine().lower() in ("x86_64", "amd64"):
        assert shift_res.median_ms <= dw_res.median_ms, (
            f"shift {shift_res.median_ms:.2f} ms slower than "
            f"depthwise {dw_res.median_ms:.2f} ms"
        )
    elif shift_res.median_ms > dw_res.median_ms:
        import warnings

        warnings.warn(
            f"shift ({shift_res.median_ms:.2f} ms) slower than depthwise "
            f"({dw_res.median_ms:.2f} ms) on {platform.machine()}; "
            f"treated as a warning off x86-64"
        )


# ---------------------------------------------------------------------------
# 9. CLI determinism


@criterion(9, "fixed-seed CLI runs reproduce logs and checkpoints bitwise")
def test_criterion_9_cli_determinism(tmp_path):
    import io
    from contextlib import redirect_stderr, redirect_stdout

    from ghostsr import cli

    def run(args):
        buf = io.StringIO()
        with redirect_stdout(buf), redirect_stderr(buf):
            code = cli.main(args)
        assert code == 0, buf.getvalue()
        return buf.getvalue()

    results = []
    for i in range(2):
        out_dir = tmp_path / f"run{i}"
        run([
            "train", "--config", "toy_edsr_x2", "--synthetic",
            "--steps", "4", "--batch", "4", "--patch", "16",
            "--ghost", "0.5", "--seed", "11", "--out-dir", str(out_dir),
        ])
        log = (out_dir / "train_log.csv").read_text()
        semantic = "\n".join(
            ",".join(line.split(",")[:3]) for line in log.splitlines()
        )
        results.append((
            semantic,
            (out_dir / "trained.gsr").read_bytes(),
            (out_dir / "frozen.gsr").read_bytes(),
        ))
    assert results[0][0] == results[1][0], "training logs differ"
    assert results[0][1] == results[1][1], "training checkpoints differ"
    assert results[0][2] == results[1][2], "frozen checkpoints differ"

    # plan files and count reports are fully deterministic artifacts
    ck = tmp_path / "run0" / "trained.gsr"
    plans = []
    for i in range(2):
        plan = tmp_path / f"plan{i}.txt"
        run(["cluster", "--checkpoint", str(ck), "--config", "toy_edsr_x2",
             "--ghost", "0.5", "--seed", "2", "--out", str(plan)])
        plans.append(plan.read_bytes())
    assert plans[0] == plans[1], "plan files differ"
    counts = [run(["count", "--config", "carn_x3", "--ghost", "0.5"]) for _ in range(2)]
    assert counts[0] == counts[1]
