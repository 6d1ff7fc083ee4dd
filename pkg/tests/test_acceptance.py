"""Acceptance checks, one test per numbered criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line and then
asserts. Criteria 7 to 9 train the full seed-7 experiment twice and take
several minutes; deselect them with ``-m "not slow"``.

Run on its own with ``pytest tests/test_acceptance.py -v``.
"""

import math
import time

import numpy as np
import pytest

from vdnet import dorsal as R
from vdnet import evaluation as E
from vdnet import network as N
from vdnet import pipeline as P
from vdnet import tensor as T
from vdnet import ventral as V
from vdnet.evaluation import Detection, GroundTruthBox
from vdnet.tensor import Tensor

from helpers import greedy_fixed_point, numeric_grad, random_cnn


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n}: {detail}"
    return emit


def fd_close(got, num, rtol, atol):
    """Worst excess over the allclose bound; <= 0 means within tolerance."""
    return float(np.max(np.abs(got - num) - (atol + rtol * np.abs(num)), initial=-np.inf))


# ---------------------------------------------------------------- 1


def test_criterion_1_cnn_gradients(verdict):
    rtol, atol = 1e-4, 1e-7
    t0 = time.perf_counter()
    failures, checked = [], 0
    for i in range(100):
        rng = np.random.default_rng(10_000 + i)
        model = random_cnn(rng, max_params=1000)
        x = rng.normal(size=model.input_shape)
        out_shape = N.forward(model, Tensor(x))[0].shape
        probe = rng.normal(size=out_shape)

        def scalar(params, xv):
            out, _ = N.forward(model, Tensor(xv), params=params)
            return float(np.sum(out.data * probe))

        xt = Tensor(x, requires_grad=True)
        out, _ = N.forward(model, xt)
        grads = T.backward(T.sum_all(T.mul(out, Tensor(probe))))
        targets = [("input", grads.array(xt), numeric_grad(lambda v: scalar(model.params, v), x))]
        for name, p in model.params.items():
            def f(v, name=name):
                params = dict(model.params)
                params[name] = Tensor(v)
                return scalar(params, x)
            targets.append((name, grads.array(p), numeric_grad(f, p.data)))
        for name, got, num in targets:
            checked += got.size
            if fd_close(got, num, rtol, atol) > 0:
                failures.append(f"model {i} {name}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    verdict(1, ok, f"100 random CNNs, {checked} gradient entries vs central FD "
                   f"(rtol {rtol:g}, atol {atol:g}); {elapsed:.1f}s; failures {failures[:5]}")


# ---------------------------------------------------------------- 2


def test_criterion_2_gt_identity(verdict):
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(1000):
        shape = tuple(int(v) for v in rng.integers(1, 9, size=int(rng.choice([3, 4]))))
        a = Tensor(rng.normal(0, 10.0 ** rng.integers(-3, 4), size=shape))
        if not np.array_equal(V.gestalt_total(V.gap_per_filter(a)).data, T.sum_all(a).data):
            bad += 1
    verdict(2, bad == 0, f"gestalt_total(gap_per_filter(A)) == sum_all(A) bit-exact on 1000 tensors; {bad} mismatches")


# ---------------------------------------------------------------- 3


def random_plane(rng):
    m, n = (int(v) for v in rng.integers(3, 24, size=2))
    kind = rng.integers(0, 3)
    if kind == 0:
        return rng.uniform(0, 1, (m, n))
    if kind == 1:
        return rng.exponential(1.0, (m, n)) * 10.0 ** rng.integers(-4, 4)
    p = np.zeros((m, n))
    p[rng.integers(0, m), rng.integers(0, n)] = rng.uniform(0.1, 5)
    return p


def test_criterion_3_ventral_invariants(verdict):
    rng = np.random.default_rng(3)
    cases = 500
    counts = dict(binary=0, dichotomy=0, scale=0, kernel=0, constancy=0, max_mean=0)
    worst_kernel = worst_const = 0.0
    for _ in range(cases):
        c = int(rng.choice([1, 3]))
        base = random_plane(rng)
        sens = base[None] * rng.uniform(0.5, 2, (c, 1, 1)) + rng.uniform(0, 0.1, (c, *base.shape))
        m, n = sens.shape[1:]
        cfg = V.VentralConfig(aggregation=str(rng.choice(["mean", "max"])),
                              gaussian_variance=float(rng.uniform(1, 200)),
                              kernel_radius=int(rng.integers(1, min(m, n))))
        _, smoothed, mask = V.mask_from_sensitivity(sens, cfg)
        counts["binary"] += bool(np.all((mask == 0.0) | (mask == 1.0)))

        img = rng.uniform(0, 1, (c, m, n))
        masked = V.apply_mask(img, mask)
        keep = mask == 1.0
        counts["dichotomy"] += bool(np.all(masked[:, ~keep] == 0.0) and np.array_equal(masked[:, keep], img[:, keep]))

        plane = random_plane(rng)
        scale = float(10.0 ** rng.uniform(-3, 3))
        counts["scale"] += bool(np.array_equal(V.binarize_mean_threshold(plane),
                                               V.binarize_mean_threshold(scale * plane)))

        var, rad = float(rng.uniform(0.05, 500)), int(rng.integers(1, 30))
        k = V.gaussian_kernel(var, rad)
        err = abs(math.fsum(k.ravel().tolist()) - 1.0)
        worst_kernel = max(worst_kernel, err)
        counts["kernel"] += err <= 1e-12

        const = float(rng.uniform(-100, 100))
        r = int(rng.integers(1, 6))
        flat = np.full((int(rng.integers(r + 1, 20)), int(rng.integers(r + 1, 20))), const)
        sm = V.smooth(flat, V.gaussian_kernel(float(rng.uniform(0.1, 50)), r))
        dev = float(np.max(np.abs(sm - const))) / max(abs(const), 1.0)
        worst_const = max(worst_const, dev)
        counts["constancy"] += dev <= 1e-12

        s = rng.normal(size=(int(rng.integers(1, 5)), m, n)) ** 2
        counts["max_mean"] += bool(np.all(V.aggregate_channels(s, "max") >= V.aggregate_channels(s, "mean")))
    ok = all(v == cases for v in counts.values())
    verdict(3, ok, f"{cases} cases each, passing counts {counts}; "
                   f"max |sum(kernel)-1| {worst_kernel:.1e}, max constancy deviation {worst_const:.1e}")


# ---------------------------------------------------------------- 4


def test_criterion_4_sensitivity(verdict):
    rng = np.random.default_rng(4)
    worst_linear = 0.0
    for trial in range(50):
        c, k = int(rng.integers(1, 4)), int(rng.choice([1, 3, 5]))
        filters = int(rng.integers(1, 4))
        size = 12
        model = N.Model.build((c, size, size), [N.conv(filters, k), N.gap(), N.dense(2)], seed=trial)
        w = model.params["0.weight"].data
        s = V.sensitivity_map(model, rng.normal(size=(c, size, size)))
        # pixels that every kernel offset reaches: all of them for k = 1
        inner = s[:, k - 1:size - k + 1, k - 1:size - k + 1]
        want = np.abs(w.sum(axis=(0, 2, 3)))[:, None, None]
        worst_linear = max(worst_linear, float(np.max(np.abs(inner - want))))
    fd_ok, worst_fd = 0, 0.0
    for i in range(30):
        model = random_cnn(np.random.default_rng(400 + i))
        x = np.random.default_rng(500 + i).uniform(size=model.input_shape)
        idx = model.last_conv_activation_index()

        def gt(v):
            _, cap = N.forward(model, Tensor(v), capture={idx}, stop_after=idx)
            return T.sum_all(cap[idx]).item()

        num = np.abs(numeric_grad(gt, x))
        got = V.sensitivity_map(model, x)
        excess = fd_close(got, num, 1e-3, 1e-9)
        worst_fd = max(worst_fd, excess)
        fd_ok += excess <= 0
    ok = worst_linear <= 1e-9 and fd_ok == 30
    verdict(4, ok, f"linear conv max |S - |sum w|| = {worst_linear:.1e} (50 nets); "
                   f"ReLU CNNs within rtol 1e-3 of FD: {fd_ok}/30")


# ---------------------------------------------------------------- 5


def test_criterion_5_detection_math(verdict):
    rng = np.random.default_rng(5)
    config = R.DetectorConfig()
    anchors = R.anchor_array(config.anchors())

    worst = 0.0
    for _ in range(200):
        idx = rng.integers(0, len(anchors), 20)
        x0, y0 = rng.uniform(0, 60, 20), rng.uniform(0, 60, 20)
        boxes = np.stack([x0, y0, x0 + rng.uniform(0.5, 40, 20), y0 + rng.uniform(0.5, 40, 20)], 1)
        back = R.decode_boxes(R.encode_boxes(boxes, anchors[idx]), anchors[idx])
        worst = max(worst, float(np.abs(back - boxes).max()))

    covered = 0
    for _ in range(200):
        n = int(rng.integers(1, 8))
        x0, y0 = rng.uniform(0, 60, n), rng.uniform(0, 60, n)
        boxes = np.stack([x0, y0, np.minimum(x0 + rng.uniform(1, 30, n), 64),
                          np.minimum(y0 + rng.uniform(1, 30, n), 64)], 1)
        t = R.assign_target_arrays(anchors, boxes, rng.integers(0, 3, n))
        covered += set(t.matched_gt[t.labels == R.POSITIVE].tolist()) == set(range(n))

    zero_reg = True
    for _ in range(50):
        n = 24
        labels = rng.choice([R.NEGATIVE, R.IGNORE], n)
        t = R.TargetArrays(labels, np.zeros(n, dtype=np.intp), rng.normal(size=(n, 4)), np.full(n, -1))
        _, _, reg = R.detection_loss(Tensor(rng.normal(size=(n, 4))), Tensor(rng.normal(size=(n, 4)) * 50),
                                     t, return_terms=True)
        zero_reg &= reg.item() == 0.0

    fd_ok = 0
    for _ in range(20):
        n = 16
        labels = rng.choice([R.POSITIVE, R.NEGATIVE, R.IGNORE], n, p=[0.3, 0.5, 0.2])
        t = R.TargetArrays(labels, np.where(labels == 1, rng.integers(1, 4, n), 0),
                           rng.normal(size=(n, 4)), np.full(n, -1))
        s0, d0 = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
        st, dt = Tensor(s0, requires_grad=True), Tensor(d0, requires_grad=True)
        g = T.backward(R.detection_loss(st, dt, t, 10.0, 32, 192))
        ns = numeric_grad(lambda v: R.detection_loss(Tensor(v), Tensor(d0), t, 10.0, 32, 192).item(), s0)
        nd = numeric_grad(lambda v: R.detection_loss(Tensor(s0), Tensor(v), t, 10.0, 32, 192).item(), d0)
        fd_ok += fd_close(g.array(st), ns, 1e-5, 1e-8) <= 0 and fd_close(g.array(dt), nd, 1e-5, 1e-8) <= 0

    ok = worst <= 1e-9 and covered == 200 and zero_reg and fd_ok == 20
    verdict(5, ok, f"round-trip max error {worst:.1e}; layouts with every gt positive {covered}/200; "
                   f"zero-positive regression term exactly 0: {zero_reg}; loss FD checks {fd_ok}/20")


# ---------------------------------------------------------------- 6


def test_criterion_6_metric_oracles(verdict):
    third = abs(E.iou((0, 0, 2, 1), (1, 0, 3, 1)) - 1 / 3)

    rng = np.random.default_rng(6)
    nms_ok = idem_ok = 0
    for _ in range(200):
        n = int(rng.integers(0, 11))
        scores = (rng.permutation(n) + 0.5) / max(n, 1)
        dets = []
        for s in scores:
            x0, y0 = rng.uniform(0, 20, 2)
            w, h = rng.uniform(1, 10, 2)
            dets.append(Detection((x0, y0, x0 + w, y0 + h), int(rng.integers(0, 2)), float(s)))
        thresh = float(rng.choice([0.0, 0.3, 0.45, 0.7, 1.0]))
        kept = E.nms(dets, thresh)
        nms_ok += set(kept) == set(greedy_fixed_point(dets, thresh))
        idem_ok += E.nms(kept, thresh) == kept

    gts = [GroundTruthBox("a", 0, (0, 0, 10, 10)), GroundTruthBox("a", 0, (20, 20, 30, 30))]
    dets = [Detection((0, 0, 10, 10), 0, 0.9, "a"), Detection((40, 40, 50, 50), 0, 0.8, "a"),
            Detection((20, 20, 30, 31), 0, 0.7, "a")]
    ap = E.average_precision(dets, gts)
    ap_want = 0.5 * 1.0 + 0.5 * (2.0 / 3.0)  # TP, FP, TP over 2 boxes
    ok = third <= 1e-12 and nms_ok == 200 and idem_ok == 200 and ap == ap_want
    verdict(6, ok, f"IoU 1/3 error {third:.1e}; NMS = exhaustive oracle {nms_ok}/200; "
                   f"idempotent {idem_ok}/200; hand AP {ap!r} vs {ap_want!r}")


# ---------------------------------------------------------------- 7 to 9


@pytest.fixture(scope="module")
def full_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    first = P.run_experiment(root / "run1", seed=7, n_train=200, n_test=50)
    t1 = time.perf_counter()
    second = P.run_experiment(root / "run2", seed=7, n_train=200, n_test=50, sweep=None)
    return first.summary, second.summary, t1 - t0


@pytest.mark.slow
def test_criterion_7_end_to_end(verdict, full_runs):
    s, _, total = full_runs
    acc = s["classifier_test_accuracy"]
    ok = (acc >= 0.95 and s["classifier_seconds"] < 600
          and s["plain_seconds"] < 1800 and s["masked_seconds"] < 1800
          and s["mAP_masked"] >= 0.70 and s["mAP_masked"] >= s["mAP_plain"] - 0.02)
    verdict(7, ok, f"classifier acc {acc:.4f} in {s['classifier_seconds']:.0f}s; "
                   f"detector arms {s['plain_seconds']:.0f}s / {s['masked_seconds']:.0f}s; "
                   f"mAP@0.5 plain {s['mAP_plain']:.4f} masked {s['mAP_masked']:.4f}; "
                   f"whole run {total:.0f}s")


@pytest.mark.slow
def test_criterion_8_sigma_sweep(verdict, full_runs):
    rows = full_runs[0]["ablation"]["rows"]
    maps = [r["mean_ap"] for r in rows]
    ok = [r["variance"] for r in rows] == [5.0, 30.0, 120.0] and len(set(maps)) > 1
    verdict(8, ok, "sigma^2 -> mAP " + ", ".join(f"{r['variance']:g}: {r['mean_ap']:.4f}" for r in rows))


@pytest.mark.slow
def test_criterion_9_repeatability(verdict, full_runs):
    a, b, _ = full_runs
    ok = (a["checkpoints"] == b["checkpoints"] and a["mAP_plain"] == b["mAP_plain"]
          and a["mAP_masked"] == b["mAP_masked"])
    verdict(9, ok, f"checkpoint sha256 identical: {a['checkpoints'] == b['checkpoints']}; "
                   f"mAP {a['mAP_plain']!r}/{a['mAP_masked']!r} vs {b['mAP_plain']!r}/{b['mAP_masked']!r}")
