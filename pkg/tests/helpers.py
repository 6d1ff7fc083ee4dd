"""Finite-difference oracles and small fixtures shared by the test modules."""

from __future__ import annotations

import itertools

import numpy as np

from vdnet import evaluation as E
from vdnet import network as N
from vdnet import tensor as T


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check_op_grad(build, *arrays, rtol=1e-5, atol=1e-7, eps=1e-6):
    """Compare autodiff and numeric gradients of ``sum(w * build(*tensors))``."""
    rng = np.random.default_rng(len(arrays))
    probe = None

    def scalar(*arrs):
        nonlocal probe
        out = build(*(T.Tensor(a) for a in arrs))
        if probe is None:
            probe = rng.normal(size=out.shape)
        return float(np.sum(out.data * probe))

    scalar(*arrays)
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    loss = T.sum_all(T.mul(out, T.Tensor(probe)))
    grads = T.backward(loss)
    for k, (a, t) in enumerate(zip(arrays, tensors)):
        def f(x, k=k):
            args = list(arrays)
            args[k] = x
            return scalar(*args)
        num = numeric_grad(f, a, eps)
        got = grads.array(t) if t in grads else np.zeros(a.shape)
        np.testing.assert_allclose(got, num, rtol=rtol, atol=atol, err_msg=f"input {k}")


def random_cnn(rng: np.random.Generator, *, max_params: int = 1000, with_head: bool = True):
    """A seeded random conv net of at most four parametrised layers."""
    while True:
        c = int(rng.integers(1, 3))
        size = int(rng.choice([6, 8]))
        layers = [N.conv(int(rng.integers(2, 5)), int(rng.choice([1, 3])), padding=1 if rng.random() < 0.5 else 0),
                  N.relu()]
        if rng.random() < 0.5:
            layers.append(N.conv(int(rng.integers(2, 5)), 3, padding=1))
            layers.append(N.relu())
        if rng.random() < 0.5:
            layers.append(N.maxpool(2))
        if with_head:
            layers += [N.gap(), N.dense(int(rng.integers(2, 4)))]
        try:
            model = N.Model.build((c, size, size), layers, seed=int(rng.integers(1 << 30)))
        except N.ModelShapeError:
            continue
        if model.num_parameters() <= max_params:
            for name, p in model.params.items():
                if name.endswith(".bias"):
                    model.params[name] = T.Tensor(rng.normal(0, 0.1, p.shape), requires_grad=True)
            return model


def greedy_fixed_point(dets, thresh):
    """Exhaustive search for the subset that greedy suppression must return.

    With distinct scores, a box survives iff no surviving box of higher score
    (same image and class) overlaps it above ``thresh``.  Exactly one subset
    has that property.
    """
    found = []
    for bits in itertools.product((False, True), repeat=len(dets)):
        kept = [d for d, b in zip(dets, bits) if b]
        ok = True
        for d, b in zip(dets, bits):
            blocked = any(k.score > d.score and k.class_id == d.class_id and k.image == d.image
                          and E.iou(k.box, d.box) > thresh for k in kept)
            if b == blocked:
                ok = False
                break
        if ok:
            found.append(kept)
    if len(found) != 1:
        raise AssertionError(f"expected one fixed point, found {len(found)}")
    return found[0]
