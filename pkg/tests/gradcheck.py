"""Central finite-difference checks for every refnet layer.

Each case builds a random scalar objective ``sum(R * layer(x))`` (or the
cross-entropy itself) and compares every analytic gradient against
``(f(x + h) - f(x - h)) / 2h`` element by element. Inputs feeding kinks
(ReLU at zero, max-pool ties) are kept at least ``10 h`` away from them so
the finite difference never straddles a kink.

The whole-network cases cannot steer clear of kinks that way (a
pre-activation a few 1e-5 from zero is common), so they use a smaller step.
"""

import numpy as np

from pfa.arch import LayerSpec, residual_net
from pfa.refnet import layers as F
from pfa.refnet.network import Network

from nets import random_weights

H = 1e-3
H_NETWORK = 1e-5
RTOL = 1e-4


def numeric_grad(f, x, h=H):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        hi = f()
        x[i] = old - h
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * h)
    return g


def rel_error(analytic, numeric, floor=1e-6):
    """Norm-wise relative error. Gradients below ``floor`` in norm count as zero
    (a conv bias feeding training-mode batchnorm has an exactly-zero gradient)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def _check(objective, analytic, tensors):
    """Largest relative error over all named tensors."""
    return max(rel_error(analytic[name], numeric_grad(objective, t)) for name, t in tensors.items())


def _rng(seed):
    return np.random.default_rng(seed)


def case_conv(stride=1, pad=1, kernel=(3, 3), seed=0):
    r = _rng(seed)
    x = r.normal(size=(2, 5, 6, 3))
    k = r.normal(size=(*kernel, 3, 4))
    b = r.normal(size=4)
    y, cache = F.conv_forward(x, k, b, stride, pad)
    R = r.normal(size=y.shape)
    dx, pg = F.conv_backward(R, cache)

    def f():
        return float(np.sum(R * F.conv_forward(x, k, b, stride, pad)[0]))

    return _check(f, {"x": dx, "k": pg["kernel"], "b": pg["bias"]}, {"x": x, "k": k, "b": b})


def case_dense(seed=1):
    r = _rng(seed)
    x, k, b = r.normal(size=(4, 5)), r.normal(size=(5, 3)), r.normal(size=3)
    y, cache = F.dense_forward(x, k, b)
    R = r.normal(size=y.shape)
    dx, pg = F.dense_backward(R, cache)

    def f():
        return float(np.sum(R * F.dense_forward(x, k, b)[0]))

    return _check(f, {"x": dx, "k": pg["kernel"], "b": pg["bias"]}, {"x": x, "k": k, "b": b})


def case_batchnorm(train=True, spatial=True, seed=2):
    r = _rng(seed)
    x = r.normal(size=(3, 4, 4, 5) if spatial else (6, 5)) * 2 + 1
    p = {"gamma": r.uniform(0.5, 1.5, 5), "beta": r.normal(size=5),
         "moving_mean": r.normal(size=5), "moving_var": r.uniform(0.5, 2, 5)}

    def run():
        q = {k: v.copy() for k, v in p.items()}  # keep moving stats untouched
        return F.batchnorm_forward(x, q, train, 0.9)

    y, cache = run()
    R = r.normal(size=y.shape)
    dx, pg = F.batchnorm_backward(R, cache)

    def f():
        return float(np.sum(R * run()[0]))

    return _check(f, {"x": dx, "gamma": pg["gamma"], "beta": pg["beta"]},
                  {"x": x, "gamma": p["gamma"], "beta": p["beta"]})


def case_relu(seed=3):
    r = _rng(seed)
    x = r.normal(size=(3, 4, 4, 2))
    x += np.sign(x) * 10 * H
    y, mask = F.relu_forward(x)
    R = r.normal(size=y.shape)

    def f():
        return float(np.sum(R * F.relu_forward(x)[0]))

    return _check(f, {"x": F.relu_backward(R, mask)}, {"x": x})


def case_maxpool(k=2, stride=2, seed=4):
    r = _rng(seed)
    shape = (2, 6, 6, 3)
    # distinct values spaced 0.05 apart: no ties within reach of +-h
    x = (r.permutation(int(np.prod(shape))) * 0.05).reshape(shape).astype(np.float64)
    y, cache = F.maxpool_forward(x, k, stride)
    R = r.normal(size=y.shape)

    def f():
        return float(np.sum(R * F.maxpool_forward(x, k, stride)[0]))

    return _check(f, {"x": F.maxpool_backward(R, cache)}, {"x": x})


def case_gap(seed=5):
    r = _rng(seed)
    x = r.normal(size=(3, 4, 5, 2))
    y, shape = F.gap_forward(x)
    R = r.normal(size=y.shape)

    def f():
        return float(np.sum(R * F.gap_forward(x)[0]))

    return _check(f, {"x": F.gap_backward(R, shape)}, {"x": x})


def case_skip_padding(seed=6):
    r = _rng(seed)
    layer = LayerSpec("add", "add_skip", channels=6, source="s", mode="padding", stride=2,
                      block_index=(0, 2, 5), skip_index=(1, 2, 3, 4))
    block = r.normal(size=(2, 3, 3, 3))
    skip = r.normal(size=(2, 6, 6, 4))
    y, cache = F.skip_padding_forward(block, skip, layer)
    R = r.normal(size=y.shape)
    db, ds = F.skip_padding_backward(R, cache)

    def f():
        return float(np.sum(R * F.skip_padding_forward(block, skip, layer)[0]))

    return _check(f, {"block": db, "skip": ds}, {"block": block, "skip": skip})


def case_skip_projection(seed=7):
    r = _rng(seed)
    block = r.normal(size=(2, 3, 3, 4))
    skip = r.normal(size=(2, 6, 6, 3))
    k, b = r.normal(size=(1, 1, 3, 4)), r.normal(size=4)
    y, cache = F.skip_projection_forward(block, skip, k, b, 2)
    R = r.normal(size=y.shape)
    db, ds, pg = F.skip_projection_backward(R, cache)

    def f():
        return float(np.sum(R * F.skip_projection_forward(block, skip, k, b, 2)[0]))

    return _check(f, {"block": db, "skip": ds, "k": pg["kernel"], "b": pg["bias"]},
                  {"block": block, "skip": skip, "k": k, "b": b})


def case_softmax_xent(seed=8):
    r = _rng(seed)
    z = r.normal(size=(5, 4)) * 3
    labels = r.integers(0, 4, size=5)
    _, g = F.softmax_xent(z, labels)

    def f():
        return F.softmax_xent(z, labels)[0]

    return _check(f, {"z": g}, {"z": z})


def case_network(mode, samples=3, seed=9):
    """Whole residual network, training mode, cross-entropy loss; a sample of every parameter."""
    arch = residual_net(mode, num_classes=3, input_shape=(4, 4, 2), width=4)
    r = _rng(seed)
    net = Network(arch, random_weights(arch, seed), np.float64)
    x = r.normal(size=(4, 4, 4, 2))
    labels = r.integers(0, 3, size=4)

    def loss():
        return F.softmax_xent(net.forward(x, train=True), labels)[0]

    _, g = F.softmax_xent(net.forward(x, train=True), labels)
    pg, dx = net.backward(g)
    worst = rel_error(dx, numeric_grad(loss, x, H_NETWORK))
    for lid, params in net.params.items():
        for name, w in params.items():
            if name in ("moving_mean", "moving_var"):
                continue
            picks = [np.unravel_index(i, w.shape) for i in r.choice(w.size, min(samples, w.size), replace=False)]
            num = []
            for i in picks:
                old = w[i]
                w[i] = old + H_NETWORK
                hi = loss()
                w[i] = old - H_NETWORK
                lo = loss()
                w[i] = old
                num.append((hi - lo) / (2 * H_NETWORK))
            ana = [pg[lid][name][i] for i in picks]
            worst = max(worst, rel_error(np.array(ana), np.array(num)))
    return worst


CASES = {
    "conv2d 3x3 stride 1 pad 1": lambda: case_conv(),
    "conv2d 3x3 stride 2 pad 0": lambda: case_conv(stride=2, pad=0, seed=10),
    "conv2d 1x2 stride 1 pad 0": lambda: case_conv(pad=0, kernel=(1, 2), seed=11),
    "dense": case_dense,
    "batchnorm train spatial": lambda: case_batchnorm(True, True),
    "batchnorm train dense": lambda: case_batchnorm(True, False, seed=12),
    "batchnorm inference": lambda: case_batchnorm(False, True, seed=13),
    "relu": case_relu,
    "maxpool 2/2": case_maxpool,
    "maxpool 3/1": lambda: case_maxpool(3, 1, seed=14),
    "global_avg_pool": case_gap,
    "add_skip padding": case_skip_padding,
    "add_skip projection": case_skip_projection,
    "softmax cross-entropy": case_softmax_xent,
    "network padding": lambda: case_network("padding"),
    "network projection": lambda: case_network("projection", seed=15),
}

