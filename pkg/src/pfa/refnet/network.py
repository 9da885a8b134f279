"""Executable network built from an ``ArchSpec`` and a weight bundle."""

from __future__ import annotations

import numpy as np

from ..arch import ArchSpec, validate_weights
from . import layers as F


def init_weights(arch: ArchSpec, seed: int, dtype=np.float32) -> dict:
    """He-normal kernels, zero biases, unit batchnorm scale."""
    rng = np.random.default_rng(seed)
    bundle = {}
    for layer_id, shapes in arch.param_shapes().items():
        params = {}
        for name, shape in shapes.items():
            if name == "kernel":
                fan_in = int(np.prod(shape[:-1]))
                params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
            elif name in ("gamma", "moving_var"):
                params[name] = np.ones(shape, dtype=dtype)
            else:
                params[name] = np.zeros(shape, dtype=dtype)
        bundle[layer_id] = params
    return bundle


class Network:
    def __init__(self, arch: ArchSpec, weights: dict, dtype=np.float32, bn_decay: float = 0.9):
        validate_weights(arch, weights)
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.bn_decay = bn_decay
        self.params = {k: {n: np.array(v, dtype=self.dtype) for n, v in p.items()}
                       for k, p in weights.items()}
        self._caches = None

    def weights(self) -> dict:
        return {k: {n: v.copy() for n, v in p.items()} for k, p in self.params.items()}

    def forward(self, x, train: bool = False, capture=()):
        """Run the chain; returns the final output, or ``(output, captured)`` if ``capture``."""
        outs = {"input": np.asarray(x, dtype=self.dtype)}
        caches = {}
        captured = {}
        for i, l in enumerate(self.arch.layers):
            h = outs[self.arch.input_of(i)]
            p = self.params.get(l.id)
            if l.kind == "conv2d":
                y, c = F.conv_forward(h, p["kernel"], p.get("bias"), l.stride, l.pad)
            elif l.kind == "dense":
                y, c = F.dense_forward(h, p["kernel"], p.get("bias"))
            elif l.kind == "batchnorm":
                y, c = F.batchnorm_forward(h, p, train, self.bn_decay)
            elif l.kind == "relu":
                y, c = F.relu_forward(h)
            elif l.kind == "maxpool":
                y, c = F.maxpool_forward(h, l.pool, l.stride)
            elif l.kind == "global_avg_pool":
                y, c = F.gap_forward(h)
            elif l.mode == "padding":
                y, c = F.skip_padding_forward(h, outs[l.source], l)
            else:
                y, c = F.skip_projection_forward(h, outs[l.source], p["kernel"], p.get("bias"),
                                                 l.stride)
            outs[l.id] = y
            if train:
                caches[l.id] = c
            if l.id in capture:
                captured[l.id] = y
        self._caches = caches if train else None
        out = outs[self.arch.layers[-1].id]
        return (out, captured) if capture else out

    def backward(self, grad_out):
        """Backpropagate through the last training-mode forward.

        Returns ``(param_grads, input_grad)``.
        """
        if self._caches is None:
            raise RuntimeError("backward() requires a preceding forward(train=True)")
        layers = self.arch.layers
        grads = {layers[-1].id: grad_out}
        pgrads = {}

        def acc(tid, g):
            grads[tid] = g if tid not in grads else grads[tid] + g

        for i in range(len(layers) - 1, -1, -1):
            l = layers[i]
            g = grads.pop(l.id, None)
            if g is None:
                continue
            c = self._caches[l.id]
            src = self.arch.input_of(i)
            if l.kind == "conv2d":
                dx, pg = F.conv_backward(g, c)
            elif l.kind == "dense":
                dx, pg = F.dense_backward(g, c)
            elif l.kind == "batchnorm":
                dx, pg = F.batchnorm_backward(g, c)
            elif l.kind == "relu":
                dx, pg = F.relu_backward(g, c), None
            elif l.kind == "maxpool":
                dx, pg = F.maxpool_backward(g, c), None
            elif l.kind == "global_avg_pool":
                dx, pg = F.gap_backward(g, c), None
            elif l.mode == "padding":
                dx, dskip = F.skip_padding_backward(g, c)
                pg = None
                acc(l.source, dskip)
            else:
                dx, dskip, pg = F.skip_projection_backward(g, c)
                acc(l.source, dskip)
            if pg:
                pgrads[l.id] = pg
            acc(src, dx)
        return pgrads, grads.get("input")

    def predict(self, x, batch_size: int = 256):
        return np.concatenate([
            self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)
        ])

    def accuracy(self, x, y, batch_size: int = 256) -> float:
        if len(x) == 0:
            return float("nan")
        return float(np.mean(self.predict(x, batch_size).argmax(axis=1) == y))

    def capture(self, x, layer_ids, batch_size: int = 256) -> dict:
        """Inference-mode outputs of ``layer_ids`` over ``x``."""
        parts = {k: [] for k in layer_ids}
        for i in range(0, len(x), batch_size):
            _, cap = self.forward(x[i:i + batch_size], capture=set(layer_ids))
            for k in layer_ids:
                parts[k].append(cap[k])
        return {k: np.concatenate(v) for k, v in parts.items()}
