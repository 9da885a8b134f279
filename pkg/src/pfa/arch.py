"""Declarative architectures, cost accounting and recipe application.

An :class:`ArchSpec` is a feed-forward chain of :class:`LayerSpec` entries.
Each layer consumes the output of the layer before it; ``add_skip`` layers
additionally consume the output of an earlier ``source`` layer (or
``"input"``). Two residual flavours exist:

``padding``
    Both branches are scattered into a fixed ``channels``-wide output by the
    index maps ``block_index`` and ``skip_index`` (zeros elsewhere). Pruning
    the block only shrinks ``block_index``, so the output width survives.
``projection``
    The skip branch goes through a 1x1 convolution. The post-add output is
    pruned as one unit: the recipe entry names the ``add_skip`` layer and
    the slice is reflected onto the block's last convolution and the
    projection.

Tensors are channels-last. Conv kernels are ``[f_h, f_w, C_in, C_out]``,
dense kernels ``[C_in, C_out]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidInput, LayerMismatch, ShapeError, ShapeMismatch

KINDS = ("conv2d", "dense", "batchnorm", "relu", "maxpool", "global_avg_pool", "add_skip")
SKIP_MODES = ("padding", "projection")


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    channels: int | None = None  # conv2d filters, dense units, add_skip output width
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    pad: int = 0
    bias: bool = True
    pool: int = 2  # maxpool window
    source: str | None = None
    mode: str | None = None
    block_index: tuple[int, ...] | None = None
    skip_index: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"layer {self.id!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        for name in ("block_index", "skip_index"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(int(i) for i in v))
        if self.kind in ("conv2d", "dense", "add_skip") and (self.channels is None or self.channels < 1):
            raise InvalidInput(f"layer {self.id!r}: {self.kind} needs a positive channel count")
        if self.kind == "add_skip":
            if self.mode not in SKIP_MODES:
                raise InvalidInput(f"layer {self.id!r}: skip mode must be one of {SKIP_MODES}")
            if self.source is None:
                raise InvalidInput(f"layer {self.id!r}: add_skip needs a source")
        if self.stride < 1 or self.pad < 0 or self.pool < 1 or min(self.kernel) < 1:
            raise InvalidInput(f"layer {self.id!r}: invalid stride/pad/pool/kernel")

    @property
    def analyzable(self) -> bool:
        return self.kind in ("conv2d", "dense") or (
            self.kind == "add_skip" and self.mode == "projection"
        )


@dataclass(frozen=True)
class CostReport:
    params: int
    flops: int
    per_layer: dict = field(default_factory=dict)  # id -> (params, flops)


class ArchSpec:
    """Immutable, shape-checked layer chain."""

    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec]):
        self.input_shape = tuple(int(d) for d in input_shape)
        if len(self.input_shape) not in (1, 3) or min(self.input_shape) < 1:
            raise ShapeError(f"input shape must be [H,W,C] or [C], got {self.input_shape}")
        ids = [l.id for l in layers]
        if len(set(ids)) != len(ids) or "input" in ids:
            raise InvalidInput("layer ids must be unique and must not be 'input'")
        self.layers = tuple(layers)
        self.shapes = self._infer_shapes()

    def __eq__(self, other):
        return (isinstance(other, ArchSpec) and self.input_shape == other.input_shape
                and self.layers == other.layers)

    def __hash__(self):
        return hash((self.input_shape, self.layers))

    def __repr__(self):
        return f"ArchSpec(input_shape={self.input_shape}, layers={len(self.layers)})"

    def layer(self, layer_id: str) -> LayerSpec:
        for l in self.layers:
            if l.id == layer_id:
                return l
        raise LayerMismatch(f"no layer {layer_id!r}")

    def input_of(self, i: int) -> str:
        return self.layers[i - 1].id if i > 0 else "input"

    def output_channels(self) -> dict[str, int]:
        """Output width of every independently prunable layer.

        The conv closing a projection-residual block is pruned together with
        the add and is therefore represented by the add alone.
        """
        tied = {_block_producer(self, i).id for i, l in enumerate(self.layers)
                if l.kind == "add_skip" and l.mode == "projection"}
        return {l.id: self.shapes[l.id][-1] for l in self.layers
                if l.analyzable and l.id not in tied}

    def _infer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {"input": self.input_shape}
        seen = ["input"]
        layers = list(self.layers)
        for i, l in enumerate(layers):
            x = shapes[self.input_of(i)]
            if l.kind == "conv2d":
                _need_spatial(l, x)
                fh, fw = l.kernel
                ho = (x[0] + 2 * l.pad - fh) // l.stride + 1
                wo = (x[1] + 2 * l.pad - fw) // l.stride + 1
                if ho < 1 or wo < 1:
                    raise ShapeError(f"layer {l.id!r}: kernel larger than padded input {x}")
                out = (ho, wo, l.channels)
            elif l.kind == "dense":
                if len(x) != 1:
                    raise ShapeError(f"layer {l.id!r}: dense needs a vector input, got {x}")
                out = (l.channels,)
            elif l.kind in ("batchnorm", "relu"):
                out = x
            elif l.kind == "maxpool":
                _need_spatial(l, x)
                ho, wo = (x[0] - l.pool) // l.stride + 1, (x[1] - l.pool) // l.stride + 1
                if ho < 1 or wo < 1:
                    raise ShapeError(f"layer {l.id!r}: pool window larger than input {x}")
                out = (ho, wo, x[2])
            elif l.kind == "global_avg_pool":
                _need_spatial(l, x)
                out = (x[2],)
            else:
                if l.source not in seen:
                    raise ShapeError(f"layer {l.id!r}: skip source {l.source!r} is not an earlier layer")
                s = shapes[l.source]
                _need_spatial(l, x)
                _need_spatial(l, s)
                sub = (-(-s[0] // l.stride), -(-s[1] // l.stride))
                if sub != x[:2]:
                    raise ShapeError(
                        f"layer {l.id!r}: skip spatial dims {sub} differ from block dims {x[:2]}"
                    )
                if l.mode == "padding":
                    bi = l.block_index if l.block_index is not None else tuple(range(x[2]))
                    si = l.skip_index if l.skip_index is not None else tuple(range(s[2]))
                    for name, idx, width in (("block", bi, x[2]), ("skip", si, s[2])):
                        if len(idx) != width:
                            raise ShapeError(
                                f"layer {l.id!r}: {name} index map has {len(idx)} entries for {width} channels"
                            )
                        if len(set(idx)) != len(idx) or (idx and (min(idx) < 0 or max(idx) >= l.channels)):
                            raise ShapeError(f"layer {l.id!r}: invalid {name} index map")
                    layers[i] = replace(l, block_index=bi, skip_index=si)
                elif x[2] != l.channels:
                    raise ShapeError(
                        f"layer {l.id!r}: block has {x[2]} channels, projection output has {l.channels}"
                    )
                out = (x[0], x[1], l.channels)
            shapes[l.id] = out
            seen.append(l.id)
        self.layers = tuple(layers)
        return shapes

    def param_shapes(self) -> dict[str, dict[str, tuple[int, ...]]]:
        """Shapes of every stored tensor, trainable or not, keyed by layer id."""
        out = {}
        for i, l in enumerate(self.layers):
            x = self.shapes[self.input_of(i)]
            if l.kind == "conv2d":
                p = {"kernel": (*l.kernel, x[-1], l.channels)}
            elif l.kind == "dense":
                p = {"kernel": (x[0], l.channels)}
            elif l.kind == "batchnorm":
                c = x[-1]
                p = {"gamma": (c,), "beta": (c,), "moving_mean": (c,), "moving_var": (c,)}
            elif l.kind == "add_skip" and l.mode == "projection":
                p = {"kernel": (1, 1, self.shapes[l.source][-1], l.channels)}
            else:
                continue
            if l.kind != "batchnorm" and l.bias:
                p["bias"] = (l.channels,)
            out[l.id] = p
        return out


NON_TRAINABLE = ("moving_mean", "moving_var")


def _need_spatial(l: LayerSpec, shape):
    if len(shape) != 3:
        raise ShapeError(f"layer {l.id!r}: {l.kind} needs an [H,W,C] input, got {shape}")


def _prod(shape) -> int:
    n = 1
    for d in shape:
        n *= int(d)
    return n


def cost(arch: ArchSpec) -> CostReport:
    """Trainable parameter count and FLOPs of one forward pass on one sample.

    FLOPs count a multiply-accumulate as 2; bias adds, batchnorm (scale and
    shift), ReLU, pooling comparisons/adds and residual adds count one per
    element operation.
    """
    per_layer = {}
    pshapes = arch.param_shapes()
    for i, l in enumerate(arch.layers):
        x = arch.shapes[arch.input_of(i)]
        y = arch.shapes[l.id]
        params = sum(_prod(s) for n, s in pshapes.get(l.id, {}).items() if n not in NON_TRAINABLE)
        if l.kind == "conv2d":
            fh, fw = l.kernel
            flops = 2 * fh * fw * x[2] * _prod(y)
            if l.bias:
                flops += _prod(y)
        elif l.kind == "dense":
            flops = 2 * x[0] * y[0] + (y[0] if l.bias else 0)
        elif l.kind == "batchnorm":
            flops = 2 * _prod(y)
        elif l.kind == "relu":
            flops = _prod(y)
        elif l.kind == "maxpool":
            flops = _prod(y) * (l.pool * l.pool - 1)
        elif l.kind == "global_avg_pool":
            flops = _prod(x)
        else:
            flops = _prod(y)
            if l.mode == "projection":
                flops += 2 * arch.shapes[l.source][2] * _prod(y) + (_prod(y) if l.bias else 0)
        per_layer[l.id] = (params, flops)
    return CostReport(
        params=sum(p for p, _ in per_layer.values()),
        flops=sum(f for _, f in per_layer.values()),
        per_layer=per_layer,
    )


def footprint(arch: ArchSpec) -> int:
    return cost(arch).params


def flops(arch: ArchSpec, input_shape: Sequence[int] | None = None) -> int:
    if input_shape is not None and tuple(input_shape) != arch.input_shape:
        arch = ArchSpec(input_shape, arch.layers)
    return cost(arch).flops


# --- recipe application ---------------------------------------------------


@dataclass(frozen=True)
class _LayerSlice:
    inp: np.ndarray
    out: np.ndarray
    src: np.ndarray | None = None


def _block_producer(arch: ArchSpec, i: int) -> LayerSpec:
    """Convolution that produces the block branch entering ``arch.layers[i]``."""
    j = i - 1
    while j >= 0 and arch.layers[j].kind in ("batchnorm", "relu"):
        j -= 1
    if j < 0 or arch.layers[j].kind != "conv2d":
        raise LayerMismatch(
            f"layer {arch.layers[i].id!r}: block branch must end in a convolution (+batchnorm/relu)"
        )
    return arch.layers[j]


def _check_keep(arch: ArchSpec, keep: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    widths = arch.output_channels()
    keep = {k: np.asarray(v, dtype=np.int64) for k, v in keep.items()}
    tied = {}
    for i, l in enumerate(arch.layers):
        if l.kind == "add_skip" and l.mode == "projection":
            producer = _block_producer(arch, i)
            if producer.id in keep:
                raise LayerMismatch(
                    f"{producer.id!r} feeds projection residual {l.id!r}; prune {l.id!r} instead"
                )
            tied[producer.id] = l.id
    for layer_id, idx in keep.items():
        if layer_id not in widths:
            raise LayerMismatch(f"{layer_id!r} is not a prunable layer of the architecture")
        c = widths[layer_id]
        if idx.size < 1 or np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= c:
            raise ShapeError(f"{layer_id!r}: kept indices must be sorted, unique and within [0, {c})")
    # projection residuals prune the block's last conv together with the add
    for producer, add in tied.items():
        if add in keep:
            keep[producer] = keep[add]
    return keep


def _propagate(arch: ArchSpec, keep: Mapping[str, np.ndarray]):
    keep = _check_keep(arch, keep)
    sel = {"input": np.arange(arch.input_shape[-1])}
    slices = {}
    layers = []
    for i, l in enumerate(arch.layers):
        inp = sel[arch.input_of(i)]
        if l.kind in ("conv2d", "dense"):
            out = keep.get(l.id, np.arange(l.channels))
            slices[l.id] = _LayerSlice(inp, out)
            l = replace(l, channels=int(out.size))
        elif l.kind == "batchnorm":
            out = inp
            slices[l.id] = _LayerSlice(inp, out)
        elif l.kind in ("relu", "maxpool", "global_avg_pool"):
            out = inp
        elif l.mode == "padding":
            src = sel[l.source]
            out = np.arange(l.channels)
            l = replace(
                l,
                block_index=tuple(int(l.block_index[j]) for j in inp),
                skip_index=tuple(int(l.skip_index[j]) for j in src),
            )
        else:
            src = sel[l.source]
            out = keep.get(l.id, np.arange(l.channels))
            if not np.array_equal(inp, out):
                raise ShapeError(f"layer {l.id!r}: block channels do not match the projection output")
            slices[l.id] = _LayerSlice(inp, out, src)
            l = replace(l, channels=int(out.size))
        sel[l.id] = out
        layers.append(l)
    return ArchSpec(arch.input_shape, layers), slices


def prune_arch(arch: ArchSpec, keep: Mapping[str, Sequence[int]]) -> ArchSpec:
    return _propagate(arch, keep)[0]


def cost_of_counts(arch: ArchSpec, counts: Mapping[str, int]) -> CostReport:
    """Cost of the architecture after keeping ``counts[id]`` filters per layer."""
    return cost(prune_arch(arch, {k: np.arange(int(n)) for k, n in counts.items()}))


def validate_weights(arch: ArchSpec, weights: Mapping[str, Mapping[str, np.ndarray]]):
    expected = arch.param_shapes()
    for layer_id, params in expected.items():
        if layer_id not in weights:
            raise ShapeMismatch(f"weights lack layer {layer_id!r}")
        for name, shape in params.items():
            if name not in weights[layer_id]:
                raise ShapeMismatch(f"weights lack {layer_id}/{name}")
            got = tuple(np.shape(weights[layer_id][name]))
            if got != shape:
                raise ShapeMismatch(f"{layer_id}/{name}: expected shape {shape}, got {got}")
    extra = set(weights) - set(expected)
    if extra:
        raise ShapeMismatch(f"weights contain unknown layers {sorted(extra)}")


def apply_recipe(arch: ArchSpec, weights, recipe):
    """Slice ``weights`` to the recipe's kept filters; returns (arch, weights)."""
    recipe.require_indices()
    validate_weights(arch, weights)
    widths = arch.output_channels()
    for layer_id, entry in recipe.entries.items():
        if layer_id in widths and widths[layer_id] != entry.channels:
            raise LayerMismatch(
                f"{layer_id!r}: recipe expects {entry.channels} channels, architecture has {widths[layer_id]}"
            )
    keep = {k: np.array(e.kept_indices) for k, e in recipe.entries.items()}
    new_arch, slices = _propagate(arch, keep)
    new_weights = {}
    for l in arch.layers:
        if l.id not in weights:
            continue
        params = weights[l.id]
        s = slices.get(l.id)
        out = {}
        for name, w in params.items():
            w = np.asarray(w)
            if l.kind == "batchnorm":
                w = w[s.inp]
            elif name == "bias":
                w = w[s.out]
            elif l.kind == "conv2d":
                w = w[:, :, s.inp][..., s.out]
            elif l.kind == "dense":
                w = w[s.inp][:, s.out]
            else:
                w = w[:, :, s.src][..., s.out]
            out[name] = np.ascontiguousarray(w)
        new_weights[l.id] = out
    validate_weights(new_arch, new_weights)
    return new_arch, new_weights


# --- builders -------------------------------------------------------------


def simple_cnn(num_classes: int = 10, input_shape=(32, 32, 3), widths=(96, 192),
               batchnorm: bool = True) -> ArchSpec:
    """All-convolutional classifier.

    Three 3x3 convs of ``widths[0]`` filters, a 2x2 max pool, three 3x3
    convs of ``widths[1]``, a 2x2 max pool, one more 3x3 conv and a 1x1 conv
    of ``widths[1]``, a 1x1 classifier conv and global average pooling.
    Every conv is followed by batchnorm; all but the classifier by ReLU.
    """
    a, b = widths
    plan = [(a, 3), (a, 3), (a, 3), "pool", (b, 3), (b, 3), (b, 3), "pool",
            (b, 3), (b, 1), (num_classes, 1)]
    layers = []
    n = 0
    for pos, step in enumerate(plan):
        if step == "pool":
            layers.append(LayerSpec(f"pool{n}", "maxpool", pool=2, stride=2))
            continue
        n += 1
        c, k = step
        layers.append(LayerSpec(f"conv{n}", "conv2d", channels=c, kernel=(k, k), pad=k // 2))
        if batchnorm:
            layers.append(LayerSpec(f"bn{n}", "batchnorm"))
        if pos < len(plan) - 1:
            layers.append(LayerSpec(f"relu{n}", "relu"))
    layers.append(LayerSpec("gap", "global_avg_pool"))
    return ArchSpec(input_shape, layers)


def simple_cnn_mini(num_classes: int = 4, input_shape=(16, 16, 3)) -> ArchSpec:
    return simple_cnn(num_classes, input_shape, widths=(16, 32))


def residual_net(mode: str = "padding", num_classes: int = 4, input_shape=(8, 8, 3),
                 width: int = 16) -> ArchSpec:
    """Stem conv, two residual blocks (second one downsampling) and a dense head.

    The first block always uses an identity-width padding skip; the second
    uses ``mode`` with stride 2 and doubles the width.
    """
    w2 = 2 * width
    L = LayerSpec
    layers = [
        L("stem", "conv2d", channels=width, kernel=(3, 3), pad=1),
        L("stem_bn", "batchnorm"), L("stem_relu", "relu"),
        L("b1c1", "conv2d", channels=width, kernel=(3, 3), pad=1),
        L("b1bn1", "batchnorm"), L("b1r1", "relu"),
        L("b1c2", "conv2d", channels=width, kernel=(3, 3), pad=1),
        L("b1bn2", "batchnorm"),
        L("b1add", "add_skip", channels=width, source="stem_relu", mode="padding"),
        L("b1relu", "relu"),
        L("b2c1", "conv2d", channels=w2, kernel=(3, 3), pad=1, stride=2),
        L("b2bn1", "batchnorm"), L("b2r1", "relu"),
        L("b2c2", "conv2d", channels=w2, kernel=(3, 3), pad=1),
        L("b2bn2", "batchnorm"),
        L("b2add", "add_skip", channels=w2, source="b1relu", mode=mode, stride=2,
          bias=False),
        L("b2relu", "relu"),
        L("gap", "global_avg_pool"),
        L("fc", "dense", channels=num_classes),
    ]
    return ArchSpec(input_shape, layers)


# --- structured-text form ---------------------------------------------------

_DEFAULTS = LayerSpec("_", "relu")


def arch_to_dict(arch: ArchSpec) -> dict:
    layers = []
    for l in arch.layers:
        d = {"id": l.id, "kind": l.kind}
        for name in ("channels", "kernel", "stride", "pad", "bias", "pool", "source", "mode",
                     "block_index", "skip_index"):
            v = getattr(l, name)
            if v != getattr(_DEFAULTS, name):
                d[name] = list(v) if isinstance(v, tuple) else v
        layers.append(d)
    return {"format": "pfa/1", "kind": "arch", "input_shape": list(arch.input_shape),
            "layers": layers}


def arch_from_dict(d: dict) -> ArchSpec:
    from .io import check_header

    check_header(d, "arch")
    try:
        layers = [LayerSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in l.items()})
                  for l in d["layers"]]
        return ArchSpec(d["input_shape"], layers)
    except (KeyError, TypeError) as exc:
        raise InvalidInput(f"malformed architecture: {exc}") from exc
