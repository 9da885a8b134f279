"""On-disk formats.

Tensor file (``.pfat``), little-endian throughout::

    b"PFAT" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank | u64 dims[rank] | payload

Weight bundle (``.pfaw``): ``b"PFAW" | u8 version=1 | u32 count`` followed by
``count`` records of ``u16 name_len | utf-8 "layer_id/param" | tensor file``.

Manifests, architectures, recipes and spectra are JSON documents carrying
``"format": "pfa/1"`` and a ``"kind"`` tag. An activation dump is a directory
holding ``manifest.json`` plus one tensor file per layer; the manifest
records where responses were captured (the producer decides whether that
is before or after the nonlinearity).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateLayerId,
    FormatError,
    IoError,
    MissingFile,
    NonFiniteTensor,
    ShapeMismatch,
    UnsupportedDtype,
)
from .recipes import LayerRecipe, Method, Recipe
from .spectral import Spectrum

FORMAT = "pfa/1"
TENSOR_MAGIC = b"PFAT"
BUNDLE_MAGIC = b"PFAW"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_NAMES = {"f32": np.dtype("float32"), "f64": np.dtype("float64")}


def atomic_write(path, data: bytes | str):
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    try:
        return path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def check_header(d, kind: str):
    if not isinstance(d, dict) or d.get("format") != FORMAT:
        raise FormatError(f"expected a {FORMAT!r} document")
    if d.get("kind") != kind:
        raise FormatError(f"expected kind {kind!r}, got {d.get('kind')!r}")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _load_json(path, kind: str) -> dict:
    try:
        d = json.loads(_read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    check_header(d, kind)
    return d


# --- tensors --------------------------------------------------------------


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    if a.dtype not in _CODES:
        raise UnsupportedDtype(f"unsupported dtype {a.dtype}; only f32/f64 tensors are stored")
    code = _CODES[a.dtype]
    header = TENSOR_MAGIC + struct.pack("<BBB", VERSION, code, a.ndim)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0, name: str = "tensor") -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; returns (array, end offset)."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError(f"{name}: bad magic, not a PFAT tensor")
    if len(buf) < offset + 7:
        raise FormatError(f"{name}: truncated header")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"{name}: unsupported tensor version {version}")
    if code not in _DTYPES:
        raise UnsupportedDtype(f"{name}: unknown dtype code {code}")
    pos = offset + 7
    if len(buf) < pos + 8 * rank:
        raise FormatError(f"{name}: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = count * dtype.itemsize
    if len(buf) < pos + nbytes:
        held = (len(buf) - pos) // dtype.itemsize
        raise ShapeMismatch(f"{name}: header declares {count} elements, file holds {held}")
    a = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
    return a.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(array, path):
    atomic_write(path, encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    buf = _read_bytes(path)
    a, end = decode_tensor(buf, name=str(path))
    if end != len(buf):
        held = (len(buf) - end) // a.dtype.itemsize + a.size
        raise ShapeMismatch(f"{path}: header declares {a.size} elements, file holds {held}")
    return a


def _check_finite(a: np.ndarray, what: str):
    if not np.all(np.isfinite(a)):
        raise NonFiniteTensor(f"{what}: tensor contains NaN or Inf")


# --- activation dumps -----------------------------------------------------


@dataclass(frozen=True)
class LayerDumpEntry:
    layer_id: str
    tensor_file: Path
    shape: tuple[int, ...]
    dtype: str
    data: np.ndarray = field(repr=False, compare=False)


@dataclass(frozen=True)
class ActivationDump:
    manifest_path: Path
    sample_count: int
    layers: tuple[LayerDumpEntry, ...]
    meta: dict = field(default_factory=dict)

    def __getitem__(self, layer_id: str) -> LayerDumpEntry:
        for e in self.layers:
            if e.layer_id == layer_id:
                return e
        raise KeyError(layer_id)

    @property
    def layer_ids(self) -> list[str]:
        return [e.layer_id for e in self.layers]


def save_dump(out_dir, tensors: dict, meta: dict | None = None) -> Path:
    """Write ``tensors`` (layer id -> array, in order) as a dump; returns the manifest path."""
    out_dir = Path(out_dir)
    entries = []
    counts = {np.shape(t)[0] for t in tensors.values()}
    if len(counts) > 1:
        raise ShapeMismatch(f"layers disagree on sample count: {sorted(counts)}")
    for layer_id, t in tensors.items():
        t = np.asarray(t)
        _check_finite(t, layer_id)
        fname = f"{layer_id}.pfat"
        save_tensor(t, out_dir / fname)
        entries.append({"id": layer_id, "file": fname, "shape": list(t.shape),
                        "dtype": "f32" if t.dtype == np.float32 else "f64"})
    manifest = {"format": FORMAT, "kind": "activation_dump",
                "sample_count": counts.pop() if counts else 0,
                "layers": entries, "meta": meta or {}}
    path = out_dir / "manifest.json"
    atomic_write(path, _dumps(manifest))
    return path


def load_dump(manifest) -> ActivationDump:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    d = _load_json(manifest, "activation_dump")
    try:
        M = int(d["sample_count"])
        raw = d["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{manifest}: malformed manifest: {exc}") from exc
    if M < 1:
        raise FormatError(f"{manifest}: sample_count must be positive")
    seen = set()
    entries = []
    for e in raw:
        layer_id = e["id"]
        if layer_id in seen:
            raise DuplicateLayerId(f"{manifest}: layer id {layer_id!r} appears twice")
        seen.add(layer_id)
        if e.get("dtype") not in _NAMES:
            raise UnsupportedDtype(f"{layer_id}: unsupported dtype {e.get('dtype')!r}")
        shape = tuple(int(x) for x in e["shape"])
        if len(shape) not in (2, 4):
            raise ShapeMismatch(f"{layer_id}: shape must be [M,H,W,C] or [M,C], got {list(shape)}")
        if shape[0] != M:
            raise ShapeMismatch(f"{layer_id}: leading dim {shape[0]} != sample_count {M}")
        path = manifest.parent / e["file"]
        data = load_tensor(path)
        if data.size != int(np.prod(shape)):
            raise ShapeMismatch(
                f"{layer_id}: manifest declares {int(np.prod(shape))} elements, file holds {data.size}"
            )
        if data.shape != shape:
            raise ShapeMismatch(f"{layer_id}: file shape {data.shape} != manifest shape {shape}")
        if data.dtype != _NAMES[e["dtype"]]:
            raise ShapeMismatch(f"{layer_id}: file dtype {data.dtype} != manifest dtype {e['dtype']}")
        _check_finite(data, layer_id)
        data.setflags(write=False)
        entries.append(LayerDumpEntry(layer_id, path, shape, e["dtype"], data))
    return ActivationDump(manifest, M, tuple(entries), dict(d.get("meta", {})))


# --- weights --------------------------------------------------------------


def save_weights(bundle: dict, path):
    names = []
    body = b""
    for layer_id, params in bundle.items():
        for pname, arr in params.items():
            if "/" in layer_id or "/" in pname:
                raise FormatError(f"names may not contain '/': {layer_id}/{pname}")
            arr = np.asarray(arr)
            _check_finite(arr, f"{layer_id}/{pname}")
            name = f"{layer_id}/{pname}".encode("utf-8")
            body += struct.pack("<H", len(name)) + name + encode_tensor(arr)
            names.append(name)
    atomic_write(path, BUNDLE_MAGIC + struct.pack("<BI", VERSION, len(names)) + body)


def load_weights(path, arch=None) -> dict:
    """Read a weight bundle; validate against ``arch`` when given."""
    buf = _read_bytes(path)
    if buf[:4] != BUNDLE_MAGIC or len(buf) < 9:
        raise FormatError(f"{path}: not a PFAW weight bundle")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported bundle version {version}")
    pos = 9
    bundle: dict = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + n].decode("utf-8")
        layer_id, pname = name.split("/", 1)
        arr, pos = decode_tensor(buf, pos + 2 + n, name)
        _check_finite(arr, name)
        bundle.setdefault(layer_id, {})[pname] = arr
    if pos != len(buf):
        raise ShapeMismatch(f"{path}: trailing bytes after {count} tensors")
    if arch is not None:
        from .arch import validate_weights

        validate_weights(arch, bundle)
    return bundle


# --- architectures --------------------------------------------------------


def save_arch(arch, path):
    from .arch import arch_to_dict

    atomic_write(path, _dumps(arch_to_dict(arch)))


def load_arch(path):
    from .arch import arch_from_dict

    return arch_from_dict(_load_json(path, "arch"))


# --- recipes --------------------------------------------------------------


def recipe_to_dict(recipe: Recipe) -> dict:
    m = recipe.method
    method = {"name": m.name}
    if m.tau is not None:
        method["tau"] = m.tau
    if m.budget_kind is not None:
        method["budget_kind"] = m.budget_kind
        method["target"] = m.target
    layers = []
    for layer_id, e in recipe.entries.items():
        # re-validate: entries may have been built by hand
        LayerRecipe(e.gamma, e.kept_count, e.channels, e.kept_indices)
        d = {"id": layer_id, "channels": e.channels, "gamma": e.gamma, "kept_count": e.kept_count}
        if e.kept_indices is not None:
            d["kept_indices"] = list(e.kept_indices)
        layers.append(d)
    return {"format": FORMAT, "kind": "recipe", "method": method,
            "provenance": recipe.provenance, "warnings": list(recipe.warnings), "layers": layers}


def recipe_from_dict(d: dict) -> Recipe:
    check_header(d, "recipe")
    try:
        m = d["method"]
        method = Method(m["name"], m.get("tau"), m.get("budget_kind"), m.get("target"))
        entries = {}
        for e in d["layers"]:
            if e["id"] in entries:
                raise DuplicateLayerId(f"recipe lists layer {e['id']!r} twice")
            idx = e.get("kept_indices")
            entries[e["id"]] = LayerRecipe(float(e["gamma"]), int(e["kept_count"]),
                                           int(e["channels"]),
                                           tuple(idx) if idx is not None else None)
        return Recipe(entries, method, d.get("provenance", ""), tuple(d.get("warnings", ())))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed recipe: {exc}") from exc


def save_recipe(recipe: Recipe, path):
    atomic_write(path, _dumps(recipe_to_dict(recipe)))


def load_recipe(path) -> Recipe:
    return recipe_from_dict(_load_json(path, "recipe"))


# --- spectra --------------------------------------------------------------


def save_spectra(spectra, path, kl: dict | None = None, meta: dict | None = None):
    kl = kl or {}
    layers = [{"id": s.layer_id, "channels": s.channels, "degenerate": s.degenerate,
               "kl_to_uniform": kl.get(s.layer_id), "values": [float(v) for v in s.values]}
              for s in spectra]
    atomic_write(path, _dumps({"format": FORMAT, "kind": "spectra", "meta": meta or {},
                               "layers": layers}))


def load_spectra(path) -> list[Spectrum]:
    d = _load_json(path, "spectra")
    try:
        return [Spectrum(e["id"], np.array(e["values"], dtype=np.float64), bool(e["degenerate"]))
                for e in d["layers"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed spectra file: {exc}") from exc
