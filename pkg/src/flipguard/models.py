"""Small ReLU multilayer perceptrons and their checkpoint format.

Checkpoint layout::

    FLIPGUARD-CKPT-1\\n
    <one-line JSON manifest>\\n
    <payload: little-endian floats, tensors in manifest order>

The manifest lists every tensor's name and shape, the storage dtype and the
payload byte length, so truncation and shape edits are caught on load.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .rng import XorShift64Star

MAGIC = b"FLIPGUARD-CKPT-1\n"
ROLES = ("plain", "old", "new", "src")


class CheckpointError(ValueError):
    pass


class CheckpointParseError(CheckpointError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointIntegrityError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_layers: tuple[int, ...] = ()
    num_classes: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_layers):
            raise ValueError(f"all layer widths must be positive: {self}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation != "relu":
            raise ValueError(f"only relu activation is supported, got {self.activation!r}")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden_layers, self.num_classes]

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        w = self.widths
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(int(d["input_dim"]), tuple(d.get("hidden_layers", ())), int(d["num_classes"]), d.get("activation", "relu"))


@dataclass
class Model:
    """An MLP classifier. ``params`` alternates weight ``(in, out)`` and bias ``(out,)``."""

    spec: ModelSpec
    params: list[np.ndarray]
    role_tag: str = "plain"
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.spec.param_shapes()
        if len(self.params) != len(shapes):
            raise ValueError(f"expected {len(shapes)} parameter tensors, got {len(self.params)}")
        self.params = [np.asarray(p, dtype=np.float64) for p in self.params]
        for i, (p, s) in enumerate(zip(self.params, shapes)):
            if p.shape != s:
                raise ValueError(f"parameter {param_name(i)} has shape {p.shape}, expected {s}")
        if self.role_tag not in ROLES:
            raise ValueError(f"role_tag must be one of {ROLES}")

    def forward(self, x, params: Sequence[T.Tensor] | None = None) -> T.Tensor:
        """Logits for one input ``(d,)`` or a batch ``(n, d)``, recorded for autodiff."""
        x = T.tensor(x)
        if x.shape[-1] != self.spec.input_dim or x.data.ndim not in (1, 2):
            raise T.ShapeError(f"input has shape {x.shape}, model expects last dim {self.spec.input_dim}")
        ps = params if params is not None else [T.Tensor(p) for p in self.params]
        h = x
        n_layers = len(ps) // 2
        for k in range(n_layers):
            h = T.add(T.matmul(h, ps[2 * k]), ps[2 * k + 1])
            if k < n_layers - 1:
                h = T.relu(h)
        return h

    def logits(self, x) -> np.ndarray:
        """Plain-numpy forward pass (no tape)."""
        h = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)
        if h.shape[-1] != self.spec.input_dim or h.ndim not in (1, 2):
            raise T.ShapeError(f"input has shape {h.shape}, model expects last dim {self.spec.input_dim}")
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            h = h @ self.params[2 * k] + self.params[2 * k + 1]
            if k < n_layers - 1:
                h = np.where(h > 0, h, 0.0)
        return h

    def predict(self, x) -> np.ndarray:
        return argmax_lowest(self.logits(x))

    def with_params(self, params: Sequence[np.ndarray], role_tag: str | None = None) -> "Model":
        return Model(self.spec, [np.array(p) for p in params], role_tag or self.role_tag, self.seed, dict(self.meta))

    def copy(self, role_tag: str | None = None) -> "Model":
        return self.with_params(self.params, role_tag)

    def digest(self) -> str:
        """Content hash of spec and weights; names the model in caches and lineage."""
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        for p in self.params:
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def param_name(i: int) -> str:
    return f"{'W' if i % 2 == 0 else 'b'}{i // 2}"


def argmax_lowest(logits: np.ndarray) -> np.ndarray | int:
    # np.argmax already returns the first maximal index
    out = np.argmax(logits, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def init_model(spec: ModelSpec, seed: int, role_tag: str = "plain") -> Model:
    """Glorot-uniform weights from xorshift64*, zero biases."""
    rng = XorShift64Star(seed)
    params = []
    for shape in spec.param_shapes():
        if len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            params.append(rng.uniform(shape[0] * shape[1], -bound, bound).reshape(shape))
        else:
            params.append(np.zeros(shape))
    return Model(spec, params, role_tag, seed)


def predict_logits(model: Model, x) -> T.Tensor:
    return model.forward(x)


def predict_label(model: Model, x) -> int | np.ndarray:
    return model.predict(x)


def save_checkpoint(model: Model, path, dtype: str = "<f8") -> None:
    if dtype not in ("<f8", "<f4"):
        raise ValueError(f"unsupported storage dtype {dtype!r}")
    chunks = [np.ascontiguousarray(p, dtype=dtype).tobytes() for p in model.params]
    payload = b"".join(chunks)
    manifest = {
        "format": MAGIC.decode().strip(),
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "role": model.role_tag,
        "meta": model.meta,
        "dtype": dtype,
        "tensors": [{"name": param_name(i), "shape": list(p.shape)} for i, p in enumerate(model.params)],
        "payload_bytes": len(payload),
    }
    header = json.dumps(manifest, sort_keys=True).encode() + b"\n"
    Path(path).write_bytes(MAGIC + header + payload)


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointParseError("missing FLIPGUARD-CKPT-1 magic", 0)
    start = len(MAGIC)
    end = raw.find(b"\n", start)
    if end < 0:
        raise CheckpointParseError("unterminated manifest", start)
    try:
        manifest = json.loads(raw[start:end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        offset = start + getattr(exc, "pos", getattr(exc, "start", 0))
        raise CheckpointParseError(f"manifest is not valid JSON: {exc}", offset) from None
    payload = raw[end + 1 :]
    try:
        dtype = np.dtype(manifest["dtype"])
        spec = ModelSpec.from_dict(manifest["spec"])
        entries = manifest["tensors"]
        declared = int(manifest["payload_bytes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointParseError(f"manifest missing or invalid field: {exc}", start) from None
    if len(payload) != declared:
        raise CheckpointIntegrityError(f"payload is {len(payload)} bytes, manifest declares {declared}")
    expected = spec.param_shapes()
    if len(entries) != len(expected):
        raise CheckpointIntegrityError(f"manifest lists {len(entries)} tensors, spec needs {len(expected)}")
    params, offset = [], 0
    for i, (entry, shape) in enumerate(zip(entries, expected)):
        shape_m = tuple(entry["shape"])
        if shape_m != shape:
            raise CheckpointIntegrityError(f"tensor {entry.get('name', param_name(i))}: manifest shape {shape_m} does not match spec shape {shape}")
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if offset + nbytes > len(payload):
            raise CheckpointIntegrityError(f"tensor {entry.get('name')}: payload too short")
        params.append(np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)), offset=offset).astype(np.float64).reshape(shape))
        offset += nbytes
    if offset != len(payload):
        raise CheckpointIntegrityError(f"{len(payload) - offset} trailing payload bytes not covered by manifest")
    return Model(spec, params, manifest.get("role", "plain"), manifest.get("seed"), manifest.get("meta", {}))
