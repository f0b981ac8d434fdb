"""Reverse-mode differentiation for small parametric vector fields.

A :class:`VectorField` is a stack of layers applied to the state ``z`` (and,
for concatsquash layers, the time ``t``).  ``eval`` records a :class:`Tape`
holding the intermediates of one forward pass; replaying the tape backwards
gives the vector-Jacobian products ``a^T df/dz`` and ``a^T df/dtheta`` that
the adjoint equations need.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NonFiniteError, StaleTapeError

PARAM_MAGIC = b"ODGP"
PARAM_VERSION = 1
_HEADER = struct.Struct("<4sIQ")  # magic, version, length: 16 bytes


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class ParamVector:
    """Flat float64 parameter vector with a named segment layout."""

    def __init__(self, values, layout: Sequence[tuple[str, tuple[int, ...]]]):
        layout = [(str(name), tuple(int(s) for s in shape)) for name, shape in layout]
        names = [name for name, _ in layout]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate segment names in parameter layout")
        self.layout = layout
        self._slices: dict[str, tuple[slice, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in layout:
            size = int(np.prod(shape, dtype=np.int64))
            self._slices[name] = (slice(offset, offset + size), shape)
            offset += size
        values = np.array(values, dtype=np.float64).reshape(-1)
        if values.size != offset:
            raise DimensionError(f"parameter vector has {values.size} entries, layout needs {offset}")
        self.values = values

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"ParamVector(size={len(self)}, segments={[n for n, _ in self.layout]})"

    def segment(self, name: str) -> np.ndarray:
        """Writable view of one segment, reshaped to its declared shape."""
        sl, shape = self._slices[name]
        return self.values[sl].reshape(shape)

    def slice_of(self, name: str) -> slice:
        return self._slices[name][0]

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(PARAM_MAGIC, PARAM_VERSION, self.values.size)
        return header + self.values.astype("<f8").tobytes()

    @staticmethod
    def values_from_bytes(blob: bytes) -> np.ndarray:
        if len(blob) < _HEADER.size:
            raise ConfigError("parameter blob shorter than its header")
        magic, version, length = _HEADER.unpack_from(blob)
        if magic != PARAM_MAGIC:
            raise ConfigError(f"bad parameter blob magic {magic!r}")
        if version != PARAM_VERSION:
            raise ConfigError(f"unsupported parameter blob version {version}")
        body = blob[_HEADER.size:]
        if len(body) != 8 * length:
            raise ConfigError(f"parameter blob declares {length} values but carries {len(body) // 8}")
        return np.frombuffer(body, dtype="<f8").astype(np.float64)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Layer:
    kind = ""
    elementwise = False

    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim = in_dim
        self.out_dim = out_dim

    def param_shapes(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(suffix, shape, fan_in) for every trainable tensor."""
        return []

    def describe(self) -> str:
        return self.kind if self.elementwise else f"{self.kind} {self.out_dim}"

    def forward(self, x, t, p):
        raise NotImplementedError

    def backward(self, cache, gy, p, want_params):
        """Return (grad wrt input, {suffix: grad}) for upstream cotangent ``gy``."""
        raise NotImplementedError


class Affine(Layer):
    kind = "affine"
    bias = True

    def param_shapes(self):
        shapes = [("weight", (self.out_dim, self.in_dim), self.in_dim)]
        if self.bias:
            shapes.append(("bias", (self.out_dim,), self.in_dim))
        return shapes

    def forward(self, x, t, p):
        y = p["weight"] @ x
        if self.bias:
            y = y + p["bias"]
        return y, x

    def backward(self, x, gy, p, want_params):
        gx = p["weight"].T @ gy
        if not want_params:
            return gx, None
        grads = {"weight": np.outer(gy, x)}
        if self.bias:
            grads["bias"] = gy
        return gx, grads


class Linear(Affine):
    """Affine map without bias, e.g. the scalar field f = theta * z."""

    kind = "linear"
    bias = False


class Const(Layer):
    """Output is a trainable vector, independent of the input."""

    kind = "const"

    def param_shapes(self):
        return [("value", (self.out_dim,), self.out_dim)]

    def forward(self, x, t, p):
        return p["value"].copy(), None

    def backward(self, cache, gy, p, want_params):
        gx = np.zeros(self.in_dim)
        return gx, ({"value": gy} if want_params else None)


class ConcatSquash(Layer):
    """(W z + b1) * sigmoid(t c + b2) + t b3."""

    kind = "concatsquash"

    def param_shapes(self):
        o = self.out_dim
        return [
            ("weight", (o, self.in_dim), self.in_dim),
            ("bias", (o,), self.in_dim),
            ("gate_weight", (o,), 1),
            ("gate_bias", (o,), 1),
            ("time_bias", (o,), 1),
        ]

    def forward(self, x, t, p):
        u = p["weight"] @ x + p["bias"]
        s = _sigmoid(t * p["gate_weight"] + p["gate_bias"])
        return u * s + t * p["time_bias"], (x, t, u, s)

    def backward(self, cache, gy, p, want_params):
        x, t, u, s = cache
        gu = gy * s
        gx = p["weight"].T @ gu
        if not want_params:
            return gx, None
        gpre = gy * u * s * (1.0 - s)
        return gx, {
            "weight": np.outer(gu, x),
            "bias": gu,
            "gate_weight": gpre * t,
            "gate_bias": gpre,
            "time_bias": gy * t,
        }


class Tanh(Layer):
    kind = "tanh"
    elementwise = True

    def forward(self, x, t, p):
        y = np.tanh(x)
        return y, y

    def backward(self, y, gy, p, want_params):
        return gy * (1.0 - y * y), ({} if want_params else None)


class Softplus(Layer):
    kind = "softplus"
    elementwise = True

    def forward(self, x, t, p):
        return np.logaddexp(0.0, x), x

    def backward(self, x, gy, p, want_params):
        return gy * _sigmoid(x), ({} if want_params else None)


class Cube(Layer):
    """Componentwise cube, used to express the A z^3 test systems."""

    kind = "cube"
    elementwise = True

    def forward(self, x, t, p):
        return x * x * x, x

    def backward(self, x, gy, p, want_params):
        return gy * 3.0 * x * x, ({} if want_params else None)


LAYER_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls for cls in (Affine, Linear, Const, ConcatSquash, Tanh, Softplus, Cube)
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int | None = None


# ---------------------------------------------------------------------------
# Tape and field
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Intermediates of a single ``VectorField.eval``; replayable any number of times."""

    field: "VectorField"
    version: int
    z: np.ndarray
    t: float
    caches: list = dc_field(default_factory=list)


class VectorField:
    """Parametric right-hand side f(z, t, theta) built from a layer list."""

    def __init__(self, layers: Sequence[LayerSpec | tuple | str], state_dim: int,
                 params: ParamVector | np.ndarray | None = None, seed: int = 0):
        if state_dim < 1:
            raise ConfigError("state_dim must be positive")
        self.state_dim = int(state_dim)
        self.specs = [_as_spec(s) for s in layers]
        self.layers: list[Layer] = []
        width = self.state_dim
        for spec in self.specs:
            cls = LAYER_KINDS.get(spec.kind)
            if cls is None:
                raise ConfigError(f"unknown layer kind {spec.kind!r}")
            if cls.elementwise:
                if spec.width not in (None, width):
                    raise ConfigError(f"{spec.kind} layer cannot change width")
                out = width
            else:
                if spec.width is None or spec.width < 1:
                    raise ConfigError(f"{spec.kind} layer needs a positive width")
                out = spec.width
            self.layers.append(cls(width, out))
            width = out
        if width != self.state_dim:
            raise ConfigError(f"field output width {width} != state_dim {self.state_dim}")

        layout, fan_ins = [], []
        for i, layer in enumerate(self.layers):
            for suffix, shape, fan_in in layer.param_shapes():
                layout.append((f"{i}.{suffix}", shape))
                fan_ins.append(fan_in)
        if params is None:
            rng = np.random.default_rng(seed)
            chunks = []
            for (_, shape), fan_in in zip(layout, fan_ins):
                s = 1.0 / math.sqrt(fan_in)
                chunks.append(rng.uniform(-s, s, size=int(np.prod(shape))))
            values = np.concatenate(chunks) if chunks else np.zeros(0)
            params = ParamVector(values, layout)
        elif not isinstance(params, ParamVector):
            params = ParamVector(params, layout)
        elif params.layout != layout:
            raise DimensionError("parameter layout does not match the architecture")
        self.params = params
        self._version = 0
        self._bind()

    def _bind(self):
        self._views = []
        self._gslices = []
        for i, layer in enumerate(self.layers):
            names = [suffix for suffix, _, _ in layer.param_shapes()]
            self._views.append({n: self.params.segment(f"{i}.{n}") for n in names})
            self._gslices.append({n: self.params.slice_of(f"{i}.{n}") for n in names})

    @property
    def param_dim(self) -> int:
        return len(self.params)

    @property
    def version(self) -> int:
        return self._version

    def set_params(self, values):
        values = np.asarray(values.values if isinstance(values, ParamVector) else values,
                            dtype=np.float64).reshape(-1)
        if values.size != self.param_dim:
            raise DimensionError(f"expected {self.param_dim} parameters, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("parameters must be finite")
        self.params.values[:] = values
        self._version += 1

    def copy(self) -> "VectorField":
        return VectorField(self.specs, self.state_dim, self.params.copy())

    # -- evaluation ------------------------------------------------------------------

    def eval(self, z, t: float) -> tuple[np.ndarray, Tape]:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.state_dim,):
            raise DimensionError(f"state has shape {z.shape}, expected ({self.state_dim},)")
        t = float(t)
        if not (math.isfinite(t) and np.all(np.isfinite(z))):
            raise NonFiniteError(f"non-finite input to field eval at t={t}")
        tape = Tape(self, self._version, z, t)
        x = z
        for layer, p in zip(self.layers, self._views):
            x, cache = layer.forward(x, t, p)
            tape.caches.append(cache)
        return x, tape

    def __call__(self, z, t):
        return self.eval(z, t)[0]

    def _check(self, tape: Tape, a) -> np.ndarray:
        if tape.field is not self or tape.version != self._version:
            raise StaleTapeError("tape was recorded for different parameters")
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (self.state_dim,):
            raise DimensionError(f"cotangent has shape {a.shape}, expected ({self.state_dim},)")
        return a

    def vjp(self, tape: Tape, a, want_params: bool = True):
        """Return ``(a^T df/dz, a^T df/dtheta)`` from one reverse sweep."""
        g = self._check(tape, a)
        gtheta = np.zeros(self.param_dim) if want_params else None
        for i in range(len(self.layers) - 1, -1, -1):
            g, grads = self.layers[i].backward(tape.caches[i], g, self._views[i], want_params)
            if want_params:
                for name, value in grads.items():
                    gtheta[self._gslices[i][name]] += np.ravel(value)
        return g, gtheta

    def vjp_state(self, tape: Tape, a) -> np.ndarray:
        return self.vjp(tape, a, want_params=False)[0]

    def vjp_params(self, tape: Tape, a) -> ParamVector:
        return self.params.with_values(self.vjp(tape, a)[1])

    def jacobian_state(self, z, t) -> np.ndarray:
        """df/dz as a (state_dim, state_dim) matrix, one VJP per row."""
        _, tape = self.eval(z, t)
        eye = np.eye(self.state_dim)
        return np.stack([self.vjp_state(tape, e) for e in eye])

    def jacobian_params(self, z, t) -> np.ndarray:
        """df/dtheta as a (state_dim, param_dim) matrix."""
        _, tape = self.eval(z, t)
        eye = np.eye(self.state_dim)
        return np.stack([self.vjp(tape, e)[1] for e in eye])

    # -- serialization ---------------------------------------------------------------

    def describe(self) -> str:
        lines = [f"state_dim = {self.state_dim}"]
        lines += [f"layer = {layer.describe()}" for layer in self.layers]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_description(cls, text: str, params=None, seed: int = 0) -> "VectorField":
        state_dim = None
        specs = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "state_dim":
                state_dim = int(value)
            elif key == "layer":
                specs.append(_as_spec(value))
            else:
                raise ConfigError(f"unknown architecture key {key!r}")
        if state_dim is None:
            raise ConfigError("architecture description lacks state_dim")
        return cls(specs, state_dim, params=params, seed=seed)


def _as_spec(s) -> LayerSpec:
    if isinstance(s, LayerSpec):
        return s
    if isinstance(s, str):
        parts = s.split()
        if not parts or len(parts) > 2:
            raise ConfigError(f"bad layer spec {s!r}")
        return LayerSpec(parts[0], int(parts[1]) if len(parts) == 2 else None)
    kind, *rest = s
    return LayerSpec(kind, int(rest[0]) if rest else None)


# ---------------------------------------------------------------------------
# Common fields
# ---------------------------------------------------------------------------


def mlp_field(state_dim: int, hidden: int, n_hidden: int = 1, activation: str = "tanh",
              seed: int = 0) -> VectorField:
    """affine -> act -> ... -> affine, with ``n_hidden`` hidden layers."""
    layers: list = []
    for _ in range(n_hidden):
        layers += [("affine", hidden), (activation,)]
    layers.append(("affine", state_dim))
    return VectorField(layers, state_dim, seed=seed)


def linear_field(matrix) -> VectorField:
    """f(z) = W z with W initialised to ``matrix``."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    d = matrix.shape[0]
    return VectorField([("linear", d)], d, params=matrix.reshape(-1))


def constant_field(value) -> VectorField:
    """f(z) = theta, independent of the state."""
    value = np.atleast_1d(np.asarray(value, dtype=np.float64))
    return VectorField([("const", value.size)], value.size, params=value)


def cubic_field(matrix) -> VectorField:
    """f(z) = W z**3 (componentwise cube) with W initialised to ``matrix``."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    d = matrix.shape[0]
    return VectorField([("cube",), ("linear", d)], d, params=matrix.reshape(-1))
