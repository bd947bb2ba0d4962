"""Runtime values and the function library of the optimizer DSL.

A value is one of three kinds:

* scalar -- a Python float (``np.float64`` is accepted, it subclasses float)
* array  -- a float64 ``np.ndarray`` with at least one dimension
* tree   -- a :class:`Tree`, an ordered map from names to scalars/arrays

Casting is deliberately narrow: a scalar broadcasts to anything, two arrays
must have identical shapes, two trees must have identical key sequences and
their leaves follow the same rule. Arrays never mix with trees.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

SCALAR = "scalar"
ARRAY = "array"
TREE = "tree"

EPS = 1e-8


class CastError(ValueError):
    """Base class for casting and arity failures."""


class ShapeMismatch(CastError):
    pass


class SchemaMismatch(CastError):
    pass


class ArityError(CastError):
    pass


class KindError(CastError):
    """An argument that must be a scalar was not."""


@functools.lru_cache(maxsize=None)
def _layout_info(layout):
    sizes = [math.prod(shape) for _, shape in layout]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.intp)
    index = {name: i for i, (name, _) in enumerate(layout)}
    return sizes, offsets, index


@functools.lru_cache(maxsize=None)
def _expand_index(src, dst):
    """Gather indices that broadcast scalar leaves of ``src`` onto ``dst``."""
    _, src_off, _ = _layout_info(src)
    parts = []
    for i, ((_, s_shape), (_, d_shape)) in enumerate(zip(src, dst)):
        n = math.prod(d_shape)
        if s_shape == d_shape:
            parts.append(np.arange(src_off[i], src_off[i] + n))
        else:
            parts.append(np.full(n, src_off[i]))
    return np.concatenate(parts).astype(np.intp)


class Tree:
    """Ordered map of named leaves stored as one flat float64 buffer.

    ``layout`` is a tuple of ``(name, shape)`` pairs; a leaf with shape ``()``
    is a scalar. Elementwise functions act on the flat buffer directly, so a
    tree costs the same as one array of its total size.
    """

    __slots__ = ("layout", "data")

    def __init__(self, layout, data):
        self.layout = layout
        self.data = data

    @classmethod
    def from_dict(cls, leaves: Mapping[str, object]) -> "Tree":
        layout = []
        chunks = []
        for name, leaf in leaves.items():
            if isinstance(leaf, Tree):
                raise KindError("nested trees are not supported")
            arr = np.asarray(leaf, dtype=np.float64)
            if any(d <= 0 for d in arr.shape):
                raise ShapeMismatch(f"leaf {name!r} has an empty dimension")
            layout.append((str(name), tuple(arr.shape)))
            chunks.append(arr.ravel())
        if not layout:
            raise SchemaMismatch("a tree needs at least one leaf")
        data = np.concatenate(chunks) if len(chunks) > 1 else chunks[0].copy()
        return cls(tuple(layout), data)

    def keys(self):
        return [name for name, _ in self.layout]

    def __len__(self):
        return len(self.layout)

    def __iter__(self):
        return iter(self.keys())

    def __getitem__(self, name):
        _, offsets, index = _layout_info(self.layout)
        i = index[name]
        shape = self.layout[i][1]
        chunk = self.data[offsets[i]:offsets[i + 1]]
        if shape == ():
            return float(chunk[0])
        return chunk.reshape(shape)

    def items(self):
        return [(name, self[name]) for name in self.keys()]

    def to_dict(self):
        return dict(self.items())

    def replace_data(self, data) -> "Tree":
        return Tree(self.layout, data)

    def __repr__(self):
        body = ", ".join(f"{k}: {v!r}" for k, v in self.items())
        return f"Tree({{{body}}})"

    # Arithmetic goes through the DSL casting rules.
    def __add__(self, other):
        return binary("+", self, other)

    def __radd__(self, other):
        return binary("+", other, self)

    def __sub__(self, other):
        return binary("-", self, other)

    def __rsub__(self, other):
        return binary("-", other, self)

    def __mul__(self, other):
        return binary("*", self, other)

    def __rmul__(self, other):
        return binary("*", other, self)

    def __truediv__(self, other):
        return binary("/", self, other)

    def __rtruediv__(self, other):
        return binary("/", other, self)

    def __neg__(self):
        return Tree(self.layout, -self.data)


def kind_of(x) -> str:
    if isinstance(x, Tree):
        return TREE
    if isinstance(x, np.ndarray) and x.ndim > 0:
        return ARRAY
    return SCALAR


def as_value(x):
    """Coerce Python/numpy input into a canonical runtime value."""
    if isinstance(x, Tree):
        return x
    if isinstance(x, Mapping):
        return Tree.from_dict(x)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return float(arr)
    if any(d <= 0 for d in arr.shape):
        raise ShapeMismatch("arrays need positive dimensions")
    return arr


def flat(x) -> np.ndarray:
    """Every number of ``x`` as one vector: tree leaves in order, row-major."""
    if isinstance(x, Tree):
        return x.data
    if isinstance(x, np.ndarray):
        return x.ravel()
    return np.array([x], dtype=np.float64)


def zeros_like(x):
    if isinstance(x, Tree):
        return Tree(x.layout, np.zeros_like(x.data))
    if isinstance(x, np.ndarray):
        return np.zeros_like(x)
    return 0.0


def _scalar(x):
    # numpy returns 0-d results as np.float64; keep them as plain floats.
    return float(x)


def _tree_layout_cast(a, b):
    if a == b:
        return a
    if [n for n, _ in a] != [n for n, _ in b]:
        raise SchemaMismatch(f"tree keys differ: {[n for n, _ in a]} vs {[n for n, _ in b]}")
    out = []
    for (name, sa), (_, sb) in zip(a, b):
        if sa == sb or sb == ():
            out.append((name, sa))
        elif sa == ():
            out.append((name, sb))
        else:
            raise ShapeMismatch(f"leaf {name!r}: {sa} vs {sb}")
    return tuple(out)


def _operands(x, y):
    """Cast two values to a common kind; returns (x', y', wrap)."""
    tx, ty = isinstance(x, Tree), isinstance(y, Tree)
    if tx and ty:
        if x.layout is y.layout or x.layout == y.layout:
            layout = x.layout
            return x.data, y.data, layout
        layout = _tree_layout_cast(x.layout, y.layout)
        xd = x.data if x.layout == layout else x.data[_expand_index(x.layout, layout)]
        yd = y.data if y.layout == layout else y.data[_expand_index(y.layout, layout)]
        return xd, yd, layout
    if tx:
        if isinstance(y, np.ndarray) and y.ndim > 0:
            raise SchemaMismatch("cannot combine a tree with an array")
        return x.data, y, x.layout
    if ty:
        if isinstance(x, np.ndarray) and x.ndim > 0:
            raise SchemaMismatch("cannot combine an array with a tree")
        return x, y.data, y.layout
    ax = isinstance(x, np.ndarray) and x.ndim > 0
    ay = isinstance(y, np.ndarray) and y.ndim > 0
    if ax and ay and x.shape != y.shape:
        raise ShapeMismatch(f"array shapes differ: {x.shape} vs {y.shape}")
    return x, y, None


def _wrap(result, layout):
    if layout is not None:
        return Tree(layout, result)
    if isinstance(result, np.ndarray) and result.ndim > 0:
        return result
    return _scalar(result)


def _unary(op):
    def impl(x):
        if type(x) is Tree:
            return Tree(x.layout, op(x.data))
        return _wrap(op(x), None)
    return impl


def _binary(op):
    def impl(x, y):
        # Fast paths for the common tree/tree and tree/float cases.
        tx, ty = type(x), type(y)
        if tx is Tree:
            if ty is Tree and x.layout is y.layout:
                return Tree(x.layout, op(x.data, y.data))
            if ty is float:
                return Tree(x.layout, op(x.data, y))
        elif ty is Tree and tx is float:
            return Tree(y.layout, op(x, y.data))
        xd, yd, layout = _operands(x, y)
        return _wrap(op(xd, yd), layout)
    return impl


def _require_scalar(x, what):
    if isinstance(x, Tree) or (isinstance(x, np.ndarray) and x.ndim > 0):
        raise KindError(f"{what} must be a scalar")


def _sumsq(v):
    return np.sum(v * v)


def norm(x):
    if isinstance(x, Tree):
        sizes, offsets, _ = _layout_info(x.layout)
        sq = np.add.reduceat(x.data * x.data, offsets[:-1])
        return Tree(tuple((name, ()) for name, _ in x.layout), np.sqrt(sq))
    return _scalar(np.sqrt(_sumsq(flat(x))))


def global_norm(x):
    return _scalar(np.sqrt(_sumsq(flat(x))))


def _broadcast_flat(x, y):
    xd, yd, _ = _operands(x, y)
    xd = np.asarray(xd, dtype=np.float64)
    yd = np.asarray(yd, dtype=np.float64)
    if xd.ndim == 0 and yd.ndim > 0:
        xd = np.broadcast_to(xd, yd.shape)
    elif yd.ndim == 0 and xd.ndim > 0:
        yd = np.broadcast_to(yd, xd.shape)
    return xd.ravel(), yd.ravel()


def dot(x, y):
    xf, yf = _broadcast_flat(x, y)
    return _scalar(np.sum(xf * yf))


def cosine_sim(x, y):
    xf, yf = _broadcast_flat(x, y)
    return _scalar(np.sum(xf * yf) / (np.sqrt(_sumsq(xf)) * np.sqrt(_sumsq(yf))))


def clip_by_global_norm(x, c):
    _require_scalar(c, "clip threshold")
    gn = global_norm(x)
    if gn <= c:
        return x
    # numpy division: a zero norm with a negative threshold gives inf, not an exception.
    scale = np.divide(c, gn)
    if isinstance(x, Tree):
        return Tree(x.layout, x.data * scale)
    return _wrap(x * scale, None)


_add = _binary(np.add)
_mul = _binary(np.multiply)


def interpolate(x, y, a):
    _require_scalar(a, "interpolation weight")
    if type(x) is Tree and type(y) is Tree and x.layout is y.layout:
        return Tree(x.layout, (1.0 - a) * x.data + a * y.data)
    # Cast first so a mismatch is reported even when one side is scaled away.
    _operands(x, y)
    return _add(_mul(1.0 - a, x), _mul(a, y))


def _cube(v):
    return v * v * v


def _exp10(v):
    return np.power(10.0, v)


def _reciprocal(v):
    return np.divide(1.0, v)


@dataclass(frozen=True)
class FunctionSpec:
    """One DSL function.

    ``shape_rule`` names how the output kind derives from the inputs; the
    static analyser implements each rule symbolically.
    """

    name: str
    arity: int
    impl: Callable = field(repr=False)
    shape_rule: str
    commutative: bool = False
    aliases: tuple = ()
    display: str | None = None
    infix: bool = False

    @property
    def printed(self) -> str:
        return self.display or self.name


_UNARY_MATH = [
    ("abs", np.abs),
    ("cos", np.cos),
    ("sin", np.sin),
    ("tan", np.tan),
    ("arcsin", np.arcsin),
    ("arccos", np.arccos),
    ("arctan", np.arctan),
    ("exp", np.exp),
    ("log", np.log),
    ("sinh", np.sinh),
    ("cosh", np.cosh),
    ("tanh", np.tanh),
    ("arcsinh", np.arcsinh),
    ("arccosh", np.arccosh),
    ("arctanh", np.arctanh),
    ("sign", np.sign),
    ("exp2", np.exp2),
    ("exp10", _exp10),
    ("expm1", np.expm1),
    ("log10", np.log10),
    ("log2", np.log2),
    ("log1p", np.log1p),
    ("square", np.square),
    ("sqrt", np.sqrt),
    ("cube", _cube),
    ("cbrt", np.cbrt),
    ("reciprocal", _reciprocal),
]


def _build_registry():
    specs = [FunctionSpec(name, 1, _unary(op), "elementwise") for name, op in _UNARY_MATH]
    specs += [
        FunctionSpec("norm", 1, norm, "norm"),
        FunctionSpec("global_norm", 1, global_norm, "reduce"),
        FunctionSpec("+", 2, _add, "elementwise", True, ("add",), infix=True),
        FunctionSpec("-", 2, _binary(np.subtract), "elementwise", False, ("subtract",), infix=True),
        FunctionSpec("*", 2, _mul, "elementwise", True, ("multiply",), infix=True),
        FunctionSpec("/", 2, _binary(np.divide), "elementwise", False, ("divide",), infix=True),
        FunctionSpec("power", 2, _binary(np.power), "elementwise"),
        FunctionSpec("maximum", 2, _binary(np.maximum), "elementwise", True, ("max",)),
        FunctionSpec("minimum", 2, _binary(np.minimum), "elementwise", True, ("min",)),
        FunctionSpec("dot", 2, dot, "reduce", True),
        FunctionSpec("cosine_sim", 2, cosine_sim, "reduce", True),
        FunctionSpec("clip_by_global_norm", 2, clip_by_global_norm, "clip", False, ("clip",), "clip"),
        FunctionSpec("interpolate", 3, interpolate, "interpolate", False, ("interp",), "interp"),
        FunctionSpec("get_pi", 0, lambda: math.pi, "constant"),
        FunctionSpec("get_e", 0, lambda: math.e, "constant"),
        FunctionSpec("get_eps", 0, lambda: EPS, "constant"),
    ]
    return {s.name: s for s in specs}


REGISTRY: dict[str, FunctionSpec] = _build_registry()
FUNCTION_NAMES: tuple[str, ...] = tuple(REGISTRY)
_LOOKUP = {alias: spec for spec in REGISTRY.values() for alias in (spec.name, *spec.aliases)}


def lookup(name: str) -> FunctionSpec:
    """Resolve a function name or alias; raises KeyError if unknown."""
    return _LOOKUP[name]


def apply_function(fn: FunctionSpec | str, args: Iterable) -> object:
    """Evaluate ``fn`` on runtime values.

    Numeric domain problems (log of a negative, 0/0) give NaN; only casting
    and arity violations raise.
    """
    if isinstance(fn, str):
        fn = lookup(fn)
    args = list(args)
    if len(args) != fn.arity:
        raise ArityError(f"{fn.name} takes {fn.arity} arguments, got {len(args)}")
    with np.errstate(all="ignore"):
        return fn.impl(*args)


def binary(name: str, x, y):
    return REGISTRY[name].impl(x, y)


def call(name: str, *args):
    return apply_function(name, args)


def constants() -> tuple[float, float, float]:
    return math.pi, math.e, EPS


def values_equal(a, b, *, rtol=0.0, atol=0.0) -> bool:
    """Structural equality with NaN == NaN; exact unless tolerances are given."""
    if kind_of(a) != kind_of(b):
        return False
    if isinstance(a, Tree):
        if a.layout != b.layout:
            return False
        a, b = a.data, b.data
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        return False
    if rtol or atol:
        return bool(np.allclose(a, b, rtol=rtol, atol=atol, equal_nan=True))
    return bool(np.array_equal(a, b, equal_nan=True))
