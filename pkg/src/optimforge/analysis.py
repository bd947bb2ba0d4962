"""Abstract execution of programs.

The same statement walk is run over three kinds of abstract values:

* kinds/shapes, to reject programs that would fail at run time,
* 128-bit digests, to recognise programs computing the same outputs,
* sets of statement indices, to find statements no output depends on.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from .program import INPUTS, RETURNS, Program
from .values import ARRAY, REGISTRY, SCALAR, TREE, Tree, kind_of

HASH_VERSION = b"optimforge-fhash-v1"


class ProgramTypeError(TypeError):
    """Static check failure; ``index`` is the statement, or ``len(program)``
    when the problem is with the returned values."""

    def __init__(self, index: int, reason: str):
        self.index = index
        self.reason = reason
        super().__init__(f"statement {index}: {reason}")


@dataclass(frozen=True)
class AbstractValue:
    """Kind and shape of a value, without its numbers.

    ``shape`` is set for arrays; ``layout`` (``(name, shape)`` pairs, shape
    ``()`` for scalar leaves) for trees.
    """

    kind: str
    shape: tuple | None = None
    layout: tuple | None = None

    def __str__(self):
        if self.kind == ARRAY:
            return f"array{list(self.shape)}"
        if self.kind == TREE:
            return "tree{" + ", ".join(f"{n}: {list(s)}" for n, s in self.layout) + "}"
        return "scalar"


A_SCALAR = AbstractValue(SCALAR)


def abstract_of(x) -> AbstractValue:
    kind = kind_of(x)
    if kind == TREE:
        return AbstractValue(TREE, layout=x.layout)
    if kind == ARRAY:
        return AbstractValue(ARRAY, shape=tuple(x.shape))
    return A_SCALAR


def signature_for(w) -> dict[str, AbstractValue]:
    """Input signature at step 0: state slots start shaped like the weights."""
    aw = w if isinstance(w, AbstractValue) else abstract_of(w)
    return {"w": aw, "g": aw, "m": aw, "v": aw, "lr": A_SCALAR}


def _cast(a: AbstractValue, b: AbstractValue) -> AbstractValue:
    if a.kind == SCALAR:
        return b
    if b.kind == SCALAR:
        return a
    if a.kind == ARRAY and b.kind == ARRAY:
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {list(a.shape)} vs {list(b.shape)}")
        return a
    if a.kind == TREE and b.kind == TREE:
        if a.layout == b.layout:
            return a
        if [n for n, _ in a.layout] != [n for n, _ in b.layout]:
            raise ValueError("tree schema mismatch")
        leaves = []
        for (name, sa), (_, sb) in zip(a.layout, b.layout):
            if sa == sb or sb == ():
                leaves.append((name, sa))
            elif sa == ():
                leaves.append((name, sb))
            else:
                raise ValueError(f"leaf {name!r} shape mismatch {list(sa)} vs {list(sb)}")
        return AbstractValue(TREE, layout=tuple(leaves))
    raise ValueError(f"cannot combine {a.kind} with {b.kind}")


def _apply_rule(rule: str, args: list[AbstractValue]) -> AbstractValue:
    if rule == "constant":
        return A_SCALAR
    if rule == "elementwise":
        out = args[0]
        for a in args[1:]:
            out = _cast(out, a)
        return out
    if rule == "norm":
        a = args[0]
        if a.kind == TREE:
            return AbstractValue(TREE, layout=tuple((n, ()) for n, _ in a.layout))
        return A_SCALAR
    if rule == "reduce":
        if len(args) == 2:
            _cast(args[0], args[1])
        return A_SCALAR
    if rule == "clip":
        if args[1].kind != SCALAR:
            raise ValueError("clip threshold must be a scalar")
        return args[0]
    if rule == "interpolate":
        if args[2].kind != SCALAR:
            raise ValueError("interpolation weight must be a scalar")
        return _cast(args[0], args[1])
    raise AssertionError(f"unknown shape rule {rule}")


def infer(p: Program, signature: dict[str, AbstractValue], *,
          stable_state: bool = False) -> dict[str, AbstractValue]:
    """Check ``p`` against an input signature; returns the kinds of
    ``update``, ``m`` and ``v``.

    ``update`` must have the kind and shape of ``w``. With ``stable_state``
    the returned ``m`` and ``v`` must too, so that every training step sees
    the signature the first one was checked against.
    """
    env = dict(signature)
    for i, s in enumerate(p.statements):
        spec = REGISTRY.get(s.fn)
        if spec is None:
            raise ProgramTypeError(i, f"unknown function {s.fn!r}")
        if len(s.args) != spec.arity:
            raise ProgramTypeError(i, f"{s.fn} takes {spec.arity} arguments, got {len(s.args)}")
        args = []
        for a in s.args:
            if isinstance(a, str):
                if a not in env:
                    raise ProgramTypeError(i, f"variable {a!r} used before definition")
                args.append(env[a])
            else:
                args.append(A_SCALAR)
        try:
            env[s.out] = _apply_rule(spec.shape_rule, args)
        except ValueError as exc:
            raise ProgramTypeError(i, f"{s.fn}: {exc}") from None
    end = len(p.statements)
    want = signature["w"]
    out = {}
    for name in RETURNS:
        if name not in env:
            raise ProgramTypeError(end, f"{name!r} is never assigned")
        if (name == "update" or stable_state) and env[name] != want:
            raise ProgramTypeError(end, f"{name!r} is {env[name]} but w is {want}")
        out[name] = env[name]
    return out


def is_valid(p: Program, signature, *, stable_state: bool = True) -> bool:
    try:
        infer(p, signature, stable_state=stable_state)
    except ProgramTypeError:
        return False
    return True


def _digest(*parts: bytes) -> bytes:
    h = hashlib.blake2b(digest_size=16, key=HASH_VERSION)
    for part in parts:
        h.update(part)
    return h.digest()


_INPUT_DIGESTS = {name: _digest(b"in\0", name.encode()) for name in INPUTS}
_UNASSIGNED = _digest(b"unassigned")
_FN_DIGESTS = {name: _digest(b"fn\0", name.encode()) for name in REGISTRY}


def _const_digest(c: float) -> bytes:
    return _digest(b"const\0", struct.pack("<d", c))


def value_digests(p: Program, canonical: bool = True) -> list[bytes]:
    """Digest of the value each statement produces, in statement order."""
    env = dict(_INPUT_DIGESTS)
    out = []
    for s in p.statements:
        children = [env[a] if isinstance(a, str) else _const_digest(a) for a in s.args]
        if canonical and REGISTRY[s.fn].commutative:
            children.sort()
        d = _digest(_FN_DIGESTS[s.fn], *children)
        env[s.out] = d
        out.append(d)
    return out


def functional_hash(p: Program, signature=None, canonical: bool = True) -> str:
    """32-hex-digit digest of how the returns are computed from the inputs.

    Variable names and statements no return depends on do not affect it.
    With ``canonical`` the arguments of commutative functions are sorted
    first; ``canonical=False`` gives the surface-order digest.
    ``signature`` is accepted for symmetry with :func:`infer` and unused.
    """
    env = dict(_INPUT_DIGESTS)
    for s, d in zip(p.statements, value_digests(p, canonical)):
        env[s.out] = d
    return _digest(b"prog\0", *(env.get(name, _UNASSIGNED) for name in RETURNS)).hex()


def live_statements(p: Program) -> frozenset[int]:
    """Indices of the statements some return value depends on."""
    deps: dict[str, frozenset] = {name: frozenset() for name in INPUTS}
    for i, s in enumerate(p.statements):
        acc = {i}
        for a in s.args:
            if isinstance(a, str):
                acc |= deps.get(a, frozenset())
        deps[s.out] = frozenset(acc)
    live = set()
    for name in RETURNS:
        live |= deps.get(name, frozenset())
    return frozenset(live)


def strip_redundant(p: Program) -> Program:
    live = live_statements(p)
    if len(live) == len(p.statements):
        return p
    return p.with_statements(s for i, s in enumerate(p.statements) if i in live)


def statement_multiset(p: Program) -> list[tuple]:
    """Statements up to variable renaming: each argument variable is replaced
    by the digest of the value it holds."""
    env = dict(_INPUT_DIGESTS)
    digests = value_digests(p, canonical=False)
    items = []
    for s, d in zip(p.statements, digests):
        args = tuple(env[a].hex() if isinstance(a, str) else ("const", a) for a in s.args)
        items.append((s.fn, args))
        env[s.out] = d
    return sorted(items, key=repr)


__all__ = [
    "AbstractValue",
    "ProgramTypeError",
    "Tree",
    "abstract_of",
    "functional_hash",
    "infer",
    "is_valid",
    "live_statements",
    "signature_for",
    "statement_multiset",
    "strip_redundant",
    "value_digests",
]
