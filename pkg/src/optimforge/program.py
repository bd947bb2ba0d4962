"""Straight-line optimizer programs: representation, text/JSON forms,
interpretation and mutation.

A program is the body of ``def train(w, g, m, v, lr)``: a list of
assignments, each calling one library function on variables or float
constants, followed by the fixed ``return update, m, v``. Statement
arguments are plain Python values: a ``str`` names a variable, a ``float``
is a constant.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Union

import numpy as np

from . import values
from .values import FUNCTION_NAMES, REGISTRY, lookup

INPUTS = ("w", "g", "m", "v", "lr")
RETURNS = ("update", "m", "v")
MAX_STATEMENTS = 64

Arg = Union[str, float]


class ProgramError(Exception):
    """Base class for program text/structure errors."""

    def __init__(self, msg, line=None, col=None):
        self.line = line
        self.col = col
        where = f" (line {line}, column {col})" if line is not None else ""
        super().__init__(msg + where)


class ProgramSyntaxError(ProgramError, SyntaxError):
    pass


class UnknownFunction(ProgramError):
    pass


class UndefinedVariable(ProgramError):
    pass


@dataclass(frozen=True)
class Statement:
    out: str
    fn: str
    args: tuple = ()

    def __post_init__(self):
        spec = REGISTRY[self.fn]
        if len(self.args) != spec.arity:
            raise values.ArityError(f"{self.fn} takes {spec.arity} arguments, got {len(self.args)}")

    def variables(self):
        return [a for a in self.args if isinstance(a, str)]


@dataclass(frozen=True)
class Program:
    statements: tuple = ()
    inputs: tuple = field(default=INPUTS, repr=False)
    returns: tuple = field(default=RETURNS, repr=False)

    def __len__(self):
        return len(self.statements)

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("_compiled", None)
        return state

    @cached_property
    def _compiled(self):
        return _compile(self)

    def with_statements(self, statements) -> "Program":
        return Program(tuple(statements), self.inputs, self.returns)

    def defined_before(self, index: int) -> list[str]:
        """Variable names bound just before statement ``index`` runs, in
        first-definition order."""
        names = list(self.inputs)
        seen = set(names)
        for s in self.statements[:index]:
            if s.out not in seen:
                seen.add(s.out)
                names.append(s.out)
        return names

    def __str__(self):
        return print_program(self)


def _compile(p: Program):
    """Turn ``p`` into one Python function of the five inputs.

    Variables become locals prefixed with ``x_`` and function implementations
    are bound as defaults, so a step costs one call per statement.
    """
    impls = {}
    consts = {}

    def ref(a):
        if isinstance(a, str):
            return "x_" + a
        key = f"c{len(consts)}"
        consts[key] = a
        return key

    assigned = set(p.inputs) | {s.out for s in p.statements}
    missing = [r for r in p.returns if r not in assigned]
    if missing:
        raise UndefinedVariable(f"returned variable {missing[0]!r} is never assigned")
    body = []
    for s in p.statements:
        fname = impls.setdefault(s.fn, f"f{len(impls)}")
        body.append(f"    x_{s.out} = {fname}({', '.join(ref(a) for a in s.args)})")
    body.append("    return " + ", ".join("x_" + r for r in p.returns))
    bound = {**{k: REGISTRY[fn].impl for fn, k in impls.items()}, **consts}
    params = ", ".join("x_" + i for i in p.inputs)
    defaults = "".join(f", {k}={k}" for k in bound)
    src = f"def step({params}{defaults}):\n" + "\n".join(body) + "\n"
    namespace = {}
    exec(compile(src, "<program>", "exec"), dict(bound), namespace)
    return namespace["step"]


def execute(program: Program, w, g, m, v, lr):
    """Run one step of ``program``; returns ``(update, m, v)``.

    Statements run in order. NaN and Inf are ordinary values here.
    """
    with np.errstate(all="ignore"):
        return program._compiled(w, g, m, v, lr)


# -- text form ---------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)"
    r"|(?P<name>[A-Za-z_]\w*)"
    r"|(?P<op>[-+*/(),=:]))"
)
_SPECIAL = {"inf": float("inf"), "nan": float("nan")}


def _tokenize(text, line):
    pos = 0
    tokens = []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ProgramSyntaxError(f"unexpected character {text[pos]!r}", line, pos + 1)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind) + 1))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    return tokens


class _LineParser:
    def __init__(self, text, line):
        self.tokens = _tokenize(text, line)
        self.i = 0
        self.line = line

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None, None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if tok[0] is None:
            col = self.tokens[-1][2] + len(self.tokens[-1][1]) if self.tokens else 1
            raise ProgramSyntaxError("unexpected end of line", self.line, col)
        if (kind and tok[0] != kind) or (value and tok[1] != value):
            want = value or kind
            raise ProgramSyntaxError(f"expected {want!r}, found {tok[1]!r}", self.line, tok[2])
        self.i += 1
        return tok

    def done(self):
        tok = self.peek()
        if tok[0] is not None:
            raise ProgramSyntaxError(f"unexpected {tok[1]!r}", self.line, tok[2])

    def arg(self):
        kind, text, col = self.peek()
        sign = 1.0
        if kind == "op" and text in "+-":
            self.take()
            sign = -1.0 if text == "-" else 1.0
            kind, text, col = self.peek()
            if kind == "name" and text in _SPECIAL:
                self.take()
                return sign * _SPECIAL[text], col
            kind, text, col = self.take("num")
            return sign * float(text), col
        if kind == "num":
            self.take()
            return float(text), col
        if kind == "name":
            self.take()
            if text in _SPECIAL:
                return _SPECIAL[text], col
            return text, col
        self.take("name")  # raises with a useful message


def _resolve(name, line, col):
    try:
        return lookup(name).name
    except KeyError:
        raise UnknownFunction(f"unknown function {name!r}", line, col) from None


def _parse_statement(p: _LineParser):
    _, out, _ = p.take("name")
    if out in _SPECIAL:
        raise ProgramSyntaxError(f"cannot assign to {out!r}", p.line, 1)
    p.take("op", "=")
    kind, text, col = p.peek()
    nxt = p.tokens[p.i + 1] if p.i + 1 < len(p.tokens) else (None, None, None)
    if kind == "name" and nxt[1] == "(" and text not in _SPECIAL:
        p.take()
        fn = _resolve(text, p.line, col)
        p.take("op", "(")
        args = []
        if p.peek()[1] != ")":
            args.append(p.arg())
            while p.peek()[1] == ",":
                p.take()
                args.append(p.arg())
        p.take("op", ")")
        p.done()
    else:
        left = p.arg()
        _, op, op_col = p.take("op")
        if op not in "+-*/":
            raise ProgramSyntaxError(f"expected an operator, found {op!r}", p.line, op_col)
        right = p.arg()
        p.done()
        fn, args = op, [left, right]
    arity = REGISTRY[fn].arity
    if len(args) != arity:
        raise ProgramSyntaxError(f"{fn} takes {arity} arguments, got {len(args)}", p.line, col)
    return out, fn, args


def parse(text: str) -> Program:
    """Parse the listing form produced by :func:`print_program`.

    Accepts function aliases (``interp``, ``clip``, ``min``...) and infix
    ``a op b`` for the four arithmetic operators. ``#`` starts a comment.
    """
    lines = [(n, raw.split("#", 1)[0]) for n, raw in enumerate(text.splitlines(), 1)]
    lines = [(n, t) for n, t in lines if t.strip()]
    if not lines:
        raise ProgramSyntaxError("empty program", 1, 1)

    n, head = lines[0]
    hp = _LineParser(head, n)
    hp.take("name", "def")
    hp.take("name", "train")
    hp.take("op", "(")
    for i, name in enumerate(INPUTS):
        if i:
            hp.take("op", ",")
        hp.take("name", name)
    hp.take("op", ")")
    hp.take("op", ":")
    hp.done()

    n, tail = lines[-1]
    if len(lines) < 2:
        raise ProgramSyntaxError("missing return statement", n, 1)
    tp = _LineParser(tail, n)
    tp.take("name", "return")
    for i, name in enumerate(RETURNS):
        if i:
            tp.take("op", ",")
        tp.take("name", name)
    tp.done()

    defined = set(INPUTS)
    statements = []
    for n, body in lines[1:-1]:
        p = _LineParser(body, n)
        if p.peek()[1] == "return":
            raise ProgramSyntaxError("return must be the last statement", n, p.peek()[2])
        out, fn, args = _parse_statement(p)
        for value, col in args:
            if isinstance(value, str) and value not in defined:
                raise UndefinedVariable(f"variable {value!r} used before definition", n, col)
        statements.append(Statement(out, fn, tuple(value for value, _ in args)))
        defined.add(out)
    # A never-assigned ``update`` parses; static checks reject it later.
    return Program(tuple(statements))


def format_const(c: float) -> str:
    # repr is the shortest decimal that round-trips a float64.
    return repr(float(c))


def _fmt_arg(a: Arg) -> str:
    return a if isinstance(a, str) else format_const(a)


def format_statement(s: Statement) -> str:
    spec = REGISTRY[s.fn]
    if spec.infix:
        return f"{s.out} = {_fmt_arg(s.args[0])} {spec.name} {_fmt_arg(s.args[1])}"
    return f"{s.out} = {spec.printed}({', '.join(_fmt_arg(a) for a in s.args)})"


def print_program(p: Program) -> str:
    lines = [f"def train({', '.join(INPUTS)}):"]
    lines += ["  " + format_statement(s) for s in p.statements]
    lines.append(f"  return {', '.join(RETURNS)}")
    return "\n".join(lines) + "\n"


def to_json(p: Program) -> dict:
    return {
        "statements": [
            {
                "out": s.out,
                "fn": s.fn,
                "args": [{"var": a} if isinstance(a, str) else {"const": float(a)} for a in s.args],
            }
            for s in p.statements
        ]
    }


def from_json(doc) -> Program:
    if isinstance(doc, str):
        doc = json.loads(doc)
    statements = []
    for entry in doc["statements"]:
        try:
            fn = lookup(entry["fn"]).name
        except KeyError:
            raise UnknownFunction(f"unknown function {entry['fn']!r}") from None
        args = tuple(a["var"] if "var" in a else float(a["const"]) for a in entry["args"])
        statements.append(Statement(entry["out"], fn, args))
    return Program(tuple(statements))


def load_asset(name: str) -> Program:
    """Load a shipped listing such as ``"adamw"`` or ``"lion"``."""
    text = resources.files("optimforge").joinpath("programs", f"{name}.prog").read_text("utf-8")
    return parse(text)


def asset_names() -> list[str]:
    root = resources.files("optimforge").joinpath("programs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".prog"))


def lion_program(beta1=0.9, beta2=0.99, weight_decay=0.0) -> Program:
    """Lion as a DSL program in the train(w, g, m, v, lr) signature."""
    return Program((
        Statement("update", "interpolate", ("g", "m", float(beta1))),
        Statement("update", "sign", ("update",)),
        Statement("m", "interpolate", ("g", "m", float(beta2))),
        Statement("wd", "*", ("w", float(weight_decay))),
        Statement("update", "+", ("update", "wd")),
        Statement("update", "*", ("update", "lr")),
    ))


# -- mutation ------------------------------------------------------------------

@dataclass(frozen=True)
class MutationConfig:
    """Knobs for :func:`mutate`.

    ``constants_only`` restricts mutation to rescaling existing constants,
    i.e. hyperparameter tuning of the parent's structure.
    """

    insert_weight: float = 1.0
    delete_weight: float = 1.0
    modify_weight: float = 1.0
    var_arg_prob: float = 0.8
    fresh_name_prob: float = 0.5
    perturb_const_prob: float = 0.5
    max_statements: int = MAX_STATEMENTS
    max_retries: int = 100
    constants_only: bool = False

    def __post_init__(self):
        w = (self.insert_weight, self.delete_weight, self.modify_weight)
        if min(w) < 0 or sum(w) <= 0:
            raise ValueError("mutation weights must be nonnegative and not all zero")

    def to_dict(self):
        return dict(self.__dict__)


_FRESH = re.compile(r"v(\d+)$")


def fresh_name(p: Program) -> str:
    used = [int(m.group(1)) for s in p.statements if (m := _FRESH.match(s.out))]
    return f"v{max(used, default=0) + 1}"


def _random_arg(rng, names, cfg):
    if rng.random() < cfg.var_arg_prob:
        return names[rng.integers(len(names))]
    return float(rng.standard_normal())


def insert_statement(p: Program, rng, cfg: MutationConfig) -> Program:
    if len(p) >= cfg.max_statements:
        return p
    pos = int(rng.integers(len(p) + 1))
    spec = REGISTRY[FUNCTION_NAMES[rng.integers(len(FUNCTION_NAMES))]]
    names = p.defined_before(pos)
    args = tuple(_random_arg(rng, names, cfg) for _ in range(spec.arity))
    if rng.random() < cfg.fresh_name_prob:
        out = fresh_name(p)
    else:
        targets = names + ([RETURNS[0]] if RETURNS[0] not in names else [])
        out = targets[rng.integers(len(targets))]
    stmts = list(p.statements)
    stmts.insert(pos, Statement(out, spec.name, args))
    return p.with_statements(stmts)


def delete_statement(p: Program, rng, index=None) -> Program:
    if index is None:
        index = int(rng.integers(len(p)))
    stmts = list(p.statements)
    del stmts[index]
    return p.with_statements(stmts)


def perturb_constant(c: float, a: float) -> float:
    return float(c * 2.0 ** a)


def modify_argument(p: Program, rng, cfg: MutationConfig) -> Program:
    if cfg.constants_only:
        slots = [(i, j) for i, s in enumerate(p.statements) for j, a in enumerate(s.args)
                 if not isinstance(a, str)]
    else:
        slots = [(i, j) for i, s in enumerate(p.statements) for j in range(len(s.args))]
    if not slots:
        return p
    i, j = slots[rng.integers(len(slots))]
    s = p.statements[i]
    old = s.args[j]
    if cfg.constants_only or (not isinstance(old, str) and rng.random() < cfg.perturb_const_prob):
        new = perturb_constant(old, rng.standard_normal())
    else:
        new = _random_arg(rng, p.defined_before(i), cfg)
    args = s.args[:j] + (new,) + s.args[j + 1:]
    stmts = list(p.statements)
    stmts[i] = Statement(s.out, s.fn, args)
    return p.with_statements(stmts)


def mutate(p: Program, cfg: MutationConfig, rng: np.random.Generator) -> Program:
    """Apply exactly one insert, delete or modify mutation.

    The child may be invalid; callers re-mutate until static checks pass.
    When insertion hits ``cfg.max_statements`` (or nothing is modifiable) the
    parent itself is returned, which callers treat as a failed attempt.
    """
    if cfg.constants_only:
        return modify_argument(p, rng, cfg)
    weights = np.array([cfg.insert_weight, cfg.delete_weight, cfg.modify_weight], dtype=float)
    kind = int(rng.choice(3, p=weights / weights.sum()))
    if kind == 1 and len(p) == 0:
        kind = 0
    if kind == 0:
        return insert_statement(p, rng, cfg)
    if kind == 1:
        return delete_statement(p, rng)
    return modify_argument(p, rng, cfg)


def random_program(rng: np.random.Generator, cfg: MutationConfig, max_length: int = 16) -> Program:
    """A program built from scratch by ``L ~ U{1..max_length}`` insertions."""
    p = Program()
    for _ in range(int(rng.integers(1, max_length + 1))):
        p = insert_statement(p, rng, cfg)
    return p


def estimate_space(n_functions: int, n_variables: int, n_args: int, length: int) -> int:
    """Rough count of programs: ``n_f**l * n_v**(n_a*l)``."""
    for x in (n_functions, n_variables, n_args, length):
        if int(x) != x or x < 1:
            raise ValueError("all arguments must be positive integers")
    return int(n_functions) ** int(length) * int(n_variables) ** (int(n_args) * int(length))
