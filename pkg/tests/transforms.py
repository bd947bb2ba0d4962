"""Semantics-preserving program rewrites used to probe the functional hash."""

from __future__ import annotations

import numpy as np

from optimforge.analysis import is_valid, signature_for
from optimforge.program import INPUTS, RETURNS, MutationConfig, Statement, load_asset, mutate
from optimforge.values import FUNCTION_NAMES, REGISTRY

SIG = signature_for(np.zeros(4))
_NAMES = "abcdefghijklmnopqrstuvwxyz"


def _fresh(rng, taken):
    while True:
        name = "t_" + "".join(_NAMES[i] for i in rng.integers(26, size=6))
        if name not in taken:
            taken.add(name)
            return name


def alpha_rename(p, rng):
    """Give every definition a fresh name except the final ones of the
    returned variables; each use follows the definition it reads."""
    final = {}
    for i, s in enumerate(p.statements):
        if s.out in RETURNS:
            final[s.out] = i
    taken = {s.out for s in p.statements} | set(INPUTS)
    current = {name: name for name in INPUTS}
    out = []
    for i, s in enumerate(p.statements):
        args = tuple(current.get(a, a) if isinstance(a, str) else a for a in s.args)
        name = s.out if final.get(s.out) == i else _fresh(rng, taken)
        current[s.out] = name
        out.append(Statement(name, s.fn, args))
    return p.with_statements(out)


def insert_dead(p, rng):
    """Insert one statement whose result nothing reads."""
    pos = int(rng.integers(len(p) + 1))
    names = p.defined_before(pos)
    spec = REGISTRY[FUNCTION_NAMES[rng.integers(len(FUNCTION_NAMES))]]
    args = tuple(names[rng.integers(len(names))] if rng.random() < 0.7 else float(rng.standard_normal())
                 for _ in range(spec.arity))
    taken = {s.out for s in p.statements} | set(INPUTS)
    stmts = list(p.statements)
    stmts.insert(pos, Statement(_fresh(rng, taken), spec.name, args))
    return p.with_statements(stmts)


def swap_commutative(p, rng):
    """Swap the two arguments of one commutative statement, or return None
    if ``p`` has none."""
    idx = [i for i, s in enumerate(p.statements)
           if REGISTRY[s.fn].commutative and s.args[0] != s.args[1]]
    if not idx:
        return None
    i = idx[rng.integers(len(idx))]
    s = p.statements[i]
    stmts = list(p.statements)
    stmts[i] = Statement(s.out, s.fn, (s.args[1], s.args[0]))
    return p.with_statements(stmts)


_BASES = ("adamw", "lion", "discovered", "adagrad_like", "adabelief_like")


def random_valid_program(rng, max_steps=12, signature=SIG):
    """A valid program reached by a short random mutation walk from an asset."""
    cfg = MutationConfig()
    p = load_asset(_BASES[rng.integers(len(_BASES))])
    for _ in range(int(rng.integers(0, max_steps + 1))):
        for _ in range(50):
            q = mutate(p, cfg, rng)
            if q is not p and is_valid(q, signature):
                p = q
                break
    return p
