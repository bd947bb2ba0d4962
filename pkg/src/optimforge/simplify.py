"""Turning a raw search result into a readable program.

The pipeline is: drop statements no output depends on, greedily delete
statements whose removal costs at most ``eps`` fitness, then rename and
reorder into a canonical listing. The last step of the published
derivation (merging two interpolations into one momentum and reading
``m / sqrt(m * m)`` as ``sign(m)``) is algebra rather than search; it is
provided here as :func:`merge_interpolations` plus a numerical check.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .analysis import functional_hash, is_valid, signature_for, strip_redundant
from .program import INPUTS, RETURNS, Program, Statement, execute, format_statement, lion_program
from .tasks import Fitness, ProxyTask, evaluate_fitness


class SimplifyError(ValueError):
    pass


@dataclass
class Deletion:
    index: int
    statement: str
    valid: bool
    fitness: float | None
    delta: float | None
    removed: bool

    def to_json(self):
        return dict(self.__dict__)


@dataclass
class SimplifyReport:
    original_statements: int
    stripped_statements: int
    pruned_statements: int
    baseline_fitness: float
    final_fitness: float | None
    eps: float
    deletions: list = field(default_factory=list)
    program: Program | None = None

    def to_json(self):
        from .program import print_program
        return {
            "original_statements": self.original_statements,
            "stripped_statements": self.stripped_statements,
            "pruned_statements": self.pruned_statements,
            "baseline_fitness": self.baseline_fitness,
            "final_fitness": self.final_fitness,
            "eps": self.eps if math.isfinite(self.eps) else "inf",
            "deletions": [d.to_json() for d in self.deletions],
            "program": print_program(self.program) if self.program is not None else None,
        }


def prune_by_fitness(p: Program, task: ProxyTask, eps: float = 0.002, seed: int = 0,
                     evaluate=None):
    """Greedy single-statement deletion.

    Statements are tried in order; a deletion sticks if the program stays
    valid and its fitness is no more than ``eps`` below the starting
    fitness. Passes repeat until one makes no deletion. Returns
    ``(program, deletions, baseline)``; every attempt is recorded.
    """
    evaluate = evaluate or (lambda q: evaluate_fitness(q, task, seed))
    signature = signature_for(task.problem.init_weights(np.random.default_rng(0)))
    cache: dict[str, Fitness] = {}

    def fitness_of(q):
        h = functional_hash(q)
        if h not in cache:
            cache[h] = evaluate(q)
        return cache[h]

    base = fitness_of(p)
    if not base.ok:
        raise SimplifyError(f"cannot prune: the starting program's fitness is {base.status}")
    floor = base.value - eps
    deletions = []
    current = p
    changed = True
    while changed:
        changed = False
        i = 0
        while i < len(current):
            stmts = list(current.statements)
            text = format_statement(stmts[i])
            del stmts[i]
            cand = current.with_statements(stmts)
            if not is_valid(cand, signature):
                deletions.append(Deletion(i, text, False, None, None, False))
                i += 1
                continue
            f = fitness_of(cand)
            keep = f.value >= floor
            deletions.append(Deletion(
                i, text, True, f.value if f.ok else None,
                (f.value - base.value) if f.ok else None, keep,
            ))
            if keep:
                current = cand
                changed = True
            else:
                i += 1
    return current, deletions, base


def canonicalize(p: Program) -> Program:
    """Canonical listing of ``p``: dead statements dropped, statements
    ordered by first use from the returns, variables renamed.

    The last definitions of ``update``, ``m`` and ``v`` keep their names;
    every other assigned variable becomes ``v1, v2, ...`` in order of
    appearance. The result computes the same function (equal functional
    hash), and canonicalizing twice changes nothing.
    """
    p = strip_redundant(p)
    n = len(p.statements)
    # Which statement (or input) each argument reads.
    defs = {name: ("in", name) for name in INPUTS}
    reads = []
    for i, s in enumerate(p.statements):
        reads.append([defs[a] if isinstance(a, str) else None for a in s.args])
        defs[s.out] = ("st", i)
    final = {name: defs[name] for name in RETURNS}
    final_index = {ref[1]: name for name, ref in final.items() if ref[0] == "st"}

    # Depth-first post-order from the returns fixes a name-independent rank.
    rank: dict[int, int] = {}

    def visit(i):
        stack = [(i, 0)]
        while stack:
            j, k = stack.pop()
            if j in rank:
                continue
            args = [r[1] for r in reads[j] if r is not None and r[0] == "st"]
            if k < len(args):
                stack.append((j, k + 1))
                if args[k] not in rank:
                    stack.append((args[k], 0))
            else:
                rank[j] = len(rank)

    for name in RETURNS:
        ref = final[name]
        if ref[0] == "st":
            visit(ref[1])

    # Edges: true dependencies, plus "readers of an input come before the
    # statement that gives the returned variable of that name its final value".
    succ = {i: set() for i in range(n)}
    indeg = [0] * n
    for i in range(n):
        for r in reads[i]:
            if r is None:
                continue
            if r[0] == "st":
                succ[r[1]].add(i)
            elif r[1] in final and final[r[1]][0] == "st" and final[r[1]][1] != i:
                succ[i].add(final[r[1]][1])
    for i in range(n):
        for j in succ[i]:
            indeg[j] += 1
    ready = [(rank[i], i) for i in range(n) if indeg[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        _, i = heapq.heappop(ready)
        order.append(i)
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(ready, (rank[j], j))
    if len(order) != n:
        raise AssertionError("dependency cycle while canonicalizing")

    names = {}
    counter = 0
    out = []
    for i in order:
        if i in final_index:
            names[i] = final_index[i]
        else:
            counter += 1
            names[i] = f"v{counter}"
        s = p.statements[i]
        args = tuple(
            a if not isinstance(a, str) else (names[r[1]] if r[0] == "st" else r[1])
            for a, r in zip(s.args, reads[i])
        )
        out.append(Statement(names[i], s.fn, args))
    return p.with_statements(out)


def simplify(p: Program, task: ProxyTask, eps: float = 0.002, seed: int = 0, evaluate=None) -> SimplifyReport:
    """Strip, prune and canonicalize, reporting each stage."""
    stripped = strip_redundant(p)
    pruned, deletions, base = prune_by_fitness(stripped, task, eps, seed, evaluate)
    final = canonicalize(pruned)
    evaluate = evaluate or (lambda q: evaluate_fitness(q, task, seed))
    f = evaluate(final)
    return SimplifyReport(
        original_statements=len(p),
        stripped_statements=len(stripped),
        pruned_statements=len(final),
        baseline_fitness=base.value,
        final_fitness=f.value if f.ok else None,
        eps=eps,
        deletions=deletions,
        program=final,
    )


# -- the hand derivation, checked numerically ------------------------------------

def merge_interpolations(a: float, b: float) -> tuple[float, float]:
    """Momentum coefficients of the pair

        c = interp(g, s, a)      # used for the update
        s = interp(g, c, b)      # carried to the next step

    Substituting ``c`` gives ``s' = (1 - a*b) g + a*b s``: an EMA with
    coefficient ``a*b``, while ``c`` interpolates the old state with ``a``.
    So the pair is Lion with ``beta1 = a`` and ``beta2 = a*b``.
    """
    return a, a * b


def lion_from_discovered(a: float = 0.899, b: float = 1.109, weight_decay: float = 0.4602) -> Program:
    beta1, beta2 = merge_interpolations(a, b)
    return lion_program(beta1, beta2, weight_decay)


def sign_agreement(p: Program, q: Program, steps: int = 200, dim: int = 256, trials: int = 5,
                   seed: int = 0, grad_scale: float = 0.1) -> float:
    """Fraction of coordinates where ``sign(update)`` of ``p`` and ``q``
    agree, driving both with the same random gradient stream at ``w = 0``
    (so weight decay does not enter)."""
    rng = np.random.default_rng(seed)
    agree = total = 0
    for _ in range(trials):
        w = np.zeros(dim)
        sp = [np.zeros(dim), np.zeros(dim)]
        sq = [np.zeros(dim), np.zeros(dim)]
        drift = rng.standard_normal(dim)
        for _ in range(steps):
            g = grad_scale * (0.3 * drift + rng.standard_normal(dim))
            up, *sp = execute(p, w, g, sp[0], sp[1], 1.0)
            uq, *sq = execute(q, w, g, sq[0], sq[1], 1.0)
            agree += int(np.sum(np.sign(up) == np.sign(uq)))
            total += dim
    return agree / total
