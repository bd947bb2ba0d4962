import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optimforge.analysis import functional_hash, infer, is_valid, signature_for
from optimforge.program import load_asset, parse, print_program
from optimforge.simplify import (
    SimplifyError, canonicalize, lion_from_discovered, merge_interpolations, prune_by_fitness,
    sign_agreement, simplify,
)
from optimforge.tasks import NONFINITE, Fitness, load_task
from optimforge.program import lion_program
from transforms import SIG, alpha_rename, insert_dead, random_valid_program


def prog(body):
    lines = "\n".join("  " + line for line in body.strip().splitlines())
    return parse(f"def train(w, g, m, v, lr):\n{lines}\n  return update, m, v\n")


def test_discovered_prune_report():
    task = load_task("mlp-blobs")
    p = load_asset("discovered")
    pruned, deletions, base = prune_by_fitness(p, task, eps=0.002)
    assert base.ok
    tried = {d.statement: d for d in deletions}
    for text in ("g = clip(g, lr)", "g = arcsin(g)"):
        d = tried[text]
        assert d.valid and d.fitness is not None and d.delta == pytest.approx(d.fitness - base.value)
    assert len(pruned) <= len(p)
    assert is_valid(pruned, SIG)
    for d in deletions:
        if d.removed:
            assert d.fitness >= base.value - 0.002


def test_noop_is_not_removable_by_deletion():
    p = prog("t = g + 0.0\nupdate = t * lr")
    task = load_task("quadratic")
    pruned, deletions, _ = prune_by_fitness(p, task, eps=math.inf)
    assert pruned == p
    assert [d.valid for d in deletions] == [False, False]


def test_infinite_eps_gives_minimal_program():
    task = load_task("quadratic")
    sig = signature_for(task.problem.init_weights(np.random.default_rng(0)))
    for name in ("adamw", "discovered"):
        pruned, _, _ = prune_by_fitness(load_asset(name), task, eps=math.inf)
        for i in range(len(pruned)):
            stmts = list(pruned.statements)
            del stmts[i]
            assert not is_valid(pruned.with_statements(stmts), sig)


def test_prune_refuses_failed_baseline():
    with pytest.raises(SimplifyError):
        prune_by_fitness(load_asset("adamw"), load_task("quadratic"),
                         evaluate=lambda q: Fitness.failed(NONFINITE))


def test_simplify_counts_nonincreasing():
    report = simplify(load_asset("raw"), load_task("quadratic"), eps=0.002)
    assert report.original_statements >= report.stripped_statements >= report.pruned_statements
    doc = report.to_json()
    assert doc["program"] == print_program(report.program)
    infer(report.program, signature_for(np.zeros(50)), stable_state=True)


def test_canonicalize_assets():
    for name in ("adamw", "lion", "discovered", "raw", "adagrad_like", "adabelief_like",
                 "weight_grad_decay"):
        p = load_asset(name)
        c = canonicalize(p)
        assert functional_hash(c) == functional_hash(p)
        assert canonicalize(c) == c
        assert is_valid(c, SIG)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_canonicalize_random(seed):
    rng = np.random.default_rng(seed)
    p = random_valid_program(rng)
    c = canonicalize(p)
    assert canonicalize(c) == c
    assert functional_hash(c) == functional_hash(p)
    assert print_program(canonicalize(alpha_rename(p, rng))) == print_program(c)
    assert print_program(canonicalize(insert_dead(p, rng))) == print_program(c)


def test_merge_interpolations():
    b1, b2 = merge_interpolations(0.899, 1.109)
    assert b1 == 0.899 and b2 == pytest.approx(0.996991, abs=1e-12)
    # The carried state follows an EMA with coefficient a*b.
    rng = np.random.default_rng(0)
    s = c_state = 0.0
    for g in rng.standard_normal(50):
        c = (1 - 0.899) * g + 0.899 * s
        s = (1 - 1.109) * g + 1.109 * c
        c_state = (1 - b2) * g + b2 * c_state
        assert s == pytest.approx(c_state, abs=1e-12)


def test_merged_lion_agrees_with_discovered():
    merged = lion_from_discovered()
    assert sign_agreement(load_asset("discovered"), merged) >= 0.99
    assert sign_agreement(merged, merged) == 1.0
    assert merged == lion_program(0.899, 0.899 * 1.109, 0.4602)
