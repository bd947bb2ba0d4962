import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optimforge.analysis import is_valid, signature_for
from oracles import adamw_dsl_scalar_step, lion_scalar, space_size
from optimforge.program import (
    MAX_STATEMENTS, MutationConfig, Program, ProgramSyntaxError, Statement, UndefinedVariable,
    UnknownFunction, asset_names, delete_statement, estimate_space, execute, from_json,
    insert_statement, lion_program, load_asset, mutate, parse, perturb_constant,
    print_program, random_program, to_json,
)

SIG = signature_for(np.zeros(4))


def test_assets_present():
    assert set(asset_names()) >= {"adamw", "lion", "discovered", "raw"}
    for name in asset_names():
        p = load_asset(name)
        assert parse(print_program(p)) == p


def test_adamw_asset_scalar_step():
    update, m, v = execute(load_asset("adamw"), 0.0, 1.0, 0.0, 0.0, 1.0)
    ref = adamw_dsl_scalar_step(0.0, 1.0, 0.0, 0.0, 1.0)
    assert update == pytest.approx(ref[0], rel=1e-14)
    assert update == pytest.approx(0.0031623, abs=1e-7)
    assert (m, v) == pytest.approx((0.1, 0.001), rel=1e-14)


def test_lion_asset_scalar_step():
    update, m, _ = execute(load_asset("lion"), 0.0, 1.0, 0.0, 0.0, 0.1)
    delta, m_ref = lion_scalar(0.0, 1.0, 0.0, 0.1)
    assert update == pytest.approx(-delta, rel=1e-15) and update == pytest.approx(0.1)
    assert m == pytest.approx(m_ref, rel=1e-14) and m == pytest.approx(0.01)


def test_sgd_program():
    p = parse("def train(w, g, m, v, lr):\n  update = g * lr\n  return update, m, v\n")
    update, _, _ = execute(p, np.zeros(2), np.array([2.0, -2.0]), 0.0, 0.0, 0.5)
    assert update.tolist() == [1.0, -1.0]


def test_lion_listing_structure():
    p = load_asset("lion")
    assert len(p) == 6
    assert sum(s.out == "wd" or "wd" in s.args for s in p.statements) == 2
    assert p.returns == ("update", "m", "v")
    assert lion_program(0.9, 0.99, 0.0) == p


def test_parse_errors():
    with pytest.raises(UnknownFunction):
        parse("def train(w, g, m, v, lr):\n  x = bogus(g)\n  return update, m, v\n")
    with pytest.raises(UndefinedVariable):
        parse("def train(w, g, m, v, lr):\n  update = sin(y)\n  return update, m, v\n")
    with pytest.raises(ProgramSyntaxError):
        parse("def train(w, g, m, v, lr):\n  update = sin(g\n  return update, m, v\n")
    with pytest.raises(ProgramSyntaxError):
        parse("def train(w, g, m, v, lr):\n  x = sin(g)\n  return x, m, v\n")


def test_json_round_trip():
    for name in asset_names():
        p = load_asset(name)
        assert from_json(to_json(p)) == p


def test_forced_delete():
    p = load_asset("adamw")
    q = delete_statement(p, np.random.default_rng(0), index=1)
    assert len(q) == len(p) - 1
    assert q.statements == p.statements[:1] + p.statements[2:]


def test_perturb_constant():
    assert perturb_constant(0.9, 1.0) == 1.8


def test_insert_respects_cap():
    cfg = MutationConfig(max_statements=3)
    p = random_program(np.random.default_rng(1), cfg, max_length=3)
    full = p
    while len(full) < 3:
        full = insert_statement(full, np.random.default_rng(len(full)), cfg)
    assert insert_statement(full, np.random.default_rng(5), cfg) is full
    assert MAX_STATEMENTS == 64


def test_constants_only_mutation_keeps_structure():
    cfg = MutationConfig(constants_only=True)
    rng = np.random.default_rng(3)
    p = load_asset("adamw")
    for _ in range(50):
        q = mutate(p, cfg, rng)
        assert [(s.out, s.fn) for s in q.statements] == [(s.out, s.fn) for s in p.statements]
        for a, b in zip(p.statements, q.statements):
            for x, y in zip(a.args, b.args):
                assert isinstance(x, str) == isinstance(y, str)
                if isinstance(x, str):
                    assert x == y


def test_estimate_space():
    assert estimate_space(1, 5, 2, 3) == 15625
    assert estimate_space(45, 10, 2, 5) == 1845281250000000000 == space_size(45, 10, 2, 5)
    assert estimate_space(2, 2, 1, 1) == 4
    with pytest.raises(ValueError):
        estimate_space(0, 1, 1, 1)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_print_parse_round_trip(seed):
    p = random_program(np.random.default_rng(seed), MutationConfig(), max_length=20)
    assert parse(print_program(p)) == p


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_mutation_chain_stays_printable(seed, steps):
    rng = np.random.default_rng(seed)
    cfg = MutationConfig()
    p = load_asset("adamw")
    for _ in range(steps):
        p = mutate(p, cfg, rng)
        assert len(p) <= cfg.max_statements
        if is_valid(p, SIG, stable_state=False):
            assert parse(print_program(p)) == p


@settings(max_examples=100, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False, width=64), st.floats(-3, 3))
def test_perturb_is_power_of_two_scaling(c, a):
    out = perturb_constant(c, a)
    if c != 0 and math.isfinite(out) and out != 0:
        assert out / c == pytest.approx(2.0 ** a, rel=1e-12)


def test_empty_program_executes():
    p = Program()
    assert len(p) == 0 and parse(print_program(p)) == p
    with pytest.raises(UndefinedVariable):
        execute(p, 1.0, 2.0, 3.0, 4.0, 5.0)


def test_statement_validation():
    with pytest.raises(Exception):
        Statement("x", "nope", ("g",))
