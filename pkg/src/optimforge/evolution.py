"""Regularized evolution over programs, plus the two search baselines.

Each cycle samples a tournament from the population, mutates the winner
until the child passes static checks, looks its functional hash up in the
fitness cache (evaluating on a miss), appends the child and drops the
oldest member. Everything random flows from ``SearchConfig.seed``.

Children can be produced in rounds of ``batch`` from one population
snapshot so that their evaluations run in parallel; results are inserted in
generation order, so the outcome depends on ``batch`` but never on the
number of workers.
"""

from __future__ import annotations

import dataclasses
import json
import os
import pickle
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import functional_hash, is_valid, live_statements, signature_for
from .program import MutationConfig, Program, load_asset, mutate, print_program, random_program
from .tasks import Fitness, ProxyTask, derive_seed, evaluate_fitness, load_task


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    task: str = "linreg"
    population: int = 1000
    tournament: int = 2
    budget: int = 1000
    seed: int = 0
    restart: str = "none"
    mutation: MutationConfig = field(default_factory=MutationConfig)
    repeats: int = 1
    seed_program: str = "adamw"
    mode: str = "evolution"
    batch: int = 1
    checkpoint_every: int = 1000
    random_max_length: int = 16

    def __post_init__(self):
        if not 2 <= self.tournament < self.population:
            raise ValueError("need 2 <= tournament < population")
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")
        if self.batch < 1 or self.repeats < 1:
            raise ValueError("batch and repeats must be positive")
        if self.mode not in ("evolution", "random", "constants"):
            raise ValueError(f"unknown search mode {self.mode!r}")
        parse_restart(self.restart)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["mutation"] = self.mutation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["mutation"] = MutationConfig(**d.get("mutation", {}))
        return cls(**d)


def parse_restart(spec: str):
    """``"none"``, ``"from_initial:k"`` or ``"from_best_after:n"``."""
    if spec == "none":
        return "none", 0
    kind, _, arg = spec.partition(":")
    if kind in ("from_initial", "from_best_after") and arg.isdigit() and int(arg) > 0:
        return kind, int(arg)
    raise ValueError(f"bad restart policy {spec!r}")


@dataclass(frozen=True)
class Individual:
    program: Program
    hash: str
    fitness: Fitness
    birth_cycle: int


@dataclass
class SearchState:
    population: deque
    cache: dict
    best: Individual
    rng: np.random.Generator
    cycle: int = 0
    evaluations: int = 0
    cache_hits: int = 0
    raw_cache_hits: int = 0
    statements: int = 0
    live: int = 0
    retries: int = 0
    resamples: int = 0
    raw_seen: set = field(default_factory=set)
    # First individual seen for each hash with an ok fitness.
    hall: dict = field(default_factory=dict)

    def counters(self):
        n = max(self.cycle, 1)
        return {
            "children": self.cycle,
            "evaluations": self.evaluations,
            "cache_hits": self.cache_hits,
            "cache_hit_rate": self.cache_hits / n,
            "raw_cache_hits": self.raw_cache_hits,
            "raw_cache_hit_rate": self.raw_cache_hits / n,
            "redundant_fraction": 1.0 - self.live / self.statements if self.statements else 0.0,
            "validity_retries": self.retries,
            "parent_resamples": self.resamples,
        }


@dataclass
class SearchResult:
    best: Individual
    state: SearchState
    log_path: Path | None
    summary: dict


# -- evaluation ---------------------------------------------------------------

_WORKER_TASKS: dict = {}


def _worker_eval(args):
    program, task_doc, seed, repeats = args
    key = json.dumps(task_doc, sort_keys=True)
    task = _WORKER_TASKS.get(key)
    if task is None:
        task = _WORKER_TASKS[key] = ProxyTask.from_dict(task_doc)
    return evaluate_fitness(program, task, seed, repeats)


class Evaluator:
    """Evaluates programs in-process or on a process pool."""

    def __init__(self, task: ProxyTask, seed: int, repeats: int = 1, workers: int = 1):
        self.task = task
        self.seed = seed
        self.repeats = repeats
        self.workers = max(1, int(workers))
        self._pool = None

    def __call__(self, programs):
        if self.workers == 1 or len(programs) == 1:
            return [evaluate_fitness(p, self.task, self.seed, self.repeats) for p in programs]
        if self._pool is None:
            self._pool = ProcessPoolExecutor(self.workers)
        doc = self.task.to_dict()
        jobs = [(p, doc, self.seed, self.repeats) for p in programs]
        return list(self._pool.map(_worker_eval, jobs))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


# -- the search loop -------------------------------------------------------------

def _seed_program(cfg: SearchConfig) -> Program:
    path = Path(cfg.seed_program)
    if path.suffix == ".prog" and path.exists():
        from .program import parse
        return parse(path.read_text("utf-8"))
    return load_asset(cfg.seed_program)


def init_population(seed_program: Program, cfg: SearchConfig, evaluate, signature, rng) -> SearchState:
    """``P`` copies of the seed program sharing one evaluation."""
    if not is_valid(seed_program, signature):
        raise SearchError("seed program fails static checks on this task")
    h = functional_hash(seed_program)
    fitness = evaluate([seed_program])[0]
    pop = deque(Individual(seed_program, h, fitness, i - cfg.population) for i in range(cfg.population))
    return SearchState(pop, {h: fitness}, pop[-1], rng, evaluations=1,
                       raw_seen={functional_hash(seed_program, canonical=False)},
                       hall={h: pop[-1]} if fitness.ok else {})


def _reseed(state: SearchState, cfg: SearchConfig):
    b = state.best
    state.population = deque(
        Individual(b.program, b.hash, b.fitness, state.cycle - cfg.population + i)
        for i in range(cfg.population)
    )


def tournament(state: SearchState, cfg: SearchConfig) -> Individual:
    pop = state.population
    picks = state.rng.choice(len(pop), size=cfg.tournament, replace=False)
    # Ties go to the most recently added individual.
    return max((pop[int(i)] for i in picks), key=lambda ind: (ind.fitness.value, ind.birth_cycle))


def make_child(state: SearchState, cfg: SearchConfig, signature):
    """Mutate tournament winners until a child passes static checks.

    Returns ``(parent, child, attempts)``; a parent whose ``max_retries``
    mutations all fail is replaced by a fresh tournament winner.
    """
    mcfg = cfg.mutation
    attempts = 0
    for _ in range(1000):
        parent = tournament(state, cfg)
        for _ in range(mcfg.max_retries):
            attempts += 1
            child = mutate(parent.program, mcfg, state.rng)
            if child is not parent.program and is_valid(child, signature):
                return parent, child, attempts
        state.resamples += 1
    raise SearchError("no valid child after 1000 parent resamples")


def make_random(state: SearchState, cfg: SearchConfig, signature):
    attempts = 0
    for _ in range(100_000):
        attempts += 1
        child = random_program(state.rng, cfg.mutation, cfg.random_max_length)
        if is_valid(child, signature):
            return None, child, attempts
    raise SearchError("no valid random program in 100000 draws")


class RunLog:
    """Append-only JSONL telemetry; byte offsets let a resumed run truncate
    back to its checkpoint."""

    def __init__(self, out_dir: Path | None, resume_offsets=None):
        self.dir = out_dir
        self.log = self.timing = None
        if out_dir is None:
            return
        mode = "r+b" if resume_offsets else "wb"
        self.log = open(out_dir / "log.jsonl", mode)
        self.timing = open(out_dir / "timing.jsonl", mode)
        if resume_offsets:
            for fh, off in zip((self.log, self.timing), resume_offsets):
                fh.seek(off)
                fh.truncate()

    def write(self, record, timing):
        if self.log is None:
            return
        self.log.write((json.dumps(record) + "\n").encode())
        self.timing.write((json.dumps(timing) + "\n").encode())

    def offsets(self):
        if self.log is None:
            return None
        self.log.flush()
        self.timing.flush()
        return self.log.tell(), self.timing.tell()

    def close(self):
        if self.log is not None:
            self.log.close()
            self.timing.close()


def _generate(state, cfg, signature):
    if cfg.mode == "random":
        return make_random(state, cfg, signature)
    return make_child(state, cfg, signature)


def run_cycles(state: SearchState, cfg: SearchConfig, n: int, evaluate, signature,
               log: RunLog, run_index: int = 0, on_round=None):
    """Advance the search by ``n`` children."""
    stop = state.cycle + n
    while state.cycle < stop:
        t0 = time.perf_counter()
        k = min(cfg.batch, stop - state.cycle)
        children = [_generate(state, cfg, signature) for _ in range(k)]
        hashes = [functional_hash(c) for _, c, _ in children]
        todo = {}
        for h, (_, c, _) in zip(hashes, children):
            if h not in state.cache and h not in todo:
                todo[h] = c
        results = evaluate(list(todo.values())) if todo else []
        fresh = dict(zip(todo, results))
        per_child_ms = (time.perf_counter() - t0) * 1000.0 / k
        for h, (parent, child, attempts) in zip(hashes, children):
            hit = h in state.cache
            if not hit:
                state.cache[h] = fresh[h]
                state.evaluations += 1
            fitness = state.cache[h]
            raw = functional_hash(child, canonical=False)
            raw_hit = raw in state.raw_seen
            state.raw_seen.add(raw)
            state.cache_hits += hit
            state.raw_cache_hits += raw_hit
            state.retries += attempts - 1
            n_live = len(live_statements(child))
            state.statements += len(child)
            state.live += n_live
            ind = Individual(child, h, fitness, state.cycle)
            if cfg.mode != "random":
                state.population.append(ind)
                state.population.popleft()
            if fitness.ok:
                state.hall.setdefault(h, ind)
                if fitness > state.best.fitness:
                    state.best = ind
            log.write({
                "run": run_index,
                "cycle": state.cycle,
                "parent_hash": parent.hash if parent else None,
                "child_hash": h,
                "cache_hit": hit,
                "raw_cache_hit": raw_hit,
                "fitness": fitness.value if fitness.ok else None,
                "status": fitness.status,
                "statements": len(child),
                "live_statements": n_live,
                "attempts": attempts,
            }, {"run": run_index, "cycle": state.cycle, "wall_ms": round(per_child_ms, 3)})
            state.cycle += 1
        if on_round is not None:
            on_round(state)


def _checkpoint(path: Path, payload):
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(payload, fh)
    os.replace(tmp, path)


def run_search(cfg: SearchConfig, out_dir=None, workers: int = 1, resume: bool = False,
               task: ProxyTask | None = None, on_round=None) -> SearchResult:
    """Run a whole search and write the run directory if ``out_dir`` is set.

    ``out_dir`` receives ``log.jsonl`` (one record per child),
    ``timing.jsonl`` (wall-clock per child, kept apart so the main log is
    reproducible byte for byte), ``population.ckpt``, ``best.prog`` and
    ``summary.json``. ``on_round(state)`` is called after every batch of
    children.
    """
    task = task or load_task(cfg.task)
    if cfg.mode == "constants" and not cfg.mutation.constants_only:
        cfg = dataclasses.replace(cfg, mutation=dataclasses.replace(cfg.mutation, constants_only=True))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "population.ckpt" if out is not None else None

    evaluate = Evaluator(task, cfg.seed, cfg.repeats, workers)
    seed_prog = _seed_program(cfg)
    signature = signature_for(task.problem.init_weights(np.random.default_rng(0)))
    policy, arg = parse_restart(cfg.restart)
    n_runs = arg if policy == "from_initial" else 1

    saved = None
    if resume and ckpt_path is not None and ckpt_path.exists():
        with open(ckpt_path, "rb") as fh:
            saved = pickle.load(fh)
        if saved["config"] != cfg.to_dict():
            raise SearchError("checkpoint was written by a different configuration")
    log = RunLog(out, saved["offsets"] if saved else None)

    finished = saved["finished"] if saved else []
    start_run = saved["run"] if saved else 0
    state = None
    try:
        for run in range(start_run, n_runs):
            if saved and run == start_run and saved["state"] is not None:
                state = saved["state"]
            else:
                rng = np.random.default_rng(derive_seed(cfg.seed, "search", run))
                state = init_population(seed_prog, cfg, evaluate, signature, rng)

            def save(st, run=run):
                if ckpt_path is not None:
                    _checkpoint(ckpt_path, {"config": cfg.to_dict(), "run": run, "state": st,
                                            "finished": finished, "offsets": log.offsets()})

            while state.cycle < cfg.budget:
                n = cfg.budget - state.cycle
                if policy == "from_best_after":
                    n = min(n, arg - state.cycle % arg)
                n = min(n, cfg.checkpoint_every - state.cycle % cfg.checkpoint_every)
                run_cycles(state, cfg, n, evaluate, signature, log, run, on_round)
                if policy == "from_best_after" and state.cycle % arg == 0 and state.cycle < cfg.budget:
                    _reseed(state, cfg)
                save(state)
            finished.append((state.best, state.counters()))
            save(state if run + 1 == n_runs else None)
    finally:
        evaluate.close()

    # Earliest run wins ties.
    best_ind = max(reversed([b for b, _ in finished]), key=lambda ind: ind.fitness.value)
    final_state = state
    summary = {
        "best_hash": best_ind.hash,
        "best_fitness": best_ind.fitness.value if best_ind.fitness.ok else None,
        "best_status": best_ind.fitness.status,
        "runs": [dict(c, best_fitness=b.fitness.value if b.fitness.ok else None) for b, c in finished],
    }
    if final_state is not None:
        summary.update(final_state.counters())
    log_path = None
    if out is not None:
        from .simplify import canonicalize
        (out / "best.prog").write_text(print_program(canonicalize(best_ind.program)), "utf-8")
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", "utf-8")
        log_path = out / "log.jsonl"
    log.close()
    return SearchResult(best_ind, final_state, log_path, summary)


def top_programs(state: SearchState, k: int = 10):
    """The ``k`` fittest distinct-hash programs a search has produced."""
    ranked = sorted(state.hall.values(), key=lambda i: (-i.fitness.value, i.birth_cycle))
    return ranked[:k]
