"""Evolutionary search for optimizer update rules over a small tensor DSL."""

from .analysis import functional_hash, infer, live_statements, strip_redundant
from .program import Program, Statement, execute, load_asset, mutate, parse, print_program
from .tasks import evaluate_fitness, load_task
from .values import REGISTRY, Tree, apply_function

__version__ = "0.1.0"

__all__ = [
    "Program",
    "REGISTRY",
    "Statement",
    "Tree",
    "apply_function",
    "evaluate_fitness",
    "execute",
    "functional_hash",
    "infer",
    "live_statements",
    "load_asset",
    "load_task",
    "mutate",
    "parse",
    "print_program",
    "strip_redundant",
]
