"""Seeded proxy training problems that turn a program into a fitness value.

Each task is fully described by a JSON document (see ``tasks/*.json``).
Training follows the usual loop: ``w`` is initialised, ``m`` and ``v`` start
at zero, and every step runs the program on the current gradient and then
applies ``w = w - update``.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .analysis import functional_hash, infer, signature_for, strip_redundant
from .program import Program
from .values import Tree

OK = "ok"
NONFINITE = "nonfinite"
TIMEOUT = "timeout"

LEVEL_SCALE = {"A": (1, 1), "B": (10, 2), "C": (100, 4)}


@functools.total_ordering
@dataclass(frozen=True)
class Fitness:
    """Higher is better; anything that did not finish sorts below every ok
    result."""

    value: float
    status: str = OK

    def __post_init__(self):
        if self.status != OK:
            object.__setattr__(self, "value", -math.inf)

    @property
    def ok(self) -> bool:
        return self.status == OK

    def __lt__(self, other):
        return self.value < other.value

    def __eq__(self, other):
        return isinstance(other, Fitness) and self.value == other.value

    def __hash__(self):
        return hash(self.value)

    def to_json(self):
        return {"value": self.value if self.ok else None, "status": self.status}

    @classmethod
    def failed(cls, status):
        return cls(-math.inf, status)


@dataclass(frozen=True)
class ProxyTask:
    task_id: str
    kind: str
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    steps: int = 500
    batch_size: int = 64
    schedule: dict = field(default_factory=lambda: {"peak": 1.0, "warmup": 0.05, "shape": "cosine"})
    metric: str = "neg_val_loss"
    timeout: float = 120.0
    search: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc) -> "ProxyTask":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names - {"version"}
        if unknown:
            raise ValueError(f"unknown task fields: {sorted(unknown)}")
        return cls(**{k: v for k, v in doc.items() if k in names})

    def to_dict(self):
        return dataclasses.asdict(self)

    def at_level(self, level: str) -> "ProxyTask":
        """Meta-validation task: ``B`` has 10x steps and 2x width, ``C``
        100x steps and 4x width. ``A`` is the task itself."""
        if level not in LEVEL_SCALE:
            raise ValueError(f"unknown ladder level {level!r}")
        if level == "A":
            return self
        steps, width = LEVEL_SCALE[level]
        model = dict(self.model)
        if "hidden" in model:
            model["hidden"] = [h * width for h in model["hidden"]]
        dataset = dict(self.dataset)
        if self.kind in ("linreg", "quadratic"):
            dataset["dim"] = dataset["dim"] * width
        return dataclasses.replace(
            self, task_id=f"{self.task_id}@{level}", dataset=dataset, model=model,
            steps=self.steps * steps,
        )

    @functools.cached_property
    def problem(self):
        return _PROBLEMS[self.kind](self)

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("problem", None)
        return state


def load_task(name_or_path) -> ProxyTask:
    """Load a shipped task by id (``"linreg"``) or a JSON file path."""
    path = Path(str(name_or_path))
    if path.suffix == ".json" and path.exists():
        text = path.read_text("utf-8")
    else:
        res = resources.files("optimforge").joinpath("tasks", f"{name_or_path}.json")
        if not res.is_file():
            raise KeyError(f"unknown task {name_or_path!r}")
        text = res.read_text("utf-8")
    return ProxyTask.from_dict(json.loads(text))


def task_names() -> list[str]:
    root = resources.files("optimforge").joinpath("tasks")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def schedule(step: int, total_steps: int, spec: dict) -> float:
    """Linear warmup to ``peak`` at step ``round(warmup * total_steps)``,
    then cosine decay to 0 at ``total_steps``.

    Warmup starts at ``peak / (warm + 1)`` rather than exactly 0, so that
    the first step already moves the weights.
    """
    peak = float(spec.get("peak", 1.0))
    if spec.get("shape", "cosine") == "constant":
        return peak
    warm = int(round(float(spec.get("warmup", 0.0)) * total_steps))
    if step < warm:
        return peak * (step + 1) / (warm + 1)
    frac = (step - warm) / max(total_steps - warm, 1)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def derive_seed(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode())
        h.update(b"\0")
    return int.from_bytes(h.digest(), "little")


# -- problems ------------------------------------------------------------------

class _Problem:
    """Data plus an analytic loss/gradient for one task."""

    def init_weights(self, rng) -> Tree:
        raise NotImplementedError

    def loss_and_grad(self, w: Tree, batch=None):
        """Mean loss and gradient over ``batch = (X, y)``, or the whole
        training set when ``batch`` is None."""
        raise NotImplementedError

    def loss(self, w: Tree, batch=None) -> float:
        return self.loss_and_grad(w, batch)[0]

    def train_data(self):
        """``(X, y)`` training arrays; None for data-free problems."""
        return None

    def metric(self, w: Tree, name: str) -> float:
        raise NotImplementedError


class LinearRegression(_Problem):
    """Least squares on features with log-spaced column scales."""

    def __init__(self, task: ProxyTask):
        d = task.dataset
        rng = np.random.default_rng(d.get("seed", 0))
        dim = int(d["dim"])
        scales = np.logspace(0, -float(d.get("log_condition", 1.0)), dim)
        n = int(d["n_train"]) + int(d["n_val"])
        X = rng.standard_normal((n, dim)) * scales
        w_true = rng.standard_normal(dim)
        b_true = float(rng.standard_normal())
        y = X @ w_true + b_true + float(d.get("noise", 0.1)) * rng.standard_normal(n)
        nt = int(d["n_train"])
        self.X, self.y = X[:nt], y[:nt]
        self.Xv, self.yv = X[nt:], y[nt:]
        self.layout = (("w", (dim,)), ("b", ()))
        self.dim = dim

    def train_data(self):
        return self.X, self.y

    def init_weights(self, rng):
        return Tree(self.layout, np.zeros(self.dim + 1))

    def _residual(self, w, X, y):
        return X @ w.data[:-1] + w.data[-1] - y

    def loss_and_grad(self, w, batch=None):
        X, y = batch or (self.X, self.y)
        r = self._residual(w, X, y)
        n = len(y)
        grad = np.empty(self.dim + 1)
        grad[:-1] = X.T @ r / n
        grad[-1] = r.sum() / n
        return 0.5 * float(r @ r) / n, Tree(self.layout, grad)

    def metric(self, w, name):
        r = self._residual(w, self.Xv, self.yv)
        mse = float(r @ r) / len(r)
        if name == "neg_val_loss":
            return -0.5 * mse
        if name == "neg_val_mse":
            return -mse
        raise ValueError(f"metric {name!r} is not defined for linreg")

    def optimum(self):
        """Closed-form training-set minimiser as a weight tree."""
        A = np.hstack([self.X, np.ones((len(self.y), 1))])
        sol, *_ = np.linalg.lstsq(A, self.y, rcond=None)
        return Tree(self.layout, sol)


class MLP(_Problem):
    """``in -> hidden... -> classes`` with tanh units and softmax
    cross-entropy, on Gaussian blobs placed around a circle."""

    def __init__(self, task: ProxyTask):
        d, m = task.dataset, task.model
        self.classes = int(d.get("classes", 4))
        self.in_dim = int(d.get("in_dim", 2))
        self.hidden = [int(h) for h in m.get("hidden", [32, 32])]
        self.init_scale = float(m.get("init_scale", 1.0))
        sizes = [self.in_dim, *self.hidden, self.classes]
        layout = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), 1):
            layout += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
        self.layout = tuple(layout)
        self.sizes = sizes
        offs = [0]
        for _, shape in layout:
            offs.append(offs[-1] + math.prod(shape))
        self.slices = [slice(offs[i], offs[i + 1]) for i in range(len(layout))]
        self.total = offs[-1]

        rng = np.random.default_rng(d.get("seed", 0))
        X, y = self._blobs(rng, int(d["n_train"]) + int(d["n_val"]), d)
        nt = int(d["n_train"])
        self.X, self.y = X[:nt], y[:nt]
        self.Xv, self.yv = X[nt:], y[nt:]
        self.Y = self.one_hot(self.y)

    def _blobs(self, rng, n, d):
        k = self.classes
        radius = float(d.get("radius", 2.0))
        std = float(d.get("std", 1.0))
        per = int(d.get("blobs_per_class", 1))
        angles = 2 * np.pi * np.arange(k * per) / (k * per)
        centers = np.zeros((k * per, self.in_dim))
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1 % self.in_dim] = radius * np.sin(angles)
        labels_of_center = np.arange(k * per) % k
        which = rng.integers(k * per, size=n)
        X = centers[which] + std * rng.standard_normal((n, self.in_dim))
        return X, labels_of_center[which]

    def init_weights(self, rng):
        data = np.zeros(self.total)
        for (name, shape), sl in zip(self.layout, self.slices):
            if name.startswith("W"):
                data[sl] = self.init_scale * rng.standard_normal(math.prod(shape)) / math.sqrt(shape[0])
        return Tree(self.layout, data)

    def _params(self, data):
        return [data[sl].reshape(shape) for (_, shape), sl in zip(self.layout, self.slices)]

    def _forward(self, params, X):
        acts = [X]
        h = X
        last = len(params) - 2
        for i in range(0, len(params), 2):
            z = h @ params[i]
            z += params[i + 1]
            h = np.tanh(z, out=z) if i < last else z
            acts.append(h)
        return acts

    @staticmethod
    def _log_softmax(z):
        z = z - z.max(axis=1, keepdims=True)
        z -= np.log(np.exp(z).sum(axis=1, keepdims=True))
        return z

    def one_hot(self, y):
        return np.eye(self.classes)[y]

    def forward_backward(self, data, X, y):
        """Mean cross-entropy and its gradient as a flat buffer.

        ``y`` holds integer labels or their one-hot rows.
        """
        Y = self.one_hot(y) if y.ndim == 1 else y
        params = self._params(data)
        acts = self._forward(params, X)
        n = len(X)
        logp = self._log_softmax(acts[-1])
        loss = -float(np.vdot(logp, Y)) / n
        delta = np.exp(logp)
        delta -= Y
        delta *= 1.0 / n
        grad = np.empty(self.total)
        gparts = self._params(grad)
        for i in range(len(params) - 2, -1, -2):
            np.matmul(acts[i // 2].T, delta, out=gparts[i])
            np.add.reduce(delta, axis=0, out=gparts[i + 1])
            if i:
                a = acts[i // 2]
                delta = delta @ params[i].T
                delta *= 1.0 - a * a
        return loss, grad

    def train_data(self):
        return self.X, self.Y

    def loss_and_grad(self, w, batch=None):
        X, y = batch or (self.X, self.Y)
        loss, grad = self.forward_backward(w.data, X, y)
        return loss, Tree(self.layout, grad)

    def metric(self, w, name):
        logits = self._forward(self._params(w.data), self.Xv)[-1]
        if name == "val_accuracy":
            return float(np.mean(np.argmax(logits, axis=1) == self.yv))
        if name == "neg_val_loss":
            logp = self._log_softmax(logits)
            return float(logp[np.arange(len(self.yv)), self.yv].mean())
        raise ValueError(f"metric {name!r} is not defined for mlp")


class Quadratic(_Problem):
    """``0.5 * curvature * |w|^2``; no data."""

    def __init__(self, task: ProxyTask):
        d = task.dataset
        self.dim = int(d["dim"])
        self.curvature = float(d.get("curvature", 1.0))
        self.init_std = float(d.get("init_std", 1.0))
        self.layout = (("w", (self.dim,)),)

    def init_weights(self, rng):
        return Tree(self.layout, self.init_std * rng.standard_normal(self.dim))

    def loss_and_grad(self, w, batch=None):
        return 0.5 * self.curvature * float(w.data @ w.data), Tree(self.layout, self.curvature * w.data)

    def batched_loss(self, W):
        """Loss for each row of a ``(k, dim)`` matrix of weight vectors."""
        return 0.5 * self.curvature * np.einsum("ij,ij->i", W, W)

    def metric(self, w, name):
        if name == "neg_val_loss":
            return -self.loss(w)
        raise ValueError(f"metric {name!r} is not defined for quadratic")


_PROBLEMS = {"linreg": LinearRegression, "mlp": MLP, "quadratic": Quadratic}


def forward_backward(task: ProxyTask, w: Tree, batch=None):
    """Mean loss and exact gradient tree on ``batch = (X, y)`` (default:
    the whole training set)."""
    return task.problem.loss_and_grad(w, batch)


# -- fitness -------------------------------------------------------------------

def batches(data, batch, steps, rng):
    """One ``(X, y)`` batch per step: consecutive slices of a fresh
    shuffle each epoch, dropping the ragged tail."""
    if data is None:
        for _ in range(steps):
            yield None
        return
    X, y = data
    n = len(y)
    if batch >= n:
        for _ in range(steps):
            yield X, y
        return
    per_epoch = n // batch
    step = 0
    while step < steps:
        perm = rng.permutation(n)
        Xp, yp = X[perm], y[perm]
        for k in range(per_epoch):
            if step == steps:
                return
            yield Xp[k * batch:(k + 1) * batch], yp[k * batch:(k + 1) * batch]
            step += 1


def _finite(x) -> bool:
    # Summation keeps the check to one pass; an overflowing sum is divergence anyway.
    if isinstance(x, Tree):
        x = x.data
    return math.isfinite(np.add.reduce(x, axis=None))


def train(p: Program, task: ProxyTask, seed: int, callback=None, check: bool = True):
    """Run the training loop; returns ``(weights, status)``.

    ``callback(step, loss, lr, update, w)`` is invoked after each step when
    given. Training stops at the first non-finite value.
    """
    prob = task.problem
    eval_seed = derive_seed(seed, functional_hash(p), task.task_id)
    rng = np.random.default_rng(eval_seed)
    w = prob.init_weights(rng)
    if check:
        infer(p, signature_for(w), stable_state=True)
    p = strip_redundant(p)
    m = Tree(w.layout, np.zeros_like(w.data))
    v = Tree(w.layout, np.zeros_like(w.data))
    deadline = time.perf_counter() + task.timeout
    with np.errstate(all="ignore"):
        try:
            return _train_loop(p._compiled, prob, task, rng, w, m, v, deadline, callback)
        except ArithmeticError:
            # Plain-float overflow or division by zero inside a statement.
            return w, NONFINITE


def _train_loop(step_fn, prob, task, rng, w, m, v, deadline, callback):
    for step, batch in enumerate(batches(prob.train_data(), task.batch_size, task.steps, rng)):
        lr = schedule(step, task.steps, task.schedule)
        loss, g = prob.loss_and_grad(w, batch)
        if not math.isfinite(loss):
            return w, NONFINITE
        update, m_new, v_new = step_fn(w, g, m, v, lr)
        w = w - update
        # w - update is non-finite whenever update is; unchanged state was checked already.
        if not (_finite(w) and (m_new is m or _finite(m_new)) and (v_new is v or _finite(v_new))):
            return w, NONFINITE
        m, v = m_new, v_new
        if callback is not None:
            callback(step, loss, lr, update, w)
        if step % 64 == 63 and time.perf_counter() > deadline:
            return w, TIMEOUT
    return w, OK


def evaluate_fitness(p: Program, task: ProxyTask, seed: int = 0, repeats: int = 1) -> Fitness:
    """Fitness of ``p`` on ``task``; deterministic in ``(p, task, seed)``.

    With ``repeats > 1`` the metric is averaged over derived seeds.
    """
    values = []
    for r in range(repeats):
        w, status = train(p, task, seed if r == 0 else derive_seed(seed, "repeat", r))
        if status != OK:
            return Fitness.failed(status)
        value = task.problem.metric(w, task.metric)
        if not math.isfinite(value):
            return Fitness.failed(NONFINITE)
        values.append(value)
    return Fitness(float(np.mean(values)) if repeats > 1 else values[0])


def meta_validate(p: Program, task: ProxyTask, level: str, seed: int = 0) -> Fitness:
    return evaluate_fitness(p, task.at_level(level), seed)


def funnel_select(candidates, task: ProxyTask, baseline: Program, levels=("A", "B", "C"),
                  seed: int = 0, evaluate=None):
    """Successively harder filtering against a baseline.

    Returns ``{level: [(program, fitness), ...]}``; a candidate reaches a
    level only if it beat the baseline strictly at every earlier one.
    ``evaluate(program, task, seed)`` defaults to :func:`evaluate_fitness`.
    """
    evaluate = evaluate or evaluate_fitness
    survivors = list(candidates)
    result = {"baseline": {}}
    for level in levels:
        scaled = task.at_level(level)
        base = evaluate(baseline, scaled, seed) if survivors else None
        result["baseline"][level] = base
        kept = []
        for c in survivors:
            f = evaluate(c, scaled, seed)
            if base is not None and f > base:
                kept.append((c, f))
        result[level] = kept
        survivors = [c for c, _ in kept]
    return result


def flatness_samples(w: Tree, task: ProxyTask, sigma: float = 0.01, draws: int = 1000,
                     seed: int = 0) -> np.ndarray:
    """Full-training-set loss at ``w + eps`` for each of ``draws`` noise
    vectors ``eps ~ N(0, sigma^2 I)``."""
    if sigma <= 0 or draws < 1:
        raise ValueError("flatness needs sigma > 0 and draws >= 1")
    prob = task.problem
    rng = np.random.default_rng(seed)
    if isinstance(prob, Quadratic):
        noise = rng.standard_normal((draws, w.data.size))
        return prob.batched_loss(w.data + sigma * noise)
    return np.array([
        prob.loss(w.replace_data(w.data + sigma * rng.standard_normal(w.data.size)))
        for _ in range(draws)
    ])


def flatness(w: Tree, task: ProxyTask, sigma: float = 0.01, draws: int = 1000, seed: int = 0) -> float:
    return float(np.mean(flatness_samples(w, task, sigma, draws, seed)))
