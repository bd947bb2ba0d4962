"""Hand-written reference optimizers and published hyperparameter presets.

Step functions are pure: they take the weights, the gradient, a state object
and hyperparameters, and return new weights and a new state. Weights may be
scalars, arrays or trees; all arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .values import Tree, zeros_like


@dataclass(frozen=True)
class OptimizerHyperparams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")

    @property
    def effective_decay(self) -> float:
        return self.lr * self.weight_decay


@dataclass(frozen=True)
class AdamWState:
    m: object
    v: object
    t: int = 0

    buffers = ("m", "v")


@dataclass(frozen=True)
class LionState:
    m: object

    buffers = ("m",)


@dataclass(frozen=True)
class AblationState:
    m: object

    buffers = ("m",)


def _data(x):
    return x.data if isinstance(x, Tree) else np.asarray(x, dtype=np.float64)


def _like(template, data):
    if isinstance(template, Tree):
        return Tree(template.layout, data)
    if isinstance(template, np.ndarray) and template.ndim > 0:
        return data
    return float(data)


def init_adamw(w) -> AdamWState:
    return AdamWState(zeros_like(w), zeros_like(w), 0)


def init_lion(w) -> LionState:
    return LionState(zeros_like(w))


def init_ablation(w) -> AblationState:
    return AblationState(zeros_like(w))


def adamw_step(w, g, state: AdamWState, hp: OptimizerHyperparams, lr_t: float):
    """Adam with bias correction and decoupled weight decay."""
    wd, gd = _data(w), _data(g)
    t = state.t + 1
    m = hp.beta1 * _data(state.m) + (1.0 - hp.beta1) * gd
    v = hp.beta2 * _data(state.v) + (1.0 - hp.beta2) * gd * gd
    m_hat = m / (1.0 - hp.beta1 ** t)
    v_hat = v / (1.0 - hp.beta2 ** t)
    update = lr_t * (m_hat / (np.sqrt(v_hat) + hp.eps) + hp.weight_decay * wd)
    return _like(w, wd - update), AdamWState(_like(w, m), _like(w, v), t)


def lion_step(w, g, state: LionState, hp: OptimizerHyperparams, lr_t: float):
    """Sign of an interpolated momentum; the stored momentum is refreshed
    after the weight update with the second coefficient."""
    wd, gd, md = _data(w), _data(g), _data(state.m)
    c = hp.beta1 * md + (1.0 - hp.beta1) * gd
    # Same operation order as the DSL listing, so both agree bitwise.
    update = (np.sign(c) + wd * hp.weight_decay) * lr_t
    new_w = wd - update
    m = (1.0 - hp.beta2) * gd + hp.beta2 * md
    return _like(w, new_w), LionState(_like(w, m))


def ablation_step(w, g, state: AblationState, beta: float, lr_t: float, weight_decay: float = 0.0):
    """Sign momentum with a single EMA coefficient."""
    wd, gd = _data(w), _data(g)
    m = (1.0 - beta) * gd + beta * _data(state.m)
    update = (np.sign(m) + wd * weight_decay) * lr_t
    return _like(w, wd - update), AblationState(_like(w, m))


STEPPERS = {
    "adamw": (init_adamw, adamw_step),
    "lion": (init_lion, lion_step),
}


def make_stepper(name: str, hp: OptimizerHyperparams, ablation_beta: float | None = None):
    """``(init(w), step(w, g, state, lr_t))`` for a named optimizer."""
    if name == "ablation":
        beta = hp.beta1 if ablation_beta is None else ablation_beta
        return init_ablation, lambda w, g, s, lr: ablation_step(w, g, s, beta, lr, hp.weight_decay)
    if name not in STEPPERS:
        raise KeyError(f"unknown optimizer {name!r}")
    init, step = STEPPERS[name]
    return init, lambda w, g, s, lr: step(w, g, s, hp, lr)


# -- presets -------------------------------------------------------------------

@dataclass(frozen=True)
class Preset:
    key: str
    description: str
    baseline_name: str
    baseline: OptimizerHyperparams
    lion: OptimizerHyperparams
    # False for rows published without weight decay.
    uses_weight_decay: bool = True


_VISION = dict(beta1=0.9, beta2=0.999)
_VISION_LION = dict(beta1=0.9, beta2=0.99)
_LM = dict(beta1=0.9, beta2=0.99, eps=1e-6)
_LM_LION = dict(beta1=0.95, beta2=0.98)

# (key, description, baseline optimizer, family, base lr, base wd, lion lr, lion wd)
_ROWS = [
    ("resnet50", "ResNet-50, ImageNet", "adamw", "vision", 3e-3, 0.1, 3e-4, 1.0),
    ("mixer-s16", "Mixer-S/16, ImageNet", "adamw", "vision", 1e-2, 0.3, 3e-3, 1.0),
    ("mixer-b16", "Mixer-B/16, ImageNet", "adamw", "vision", 1e-2, 0.3, 3e-3, 3.0),
    ("vit-s16", "ViT-S/16, ImageNet", "adamw", "vision", 1e-2, 0.1, 1e-3, 1.0),
    ("vit-s16-imagenet-aug", "ViT-S/16, ImageNet, RandAug + Mixup", "adamw", "vision", 3e-3, 0.1, 3e-4, 1.0),
    ("vit-b16", "ViT-B/16, ImageNet", "adamw", "vision", 3e-3, 0.3, 1e-3, 1.0),
    ("vit-b16-imagenet-aug", "ViT-B/16, ImageNet, RandAug + Mixup", "adamw", "vision", 1e-3, 1.0, 1e-4, 10.0),
    ("coatnet-1", "CoAtNet-1, ImageNet", "adamw", "vision", 1e-3, 0.05, 2e-4, 1.0),
    ("coatnet-3", "CoAtNet-3, ImageNet", "adamw", "vision", 1e-3, 0.05, 2e-4, 1.0),
    ("vit-b16-in21k", "ViT-B/16, ImageNet-21K pre-training", "adamw", "vision", 1e-3, 0.1, 1e-4, 0.3),
    ("vit-l16-in21k", "ViT-L/16, ImageNet-21K pre-training", "adamw", "vision", 1e-3, 0.3, 1e-4, 1.0),
    ("vit-b16-jft", "ViT-B/16, JFT pre-training", "adamw", "vision", 6e-4, 0.1, 1e-4, 0.3),
    ("vit-l16-jft", "ViT-L/16, JFT pre-training", "adamw", "vision", 3e-4, 0.1, 1e-4, 0.3),
    ("vit-h14-jft", "ViT-H/14, JFT pre-training", "adamw", "vision", 3e-4, 0.1, 3e-5, 0.3),
    ("vit-g14-jft", "ViT-g/14 and ViT-G/14, JFT pre-training", "adafactor", "vision", 8e-4, 0.03, 3e-5, 0.3),
    ("lit-b", "LiT-B/*-B contrastive", "adamw", "vision", 1e-3, None, 3e-4, None),
    ("lit-g14-l", "LiT-g/14-L contrastive", "adamw", "vision", 1e-3, 0.1, 2e-4, 0.5),
    ("basic-l", "BASIC-L contrastive", "adafactor", "vision", 5e-4, 0.01, 2e-4, 0.1),
    ("imagen", "Imagen base and super-resolution", "adamw", "vision", 1e-3, None, 1e-4, None),
    ("diffusion", "Image generation on ImageNet (diffusion)", "adamw", "vision", 3e-4, 0.01, 3e-5, 0.1),
    ("lm-small-medium", "LM small/medium/large (PG-19, C4)", "adamw", "lm", 3e-3, None, 3e-4, None),
    ("lm-wiki40b", "LM medium, Wiki-40B", "adamw", "lm", 3e-3, 0.001, 3e-4, 0.01),
    ("lm-1.1b-2.1b", "LM 1.1B and 2.1B", "adafactor", "lm", 2e-3, 0.0005, 2e-4, 0.005),
    ("lm-7.5b", "LM 7.5B", "adafactor", "lm", 1e-3, 0.001, 1e-4, 0.01),
    ("t5", "T5 fine-tuning", "adamw", "lm", 3e-5, None, 3e-6, None),
]


def _build_presets():
    out = {}
    for key, desc, base_name, family, base_lr, base_wd, lion_lr, lion_wd in _ROWS:
        base_extra, lion_extra = (_VISION, _VISION_LION) if family == "vision" else (_LM, _LM_LION)
        out[key] = Preset(
            key, desc, base_name,
            OptimizerHyperparams(lr=base_lr, weight_decay=base_wd or 0.0, **base_extra),
            OptimizerHyperparams(lr=lion_lr, weight_decay=lion_wd or 0.0, **lion_extra),
            uses_weight_decay=base_wd is not None,
        )
    return out


PRESETS: dict[str, Preset] = _build_presets()


def presets(key: str) -> tuple[OptimizerHyperparams, OptimizerHyperparams]:
    """``(baseline, lion)`` hyperparameters for one published setting.

    Adafactor baselines are returned as AdamW-style hyperparameters.
    """
    try:
        p = PRESETS[key]
    except KeyError:
        raise KeyError(f"unknown preset {key!r}; known: {', '.join(PRESETS)}") from None
    return p.baseline, p.lion


# -- training with a reference optimizer ------------------------------------------

def train_reference(name: str, task, hp: OptimizerHyperparams, seed: int = 0,
                    callback=None, ablation_beta=None):
    """Train ``task`` with a reference optimizer; returns ``(w, status)``.

    The per-step learning rate is ``hp.lr`` times the task schedule.
    ``callback(step, loss, lr, update, w)`` runs after each step.
    """
    from .tasks import NONFINITE, OK, batches, derive_seed, schedule

    prob = task.problem
    rng = np.random.default_rng(derive_seed(seed, "reference", name, task.task_id))
    w = prob.init_weights(rng)
    init, step = make_stepper(name, hp, ablation_beta)
    state = init(w)
    with np.errstate(all="ignore"):
        for i, batch in enumerate(batches(prob.train_data(), task.batch_size, task.steps, rng)):
            lr = hp.lr * schedule(i, task.steps, task.schedule)
            loss, g = prob.loss_and_grad(w, batch)
            new_w, state = step(w, g, state, lr)
            if not (math.isfinite(loss) and np.all(np.isfinite(_data(new_w)))):
                return w, NONFINITE
            if callback is not None:
                callback(i, loss, lr, _like(w, _data(w) - _data(new_w)), new_w)
            w = new_w
    return w, OK


__all__ = [
    "AblationState",
    "AdamWState",
    "LionState",
    "OptimizerHyperparams",
    "PRESETS",
    "Preset",
    "ablation_step",
    "adamw_step",
    "init_ablation",
    "init_adamw",
    "init_lion",
    "lion_step",
    "make_stepper",
    "presets",
    "train_reference",
]
