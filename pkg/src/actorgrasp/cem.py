"""Success-probability critic and the cross-entropy method."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Adam


class CriticModel:
    """MLP over ``concat(condition, action)`` producing a success logit."""

    tag = "critic"

    def __init__(self, cond_dim, action_dim, hidden=(128, 128), activation="relu", lr=1e-3, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.cond_dim = int(cond_dim)
        self.action_dim = int(action_dim)
        self.hidden = tuple(hidden)
        self.activation = activation
        self.net = MLP([cond_dim + action_dim, *self.hidden, 1], activation=activation, rng=rng)
        self.optimizer = Adam(self.net.parameters(), lr=lr)

    def logits(self, cond, actions):
        cond = np.asarray(cond, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        if actions.ndim == 1:
            actions = actions[None]
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (actions.shape[0], cond.shape[0]))
        if cond.shape[1] != self.cond_dim or actions.shape[1] != self.action_dim:
            raise ValueError(
                f"critic: expected condition width {self.cond_dim} and action width "
                f"{self.action_dim}, got {cond.shape[1]} and {actions.shape[1]}"
            )
        if cond.shape[0] != actions.shape[0]:
            raise ValueError("critic: condition and action batch sizes differ")
        out = self.net(np.concatenate([cond, actions], axis=1))
        return ad.reshape(out, (actions.shape[0],))

    def named_parameters(self):
        return self.net.named_parameters("net.")

    def parameters(self):
        return self.net.parameters()

    def save(self, path):
        ad.save_checkpoint(
            path, self.named_parameters(), self.tag,
            {"cond_dim": self.cond_dim, "action_dim": self.action_dim,
             "hidden": list(self.hidden), "activation": self.activation},
        )


def critic_predict(critic, cond, actions):
    with ad.no_grad():
        z = critic.logits(cond, actions).data
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_with_logits(logits, labels):
    labels = np.asarray(labels, dtype=np.float64)
    return ad.sub(ad.softplus(logits), ad.mul(logits, labels)).mean()


def critic_train_step(critic, cond, actions, success):
    success = np.asarray(success, dtype=np.float64)
    if success.size == 0:
        raise ValueError("critic_train_step: empty batch")
    critic.optimizer.zero_grad()
    loss = bce_with_logits(critic.logits(cond, actions), success)
    loss.backward()
    critic.optimizer.step()
    return loss.item()


@dataclass
class CemConfig:
    population: int = 64
    elite_fraction: float = 0.1
    iterations: int = 3
    init_mean: list = field(default_factory=lambda: [0.5])
    init_std: list = field(default_factory=lambda: [0.5])
    std_floor: float = 1e-3
    lower: list | None = None
    upper: list | None = None
    clip: bool = True

    def __post_init__(self):
        if self.population < 1:
            raise ValueError("population must be >= 1")
        if not 0.0 < self.elite_fraction <= 1.0:
            raise ValueError("elite_fraction must be in (0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if np.any(np.asarray(self.init_std) <= 0):
            raise ValueError("init_std must be positive")
        if self.std_floor < 0:
            raise ValueError("std_floor must be >= 0")

    @property
    def n_elite(self):
        return max(1, int(round(self.population * self.elite_fraction)))


@dataclass
class CemState:
    iteration: int
    mean: np.ndarray
    std: np.ndarray
    best_action: np.ndarray
    best_score: float


def _bounds(config, dim):
    lo = None if config.lower is None else np.broadcast_to(np.asarray(config.lower, float), (dim,))
    hi = None if config.upper is None else np.broadcast_to(np.asarray(config.upper, float), (dim,))
    return lo, hi


def _cem_iterations(score_fn, config, rng, dim=None):
    """Yield ``(population, scores, state)`` per iteration."""
    mean = np.atleast_1d(np.asarray(config.init_mean, dtype=np.float64))
    std = np.atleast_1d(np.asarray(config.init_std, dtype=np.float64))
    dim = dim or max(mean.size, std.size)
    mean = np.broadcast_to(mean, (dim,)).copy()
    std = np.broadcast_to(std, (dim,)).copy()
    lo, hi = _bounds(config, dim)
    best_action, best_score = None, -np.inf
    for it in range(1, config.iterations + 1):
        pop = mean + std * rng.standard_normal((config.population, dim))
        if config.clip and (lo is not None or hi is not None):
            pop = np.clip(pop, lo, hi)
        scores = np.asarray(score_fn(pop), dtype=np.float64).reshape(config.population)
        # stable sort: ties keep the lower index
        order = np.argsort(-scores, kind="stable")
        if scores[order[0]] > best_score:
            best_score = float(scores[order[0]])
            best_action = pop[order[0]].copy()
        elites = pop[order[: config.n_elite]]
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), config.std_floor)
        yield pop, scores, CemState(it, mean.copy(), std.copy(), best_action.copy(), best_score)


def cem_optimize(score_fn, config: CemConfig, rng, dim=None):
    """Maximize ``score_fn`` over actions. Returns the best action seen and the per-iteration trace."""
    trace = [state for _, _, state in _cem_iterations(score_fn, config, rng, dim)]
    return trace[-1].best_action, trace


def cem_until_success(oracle, config: CemConfig, success_predicate, max_iterations, rng, dim=None):
    """1-based iteration at which some population member succeeds, or ``None`` on failure."""
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    cfg = CemConfig(**{**config.__dict__, "iterations": max_iterations})
    for pop, _, state in _cem_iterations(oracle, cfg, rng, dim):
        if np.any(success_predicate(pop)):
            return state.iteration
    return None
