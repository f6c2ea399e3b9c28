"""Desk-scale toy benchmarks.

* Hypersphere task: ``n_targets`` random points in ``[0, 1]^D``; an action
  succeeds when it lies within ``r`` of some target. Used to count how many
  CEM iterations it takes to find one success, and to check that a trained
  actor finds one in a single batch of samples.
* Five-point task: five random points in a 10 x 10 square; good actions are
  a 4-component Gaussian mixture at ``p_i - p_0`` with std 0.5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cem import CemConfig, cem_until_success
from .density import GMM, BoxDensity, FlowModel, MofModel
from .seeding import derive_seed, rng_for
from .training import entropy_regularized_loss, nll_loss

N_TARGETS = 10


# -- hypersphere ---------------------------------------------------------------
@dataclass
class HypersphereTask:
    dim: int
    radius: float
    targets: np.ndarray
    seed: int | None = None

    @classmethod
    def sample(cls, dim, radius, rng, seed=None, n_targets=N_TARGETS):
        return cls(dim, radius, rng.uniform(0.0, 1.0, size=(n_targets, dim)), seed)

    def condition(self):
        return self.targets.ravel().copy()


def nearest_distance(task, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != task.dim:
        raise ValueError(f"point dimension {x.shape[1]} != task dimension {task.dim}")
    d = np.sqrt(((x[:, None, :] - task.targets[None]) ** 2).sum(-1)).min(axis=1)
    return d[0] if single else d


def oracle_value(task, x):
    """exp(-d(x)^2 / 2r^2) with d the distance to the nearest target."""
    d = nearest_distance(task, x)
    return np.exp(-(d**2) / (2.0 * task.radius**2))


def success_predicate(task, x):
    return nearest_distance(task, x) <= task.radius


@dataclass
class ScalingResult:
    dim: int
    radius: float
    counts: list  # iteration counts, None marks a failure

    @property
    def failures(self):
        return sum(c is None for c in self.counts)

    def summary(self, max_iterations=50):
        """min / median / max with failures ranked above ``max_iterations``."""
        vals = np.array([max_iterations + 1 if c is None else c for c in self.counts], dtype=float)
        return {"min": float(vals.min()), "median": float(np.median(vals)), "max": float(vals.max()),
                "failures": self.failures}


def scaling_cem_config(dim, population=100, n_elite=10, clip=True, std_floor=1e-3):
    return CemConfig(
        population=population, elite_fraction=n_elite / population, iterations=1,
        init_mean=[0.5] * dim, init_std=[0.5] * dim, std_floor=std_floor,
        lower=[0.0] * dim if clip else None, upper=[1.0] * dim if clip else None, clip=clip,
    )


def run_scaling_experiment(dims=range(1, 7), radii=(0.1, 0.03), repeats=100, population=100,
                           n_elite=10, max_iterations=50, master_seed=0, clip=True, std_floor=1e-3):
    """Iterations CEM needs on the oracle to see one successful sample, per ``(D, r)``."""
    results = []
    for r in radii:
        for dim in dims:
            cfg = scaling_cem_config(dim, population, n_elite, clip, std_floor)
            counts = []
            for rep in range(repeats):
                label = f"scaling/D={dim}/r={r}/rep={rep}"
                task_seed = derive_seed(master_seed, label + "/task")
                task = HypersphereTask.sample(dim, r, np.random.default_rng(task_seed), task_seed)
                counts.append(cem_until_success(
                    lambda x: oracle_value(task, x), cfg, lambda x: success_predicate(task, x),
                    max_iterations, rng_for(master_seed, label + "/cem"), dim=dim,
                ))
            results.append(ScalingResult(dim, r, counts))
    return results


def hypersphere_batch(dim, radius, n, rng, n_targets=N_TARGETS):
    """Fresh task per row; the action is uniform in the ball of a random target, inside the cube."""
    targets = rng.uniform(0.0, 1.0, size=(n, n_targets, dim))
    pick = rng.integers(0, n_targets, size=n)
    centers = targets[np.arange(n), pick]
    actions = np.empty((n, dim))
    todo = np.arange(n)
    while todo.size:
        v = rng.standard_normal((todo.size, dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        rad = radius * rng.random(todo.size) ** (1.0 / dim)
        cand = centers[todo] + v * rad[:, None]
        ok = np.all((cand >= 0.0) & (cand <= 1.0), axis=1)
        actions[todo[ok]] = cand[ok]
        todo = todo[~ok]
    return targets.reshape(n, n_targets * dim), actions


def hypersphere_actor(dim, rng, k=N_TARGETS, n_layers=2, hidden=32):
    return MofModel(dim, N_TARGETS * dim, k=k, init_std=0.1, n_layers=n_layers, hidden=hidden,
                    feat_dim=16, encoder_hidden=64, rng=rng)


def train_hypersphere_actor(dim, radius, steps=1500, batch_size=128, lr=3e-3, rng=None, model=None):
    rng = np.random.default_rng(0) if rng is None else rng
    model = hypersphere_actor(dim, rng) if model is None else model
    opt = ad.Adam(model.parameters(), lr=lr)
    for _ in range(steps):
        cond, act = hypersphere_batch(dim, radius, batch_size, rng)
        opt.zero_grad()
        loss = nll_loss(model, cond, act)
        loss.backward()
        opt.step()
    return model


def actor_on_hypersphere(model, dim, radius, n_tasks=200, n_samples=100, rng=None):
    """Share of fresh tasks where one batch of actor samples contains a success.

    Also reports how often the single highest-density sample succeeds.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    any_hit = top_hit = 0
    for _ in range(n_tasks):
        task = HypersphereTask.sample(dim, radius, rng)
        x, lp = model.sample_n(task.condition(), n_samples, rng)
        ok = success_predicate(task, x)
        any_hit += bool(ok.any())
        top_hit += bool(ok[int(np.argmax(lp))])
    return {"any_success_rate": any_hit / n_tasks, "top_density_success_rate": top_hit / n_tasks}


# -- five-point task -----------------------------------------------------------
FIVE_POINT_STD = 0.5
SQUARE = 10.0
TOY_LOG_STD_BOUNDS = (-5.0, 3.0)


@dataclass
class FivePointTask:
    points: np.ndarray  # (5, 2)

    @classmethod
    def sample(cls, rng):
        return cls(rng.uniform(0.0, SQUARE, size=(5, 2)))

    @property
    def centers(self):
        return self.points[1:] - self.points[0]

    def condition(self):
        return five_point_condition(self.points[None])[0]

    def sample_actions(self, n, rng):
        comp = rng.integers(0, 4, size=n)
        return self.centers[comp] + FIVE_POINT_STD * rng.standard_normal((n, 2))


def five_point_condition(points):
    """Point coordinates rescaled from [0, 10] to [-1, 1], flattened."""
    points = np.asarray(points, dtype=np.float64)
    return (points.reshape(points.shape[0], -1) - SQUARE / 2) / (SQUARE / 2)


def five_point_ground_truth_log_prob(task, a):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    d2 = ((a[:, None, :] - task.centers[None]) ** 2).sum(-1)
    comp = -d2 / (2 * FIVE_POINT_STD**2) - math.log(2 * math.pi * FIVE_POINT_STD**2)
    m = comp.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(comp - m).mean(axis=1, keepdims=True)))[:, 0]


def five_point_batch(n, rng):
    points = rng.uniform(0.0, SQUARE, size=(n, 5, 2))
    comp = rng.integers(1, 5, size=n)
    rows = np.arange(n)
    actions = points[rows, comp] - points[rows, 0] + FIVE_POINT_STD * rng.standard_normal((n, 2))
    return five_point_condition(points), actions


@dataclass
class FivePointConfig:
    steps: int = 3000
    batch_size: int = 128
    lr: float = 3e-3
    hidden: int = 32
    feat_dim: int = 16
    encoder_hidden: int = 64
    n_test_tasks: int = 4
    test_samples: int = 10_000
    grid_size: int = 200
    grid_extent: float = 10.0


def build_five_point_model(model_type, init_std, config: FivePointConfig, rng):
    """Architectures of the toy comparison: linear 4-component GMM, 4 coupling layers, or both."""
    if model_type == "gmm":
        return GMM(2, 10, k=4, hidden=(), init_std=init_std, log_std_bounds=TOY_LOG_STD_BOUNDS, rng=rng)
    if model_type == "flow":
        return FlowModel(2, 10, n_layers=4, hidden=config.hidden, feat_dim=config.feat_dim,
                         encoder_hidden=config.encoder_hidden, rng=rng)
    if model_type == "mof":
        return MofModel(2, 10, k=4, init_std=init_std, log_std_bounds=TOY_LOG_STD_BOUNDS, n_layers=4,
                        hidden=config.hidden, feat_dim=config.feat_dim,
                        encoder_hidden=config.encoder_hidden, rng=rng)
    raise ValueError(f"unknown model type {model_type!r}")


def density_grid(model, task, size=200, extent=10.0):
    """Model density on a ``size x size`` grid over ``[-extent, extent]^2``; returns (axis, log-density)."""
    axis = np.linspace(-extent, extent, size)
    xx, yy = np.meshgrid(axis, axis, indexing="xy")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    cond = np.repeat(task.condition()[None], len(pts), axis=0)
    lp = np.concatenate([model.log_prob_np(cond[i : i + 10_000], pts[i : i + 10_000])
                         for i in range(0, len(pts), 10_000)])
    return axis, lp.reshape(size, size)


def run_model_comparison(model_type, init_std=1.0, seed=0, config=None, with_grid=True):
    """Train one model on the five-point task distribution and score it on held-out tasks."""
    config = config or FivePointConfig()
    rng = rng_for(seed, f"five-point/{model_type}/init={init_std}/train")
    model = build_five_point_model(model_type, init_std, config, rng)
    opt = ad.Adam(model.parameters(), lr=config.lr)
    losses = []
    for _ in range(config.steps):
        cond, act = five_point_batch(config.batch_size, rng)
        opt.zero_grad()
        loss = nll_loss(model, cond, act)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    test_rng = rng_for(seed, "five-point/test")
    tasks = [FivePointTask.sample(test_rng) for _ in range(config.n_test_tasks)]
    lls, gt_lls = [], []
    for task in tasks:
        a = task.sample_actions(config.test_samples, test_rng)
        cond = np.repeat(task.condition()[None], len(a), axis=0)
        lls.append(model.log_prob_np(cond, a).mean())
        gt_lls.append(five_point_ground_truth_log_prob(task, a).mean())
    out = {
        "model": model_type, "init_std": init_std, "seed": seed,
        "heldout_ll": float(np.mean(lls)), "ground_truth_ll": float(np.mean(gt_lls)),
        "final_train_loss": float(np.mean(losses[-100:])), "model_obj": model, "test_task": tasks[0],
    }
    if with_grid:
        out["grid_axis"], out["grid_log_density"] = density_grid(model, tasks[0], config.grid_size,
                                                                 config.grid_extent)
    return out


# -- two-cluster saddle --------------------------------------------------------
SADDLE_INTERVALS = ((-0.1, 0.1), (0.9, 1.1))
UNCONDITIONAL = np.ones(1)


def two_cluster_grid(n_per_interval=4000):
    """Midpoint grid over the two data intervals; symmetric about 0.5."""
    pts = []
    for lo, hi in SADDLE_INTERVALS:
        h = (hi - lo) / n_per_interval
        pts.append(lo + h * (np.arange(n_per_interval) + 0.5))
    return np.concatenate(pts)


def two_cluster_sample(n, rng):
    lo = np.array([iv[0] for iv in SADDLE_INTERVALS])
    pick = rng.integers(0, len(SADDLE_INTERVALS), size=n)
    return (lo[pick] + 0.2 * rng.random(n))[:, None]


def mixture_expected_nll(mu, log_std, logits, x):
    """Mean NLL of a 1-D mixture over data points ``x``; all inputs may be Tensors."""
    x = ad.as_tensor(np.asarray(x, dtype=np.float64).reshape(-1, 1))
    z = ad.div(ad.sub(x, mu), ad.exp(log_std))
    comp = ad.sub(ad.affine(ad.square(z), -0.5, -0.5 * math.log(2 * math.pi)), log_std)
    return ad.neg(ad.logsumexp(ad.add(comp, ad.log_softmax(logits, axis=-1)), axis=1).mean())


def saddle_gradient(mu=(0.5, 0.5), std=(0.5, 0.5), weights=(0.5, 0.5), n_per_interval=4000):
    """Gradient of the grid-expected NLL w.r.t. (means, log-stds, logits) and the loss value."""
    m = Tensor(np.asarray(mu, dtype=np.float64), requires_grad=True)
    ls = Tensor(np.log(np.asarray(std, dtype=np.float64)), requires_grad=True)
    lg = Tensor(np.log(np.asarray(weights, dtype=np.float64)), requires_grad=True)
    loss = mixture_expected_nll(m, ls, lg, two_cluster_grid(n_per_interval))
    loss.backward()
    return np.concatenate([m.grad, ls.grad, lg.grad]), loss.item()


def saddle_gradient_norm(**kwargs):
    return float(np.linalg.norm(saddle_gradient(**kwargs)[0]))


def symmetric_init(gmm, mu=0.5, std=0.5):
    """Make every component of an unconditional 1-D GMM identical."""
    k = gmm.k
    last_w, last_b = gmm.net.weights[-1], gmm.net.biases[-1]
    last_w.data[...] = 0.0
    last_b.data[..., :k] = mu
    last_b.data[..., k : 2 * k] = math.log(std)
    last_b.data[..., 2 * k :] = 0.0


def saddle_stall_run(model_type, seed, steps=1500, lr=1e-2, batch_size=256, n_layers=2, hidden=16):
    """Train from the symmetric init on two-cluster data; returns the final grid-expected NLL."""
    rng = rng_for(seed, "saddle/model")
    if model_type == "gmm":
        model = GMM(1, 1, k=2, init_std=0.5, rng=rng)
        gmm = model
    elif model_type == "mof":
        model = MofModel(1, 1, k=2, init_std=0.5, n_layers=n_layers, hidden=hidden, feat_dim=8,
                         encoder_hidden=8, rng=rng)
        gmm = model.latent
    else:
        raise ValueError(f"unknown model type {model_type!r}")
    symmetric_init(gmm)
    data_rng = rng_for(seed, "saddle/data")
    opt = ad.Adam(model.parameters(), lr=lr)
    cond = np.ones((batch_size, 1))
    for _ in range(steps):
        opt.zero_grad()
        loss = nll_loss(model, cond, two_cluster_sample(batch_size, data_rng))
        loss.backward()
        opt.step()
    grid = two_cluster_grid(1000)[:, None]
    return float(-model.log_prob_np(np.ones((len(grid), 1)), grid).mean())


def saddle_loss():
    """Expected NLL at the symmetric stationary point (both components at the single-Gaussian fit)."""
    x = two_cluster_grid()
    mu, std = x.mean(), x.std()
    return saddle_gradient(mu=(mu, mu), std=(std, std))[1]


# -- entropy fixed point -------------------------------------------------------
def step_reward(a, edge=0.5):
    """Binary reward on the unit interval: 1 on ``[0, edge]``, else 0."""
    return (np.asarray(a, dtype=np.float64).reshape(-1) <= edge).astype(np.float64)


def region_mass_ratio(model, edge=0.5, n_grid=2000):
    """Probability mass on ``[0, edge]`` over mass on ``(edge, 1]`` (midpoint rule)."""
    grid = (np.arange(n_grid) + 0.5) / n_grid
    p = np.exp(model.log_prob_np(np.ones((n_grid, 1)), grid[:, None]))
    return p[grid <= edge].sum() / p[grid > edge].sum()


def entropy_fixed_point_run(alpha, seed=0, steps=3000, k=16, lr=1e-2, batch_size=256,
                            n_entropy_samples=1):
    """On-policy training of a bounded 1-D density under the step reward.

    The learning rate drops tenfold halfway through. Returns the inside/outside
    mass ratio averaged over the last quarter of training; the stationary
    policy of the loss gives ``exp(1 / alpha)`` for equal-width regions.
    """
    rng = rng_for(seed, f"entropy/alpha={alpha}")
    model = BoxDensity(GMM(1, 1, k=k, init_std=1.0, rng=rng), 0.0, 1.0)
    opt = ad.Adam(model.parameters(), lr=lr)
    cond = np.ones((batch_size, 1))
    ratios = []
    for i in range(steps):
        if i == steps // 2:
            opt.lr = lr / 10
        a, _ = model.sample(cond, rng)
        opt.zero_grad()
        loss, _ = entropy_regularized_loss(model, cond, a, step_reward(a), alpha, n_entropy_samples, rng,
                                           normalize="batch")
        loss.backward()
        opt.step()
        if i >= 3 * steps // 4 and i % 20 == 0:
            ratios.append(region_mass_ratio(model))
    return float(np.mean(ratios))
