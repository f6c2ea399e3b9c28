"""Config-driven experiment runners.

Every run writes into ``<out>/<experiment>/``:

* CSV tables whose first line is ``# config <hash>``,
* ``summary.json`` with the aggregated numbers,
* ``config.json`` with the resolved configuration,
* ``timings.csv`` with wall-clock measurements (the only non-deterministic file),
* JSON-lines episode logs and model checkpoints where relevant.

Re-running a config gives byte-identical CSVs apart from ``timings.csv``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import grasp_sim as gs
from . import toy
from .cem import CriticModel
from .density import GMM, FlowModel, MofModel
from .seeding import derive_seed, rng_for
from .training import (
    ReplayBuffer, TrainConfig, OnPolicyState, off_policy_train, off_policy_train_critic,
    on_policy_train, relabel_episode, steps_to_threshold,
)

EXPERIMENTS = ("scaling", "five-point", "off-policy", "on-policy", "inference-time", "policy-eval")
OUT_ENV = "ACTORGRASP_OUT"
# dz is fixed by the gripper height and (sin, cos) lies on the unit circle; without
# jitter the likelihood is unbounded along those directions
GRASP_ACTION_NOISE = (0.0, 0.0, 0.01, 0.05, 0.05)


class ConfigError(ValueError):
    pass


# -- config sections -----------------------------------------------------------
@dataclass
class ModelSpec:
    """Grasp-sim actor architecture."""

    type: str = "mof"
    k: int = 4
    hidden: list = field(default_factory=list)
    init_std: float = 1.0
    fixed_std: float | None = None
    log_std_bounds: list = field(default_factory=lambda: [-5.0, 2.0])
    n_layers: int = 4
    flow_hidden: int = 32
    feat_dim: int = 16
    encoder_hidden: int = 32

    def __post_init__(self):
        if self.type not in ("gmm", "flow", "mof"):
            raise ConfigError(f"model.type: unknown model type {self.type!r}")
        if self.k < 1 or self.n_layers < 1:
            raise ConfigError("model: k and n_layers must be >= 1")

    def build(self, action_dim, cond_dim, rng):
        if self.type == "gmm":
            return GMM(action_dim, cond_dim, k=self.k, hidden=tuple(self.hidden), init_std=self.init_std,
                       fixed_std=self.fixed_std, log_std_bounds=tuple(self.log_std_bounds), rng=rng)
        if self.type == "flow":
            return FlowModel(action_dim, cond_dim, n_layers=self.n_layers, hidden=self.flow_hidden,
                             feat_dim=self.feat_dim, encoder_hidden=self.encoder_hidden, rng=rng)
        if self.type == "mof":
            return MofModel(action_dim, cond_dim, k=self.k, gmm_hidden=tuple(self.hidden),
                            init_std=self.init_std, log_std_bounds=tuple(self.log_std_bounds),
                            n_layers=self.n_layers, hidden=self.flow_hidden, feat_dim=self.feat_dim,
                            encoder_hidden=self.encoder_hidden, rng=rng)
        raise ConfigError(f"model.type: unknown model type {self.type!r}")


@dataclass
class CriticSpec:
    hidden: list = field(default_factory=lambda: [128, 128])
    lr: float = 1e-3
    batch_size: int = 256
    steps: int = 2000

    def build(self, cond_dim, action_dim, rng):
        return CriticModel(cond_dim, action_dim, hidden=tuple(self.hidden), lr=self.lr, rng=rng)


@dataclass
class SimSpec:
    kind: str = "block"
    n_objects: int = 2
    max_steps: int = 10
    collect_min_steps: int = 3
    collect_max_steps: int = 10
    n_proposals: int = 64
    eval_seed: int = 12345

    def __post_init__(self):
        if self.kind not in gs.CLASSES:
            raise ConfigError(f"sim.kind: unknown object class {self.kind!r}; expected one of {list(gs.CLASSES)}")
        if self.n_objects < 1 or self.n_proposals < 1:
            raise ConfigError("sim: n_objects and n_proposals must be >= 1")

    def env(self):
        cfg = gs.EpisodeConfig(max_steps=self.max_steps, collect_min_steps=self.collect_min_steps,
                               collect_max_steps=self.collect_max_steps)
        return gs.GraspEnv(self.kind, self.n_objects, cfg, self.eval_seed, self.n_proposals)


@dataclass
class ScalingSpec:
    dims: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    radii: list = field(default_factory=lambda: [0.1, 0.03])
    repeats: int = 100
    population: int = 100
    n_elite: int = 10
    max_iterations: int = 50
    clip: bool = True
    std_floor: float = 1e-3
    actor_dims: list = field(default_factory=lambda: [1, 2, 3])
    actor_radius: float = 0.1
    actor_steps: int = 1500
    actor_tasks: int = 200
    actor_samples: int = 100


@dataclass
class FivePointSpec:
    models: list = field(default_factory=lambda: [["gmm", 1.0], ["gmm", 10.0], ["flow", 1.0],
                                                  ["mof", 1.0], ["mof", 10.0]])
    steps: int = 3000
    batch_size: int = 128
    lr: float = 3e-3
    hidden: int = 32
    feat_dim: int = 16
    encoder_hidden: int = 64
    n_test_tasks: int = 4
    test_samples: int = 10_000
    grid_size: int = 200
    grid_seeds: list = field(default_factory=lambda: [0])

    def __post_init__(self):
        for m in self.models:
            if not (isinstance(m, list) and len(m) == 2 and m[0] in ("gmm", "flow", "mof")
                    and isinstance(m[1], (int, float)) and m[1] > 0):
                raise ConfigError(f"five_point.models: expected [model type, init std > 0], got {m!r}")


@dataclass
class OffPolicySpec:
    dataset_sizes: list = field(default_factory=lambda: [2000, 5000, 20000])
    actor_steps: int = 6000
    batch_size: int = 128
    lr: float = 1e-3
    eval_interval: int = 1000
    eval_episodes: int = 200
    critic: bool = True
    action_noise: list = field(default_factory=lambda: list(GRASP_ACTION_NOISE))


@dataclass
class OnPolicySpec:
    variants: list = field(default_factory=lambda: [["actor", 0.0], ["actor", 0.1], ["random", 0.0]])
    warmup_success: int = 300
    env_step_budget: int = 12000
    eval_interval: int = 1000
    eval_episodes: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    n_entropy_samples: int = 1
    episodes_per_round: int = 20
    train_steps_per_round: int = 60
    threshold: float = 0.5
    checkpoint_every: int = 0
    action_noise: list = field(default_factory=lambda: list(GRASP_ACTION_NOISE))

    def __post_init__(self):
        for v in self.variants:
            if not (isinstance(v, list) and len(v) == 2 and v[0] in ("actor", "random")
                    and isinstance(v[1], (int, float)) and v[1] >= 0):
                raise ConfigError(f"on_policy.variants: expected [\"actor\"|\"random\", alpha >= 0], got {v!r}")


@dataclass
class InferenceSpec:
    n_decisions: int = 200
    actor_n: int = 64
    population: int = 64
    elite_fraction: float = 0.1
    iterations: int = 3


@dataclass
class PolicyEvalSpec:
    dataset_size: int = 20000
    actor_steps: int = 6000
    batch_size: int = 128
    lr: float = 1e-3
    eval_episodes: int = 200
    policies: list = field(default_factory=lambda: ["actor", "cem", "actor+critic"])
    log_episodes: bool = True
    action_noise: list = field(default_factory=lambda: list(GRASP_ACTION_NOISE))

    def __post_init__(self):
        bad = [p for p in self.policies if p not in ("actor", "cem", "actor+critic")]
        if bad or not self.policies:
            raise ConfigError(f"policy_eval.policies: unknown policy {bad[0] if bad else None!r}")


@dataclass
class ExperimentConfig:
    experiment: str = "scaling"
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    model: ModelSpec = field(default_factory=ModelSpec)
    critic: CriticSpec = field(default_factory=CriticSpec)
    sim: SimSpec = field(default_factory=SimSpec)
    scaling: ScalingSpec = field(default_factory=ScalingSpec)
    five_point: FivePointSpec = field(default_factory=FivePointSpec)
    off_policy: OffPolicySpec = field(default_factory=OffPolicySpec)
    on_policy: OnPolicySpec = field(default_factory=OnPolicySpec)
    inference_time: InferenceSpec = field(default_factory=InferenceSpec)
    policy_eval: PolicyEvalSpec = field(default_factory=PolicyEvalSpec)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment: unknown tag {self.experiment!r}; expected one of {list(EXPERIMENTS)}")
        if not self.seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in self.seeds):
            raise ConfigError("seeds: expected a non-empty list of integers")


DEFAULT_SEEDS = {"scaling": [0], "five-point": list(range(10)), "off-policy": list(range(5)),
                 "on-policy": list(range(5)), "inference-time": [0], "policy-eval": list(range(5))}


def default_config(experiment, **overrides):
    overrides.setdefault("seeds", list(DEFAULT_SEEDS[experiment]))
    return ExperimentConfig(experiment=experiment, **overrides)


# -- config (de)serialization ----------------------------------------------------
def _check_value(path, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:  # optional numbers default to None
        ok = value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _from_dict(cls, data, prefix=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = [k for k in data if k.replace("-", "_") not in fields]
    if unknown:
        raise ConfigError(f"unknown config field '{prefix}{unknown[0]}'")
    kwargs = {}
    for name, f in fields.items():
        key = name if name in data else name.replace("_", "-")
        if key not in data:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        path = f"{prefix}{name}"
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_dict(type(default), data[key], path + ".")
        else:
            kwargs[name] = _check_value(path, data[key], default)
    return cls(**kwargs)


def config_from_dict(data):
    if isinstance(data, dict) and "experiment" in data and "seeds" not in data:
        exp = data["experiment"]
        if exp in DEFAULT_SEEDS:
            data = {**data, "seeds": list(DEFAULT_SEEDS[exp])}
    return _from_dict(ExperimentConfig, data)


def load_config(path):
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(data)


def config_to_dict(config):
    return dataclasses.asdict(config)


def save_config(config, path):
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n")


def config_hash(config):
    """Short digest of everything that affects results (the output directory does not)."""
    d = config_to_dict(config)
    d.pop("output_dir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# -- output helpers ----------------------------------------------------------------
def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(round(float(v), 12))
    return str(v)


def write_csv(path, fields, rows, chash):
    out = io.StringIO()
    out.write(f"# config {chash}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([_fmt(row.get(k)) for k in fields])
    Path(path).write_text(out.getvalue())


def read_csv(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def resolve_output_dir(config, out=None):
    return Path(out or os.environ.get(OUT_ENV) or config.output_dir)


def _map(fn, jobs, threads):
    if threads and threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


# -- scaling ---------------------------------------------------------------------------
def _scaling_seed(job):
    config, seed = job
    sp = config.scaling
    t0 = time.perf_counter()
    results = toy.run_scaling_experiment(sp.dims, sp.radii, sp.repeats, sp.population, sp.n_elite,
                                         sp.max_iterations, master_seed=seed, clip=sp.clip,
                                         std_floor=sp.std_floor)
    counts, summary = [], []
    for res in results:
        for rep, c in enumerate(res.counts):
            counts.append({"seed": seed, "D": res.dim, "r": res.radius, "repeat": rep,
                           "iterations": "fail" if c is None else c})
        summary.append({"seed": seed, "D": res.dim, "r": res.radius, **res.summary(sp.max_iterations)})
    t_cem = time.perf_counter() - t0
    actor = []
    for dim in sp.actor_dims:
        rng = rng_for(seed, f"scaling/actor/D={dim}")
        untrained = toy.hypersphere_actor(dim, rng_for(seed, f"scaling/actor/D={dim}/init"))
        base = toy.actor_on_hypersphere(untrained, dim, sp.actor_radius, sp.actor_tasks, sp.actor_samples,
                                        rng_for(seed, f"scaling/actor/D={dim}/eval"))
        model = toy.train_hypersphere_actor(dim, sp.actor_radius, sp.actor_steps, rng=rng,
                                            model=toy.hypersphere_actor(dim, rng_for(seed, f"scaling/actor/D={dim}/init")))
        res = toy.actor_on_hypersphere(model, dim, sp.actor_radius, sp.actor_tasks, sp.actor_samples,
                                       rng_for(seed, f"scaling/actor/D={dim}/eval"))
        actor.append({"seed": seed, "D": dim, "r": sp.actor_radius, **res,
                      "untrained_any_success_rate": base["any_success_rate"]})
    return counts, summary, actor, {"cem_seconds": t_cem, "total_seconds": time.perf_counter() - t0}


def run_scaling(config, out, threads=1):
    chash = config_hash(config)
    parts = _map(_scaling_seed, [(config, s) for s in config.seeds], threads)
    counts = [r for p in parts for r in p[0]]
    summary = [r for p in parts for r in p[1]]
    actor = [r for p in parts for r in p[2]]
    write_csv(out / "scaling_counts.csv", ["seed", "D", "r", "repeat", "iterations"], counts, chash)
    write_csv(out / "scaling_summary.csv", ["seed", "D", "r", "min", "median", "max", "failures"], summary, chash)
    write_csv(out / "actor_hypersphere.csv", ["seed", "D", "r", "any_success_rate", "top_density_success_rate",
                                              "untrained_any_success_rate"], actor, chash)
    timings = [{"seed": s, **p[3]} for s, p in zip(config.seeds, parts)]
    return {"summary": summary, "actor": actor}, timings


# -- five-point ------------------------------------------------------------------------
def _five_point_job(job):
    config, seed, model_type, init_std = job
    fp = config.five_point
    cfg = toy.FivePointConfig(steps=fp.steps, batch_size=fp.batch_size, lr=fp.lr, hidden=fp.hidden,
                              feat_dim=fp.feat_dim, encoder_hidden=fp.encoder_hidden,
                              n_test_tasks=fp.n_test_tasks, test_samples=fp.test_samples,
                              grid_size=fp.grid_size)
    t0 = time.perf_counter()
    res = toy.run_model_comparison(model_type, init_std, seed, cfg, with_grid=seed in fp.grid_seeds)
    res.pop("model_obj")
    res.pop("test_task")
    res["seconds"] = time.perf_counter() - t0
    return res


def run_five_point(config, out, threads=1):
    chash = config_hash(config)
    jobs = [(config, s, m, float(std)) for s in config.seeds for m, std in config.five_point.models]
    results = _map(_five_point_job, jobs, threads)
    rows = [{k: r[k] for k in ("model", "init_std", "seed", "heldout_ll", "ground_truth_ll", "final_train_loss")}
            for r in results]
    write_csv(out / "five_point_ll.csv", ["model", "init_std", "seed", "heldout_ll", "ground_truth_ll",
                                          "final_train_loss"], rows, chash)
    for r in results:
        if "grid_log_density" not in r:
            continue
        axis, grid = r["grid_axis"], r["grid_log_density"]
        cells = [{"x": axis[j], "y": axis[i], "log_density": grid[i, j]}
                 for i in range(len(axis)) for j in range(len(axis))]
        name = f"grid_{r['model']}_std{r['init_std']:g}_seed{r['seed']}.csv"
        write_csv(out / name, ["x", "y", "log_density"], cells, chash)
    means = {}
    for m, std in config.five_point.models:
        vals = [r["heldout_ll"] for r in results if r["model"] == m and r["init_std"] == float(std)]
        means[f"{m}@{float(std):g}"] = float(np.mean(vals))
    timings = [{"model": r["model"], "init_std": r["init_std"], "seed": r["seed"], "seconds": r["seconds"]}
               for r in results]
    return {"mean_heldout_ll": means,
            "ground_truth_ll": float(np.mean([r["ground_truth_ll"] for r in results]))}, timings


# -- grasp-sim helpers -------------------------------------------------------------------
def collect_random_dataset(env, n_transitions, rng, log=None):
    """Random-policy episodes until ``n_transitions`` relabeled transitions exist (kept in episode order)."""
    buf = ReplayBuffer(n_transitions + env.config.collect_max_steps, env.cond_dim, env.action_dim)
    episodes = 0
    while len(buf) < n_transitions:
        ep = env.collect("random", None, rng)
        ep.episode_id = episodes
        episodes += 1
        buf.extend(relabel_episode(ep))
        if log is not None:
            log.append(ep.to_json())
    return buf.items(), episodes


def _prefix(batch, n):
    return type(batch)(batch.condition[:n], batch.action[:n], batch.success[:n])


def _eval_actor(env, n):
    return lambda model: env.evaluate_policy(gs.ActorPolicy(model, env.n_proposals, env.config), n)


def _eval_cem(env, n, spec=None):
    spec = spec or InferenceSpec()
    return lambda critic: env.evaluate_policy(
        gs.CemPolicy(critic, spec.population, spec.elite_fraction, spec.iterations, env.config), n)


# -- off-policy --------------------------------------------------------------------------
def _off_policy_seed(job):
    config, seed = job
    op, env = config.off_policy, config.sim.env()
    t0 = time.perf_counter()
    data, _ = collect_random_dataset(env, max(op.dataset_sizes), rng_for(seed, "off-policy/data"))
    rows = []
    for size in op.dataset_sizes:
        subset = _prefix(data, size)
        n_succ = int(subset.success.sum())
        model = config.model.build(env.action_dim, env.cond_dim, rng_for(seed, f"off-policy/actor-init/{size}"))
        tc = TrainConfig(batch_size=op.batch_size, total_steps=op.actor_steps, eval_interval=op.eval_interval,
                         lr=op.lr, action_noise=op.action_noise)
        curve = off_policy_train(model, subset, tc, rng_for(seed, f"off-policy/actor/{size}"),
                                 evaluate=_eval_actor(env, op.eval_episodes), env_steps=size)
        rows += [{"seed": seed, "learner": "actor", "dataset_size": size, "successes": n_succ, **r} for r in curve]
        if op.critic:
            critic = config.critic.build(env.cond_dim, env.action_dim, rng_for(seed, f"off-policy/critic-init/{size}"))
            curve = off_policy_train_critic(critic, subset, config.critic.steps, config.critic.batch_size,
                                            rng_for(seed, f"off-policy/critic/{size}"),
                                            evaluate=_eval_cem(env, op.eval_episodes, config.inference_time),
                                            eval_interval=op.eval_interval, env_steps=size)
            rows += [{"seed": seed, "learner": "critic", "dataset_size": size, "successes": n_succ, **r}
                     for r in curve]
    return rows, time.perf_counter() - t0


def run_off_policy(config, out, threads=1):
    chash = config_hash(config)
    parts = _map(_off_policy_seed, [(config, s) for s in config.seeds], threads)
    rows = [r for p in parts for r in p[0]]
    write_csv(out / "off_policy_curve.csv", ["seed", "learner", "dataset_size", "successes", "step", "env_steps",
                                             "eval_success_rate", "loss"], rows, chash)
    final = {}
    for learner in ("actor", "critic"):
        for size in config.off_policy.dataset_sizes:
            last = [r for r in rows if r["learner"] == learner and r["dataset_size"] == size
                    and r["step"] == _last_step(config, learner)]
            if last:
                final.setdefault(learner, {})[str(size)] = float(np.mean([r["eval_success_rate"] for r in last]))
    timings = [{"seed": s, "seconds": p[1]} for s, p in zip(config.seeds, parts)]
    return {"final_success_rate": final}, timings


def _last_step(config, learner):
    return config.off_policy.actor_steps if learner == "actor" else config.critic.steps


# -- on-policy ---------------------------------------------------------------------------
def _variant_name(behavior, alpha):
    return f"{behavior}_alpha{float(alpha):g}"


def _train_config(op):
    return TrainConfig(batch_size=op.batch_size, alpha=0.0, n_entropy_samples=op.n_entropy_samples,
                       eval_interval=op.eval_interval, eval_episodes=op.eval_episodes, lr=op.lr,
                       warmup_success=op.warmup_success, env_step_budget=op.env_step_budget,
                       episodes_per_round=op.episodes_per_round, train_steps_per_round=op.train_steps_per_round,
                       action_noise=op.action_noise)


def _on_policy_job(job):
    config, seed, behavior, alpha, ckpt_dir, resume = job
    op, env = config.on_policy, config.sim.env()
    tc = dataclasses.replace(_train_config(op), alpha=float(alpha))
    name = _variant_name(behavior, alpha)
    # the same seed shares model init and data stream across variants
    model = config.model.build(env.action_dim, env.cond_dim, rng_for(seed, "on-policy/init"))
    ckpt = Path(ckpt_dir) / f"{name}_seed{seed}.npz"
    state = None
    if resume and ckpt.exists():
        state = OnPolicyState.load(ckpt, model)
    rng = rng_for(seed, "on-policy/run")
    t0 = time.perf_counter()
    every = op.checkpoint_every or op.env_step_budget
    while state is None or state.env_steps < op.env_step_budget:
        target = (state.env_steps if state else 0) + every
        state = on_policy_train(model, env, tc, op.warmup_success, rng, behavior=behavior, state=state,
                                stop_after_env_steps=target)
        state.save(ckpt, model)
        if not state.warm and state.env_steps >= op.env_step_budget:
            break
    return {"seed": seed, "behavior": behavior, "alpha": float(alpha), "curve": state.curve,
            "steps_to_threshold": steps_to_threshold(state.curve, op.threshold),
            "seconds": time.perf_counter() - t0}


def run_on_policy(config, out, threads=1, resume=False):
    chash = config_hash(config)
    op = config.on_policy
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(config, s, b, a, str(ckpt_dir), resume) for s in config.seeds for b, a in op.variants]
    results = _map(_on_policy_job, jobs, threads)
    _write_json(ckpt_dir / "manifest.json", {"config_hash": chash, "files": sorted(
        f"{_variant_name(b, a)}_seed{s}.npz" for s in config.seeds for b, a in op.variants)})
    rows, thr = [], []
    for r in results:
        for row in r["curve"]:
            rows.append({"seed": r["seed"], "behavior": r["behavior"], "alpha": r["alpha"], **row})
        thr.append({"seed": r["seed"], "behavior": r["behavior"], "alpha": r["alpha"],
                    "steps_to_threshold": r["steps_to_threshold"]})
    write_csv(out / "on_policy_curve.csv", ["seed", "behavior", "alpha", "step", "env_steps", "eval_success_rate",
                                            "loss", "entropy_estimate"], rows, chash)
    write_csv(out / "on_policy_threshold.csv", ["seed", "behavior", "alpha", "steps_to_threshold"], thr, chash)
    summary = {}
    for b, a in op.variants:
        vals = [t["steps_to_threshold"] for t in thr if t["behavior"] == b and t["alpha"] == float(a)]
        summary[_variant_name(b, a)] = {
            "mean_steps_to_threshold": censored_mean(vals, op.env_step_budget),
            "reached": sum(v is not None for v in vals), "runs": len(vals)}
    timings = [{"seed": r["seed"], "variant": _variant_name(r["behavior"], r["alpha"]), "seconds": r["seconds"]}
               for r in results]
    return {"threshold": op.threshold, "variants": summary}, timings


def censored_mean(values, budget):
    """Mean env steps to threshold; runs that never reach it count as the full budget."""
    return float(np.mean([budget if v is None else v for v in values]))


# -- inference time ----------------------------------------------------------------------
def run_inference_time(config, out, threads=1):
    chash = config_hash(config)
    spec, env = config.inference_time, config.sim.env()
    rows, timings = [], []
    for seed in config.seeds:
        actor = config.model.build(env.action_dim, env.cond_dim, rng_for(seed, "inference/actor"))
        critic = config.critic.build(env.cond_dim, env.action_dim, rng_for(seed, "inference/critic"))
        policies = [gs.ActorPolicy(actor, spec.actor_n),
                    gs.CemPolicy(critic, spec.population, spec.elite_fraction, spec.iterations),
                    gs.ActorCriticPolicy(actor, critic, spec.actor_n)]
        stats = {}
        for pol in policies:
            gs.measure_inference_time(pol, 5, config.sim.kind, seed)  # warm-up
            pol.forward_batches = pol.scored_samples = 0
            stats[pol.name] = gs.measure_inference_time(pol, spec.n_decisions, config.sim.kind, seed)
            rows.append({"seed": seed, "policy": pol.name,
                         "forward_batches_per_decision": stats[pol.name]["forward_batches_per_decision"],
                         "scored_samples_per_decision": stats[pol.name]["scored_samples_per_decision"]})
            timings.append({"seed": seed, "policy": pol.name, "mean_seconds": stats[pol.name]["mean_seconds"]})
    write_csv(out / "inference_counts.csv", ["seed", "policy", "forward_batches_per_decision",
                                             "scored_samples_per_decision"], rows, chash)
    mean_t = {p: float(np.mean([t["mean_seconds"] for t in timings if t["policy"] == p]))
              for p in ("actor", "cem", "actor+critic")}
    batches = {r["policy"]: r["forward_batches_per_decision"] for r in rows}
    samples = {r["policy"]: r["scored_samples_per_decision"] for r in rows}
    summary = {"forward_batches_per_decision": batches, "scored_samples_per_decision": samples,
               "mean_seconds": mean_t, "cem_over_actor_time": mean_t["cem"] / mean_t["actor"],
               "cem_over_actor_batches": batches["cem"] / batches["actor"]}
    return summary, timings


# -- policy evaluation ------------------------------------------------------------------------
def _policy_eval_seed(job):
    config, seed = job
    pe, env = config.policy_eval, config.sim.env()
    t0 = time.perf_counter()
    data, _ = collect_random_dataset(env, pe.dataset_size, rng_for(seed, "policy-eval/data"))
    actor = config.model.build(env.action_dim, env.cond_dim, rng_for(seed, "policy-eval/actor-init"))
    tc = TrainConfig(batch_size=pe.batch_size, total_steps=pe.actor_steps, lr=pe.lr, action_noise=pe.action_noise)
    off_policy_train(actor, data, tc, rng_for(seed, "policy-eval/actor"))
    critic = config.critic.build(env.cond_dim, env.action_dim, rng_for(seed, "policy-eval/critic-init"))
    off_policy_train_critic(critic, data, config.critic.steps, config.critic.batch_size,
                            rng_for(seed, "policy-eval/critic"))
    spec = config.inference_time
    make = {
        "actor": lambda: gs.ActorPolicy(actor, env.n_proposals, env.config),
        "cem": lambda: gs.CemPolicy(critic, spec.population, spec.elite_fraction, spec.iterations, env.config),
        "actor+critic": lambda: gs.ActorCriticPolicy(actor, critic, env.n_proposals, env.config),
    }
    rows, logs = [], []
    for name in pe.policies:
        policy = make[name]()
        rng = np.random.default_rng(derive_seed(seed, "policy-eval/episodes"))
        wins, steps = 0, 0
        for i in range(pe.eval_episodes):
            ep_seed = int(rng.integers(2**63 - 1))
            scene = env.reset(np.random.default_rng(ep_seed))
            ep = gs.run_episode(policy, scene, env.config, "evaluate", seed=ep_seed)
            ep.episode_id = i
            wins += ep.success
            steps += len(ep.poses)
            if pe.log_episodes:
                logs.append(json.dumps({"config_hash": config_hash(config), "seed": seed, "policy": name,
                                        **json.loads(ep.to_json())}, sort_keys=True))
        rows.append({"seed": seed, "policy": name, "episodes": pe.eval_episodes,
                     "success_rate": wins / pe.eval_episodes, "mean_steps": steps / pe.eval_episodes})
    return rows, logs, time.perf_counter() - t0


def run_policy_eval(config, out, threads=1):
    chash = config_hash(config)
    parts = _map(_policy_eval_seed, [(config, s) for s in config.seeds], threads)
    rows = [r for p in parts for r in p[0]]
    write_csv(out / "policy_eval.csv", ["seed", "policy", "episodes", "success_rate", "mean_steps"], rows, chash)
    if config.policy_eval.log_episodes:
        (out / "episodes.jsonl").write_text("".join(line + "\n" for p in parts for line in p[1]))
    table = []
    for name in config.policy_eval.policies:
        vals = [r["success_rate"] for r in rows if r["policy"] == name]
        table.append({"policy": name, "mean_success_rate": float(np.mean(vals)),
                      "std_success_rate": float(np.std(vals)), "seeds": len(vals)})
    write_csv(out / "policy_eval_table.csv", ["policy", "mean_success_rate", "std_success_rate", "seeds"],
              table, chash)
    timings = [{"seed": s, "seconds": p[2]} for s, p in zip(config.seeds, parts)]
    return {"table": table}, timings


# -- entry point -------------------------------------------------------------------------
RUNNERS = {
    "scaling": run_scaling, "five-point": run_five_point, "off-policy": run_off_policy,
    "on-policy": run_on_policy, "inference-time": run_inference_time, "policy-eval": run_policy_eval,
}


def code_version():
    """Package version, plus the git commit when running from a checkout."""
    try:
        ver = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        ver = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            ver += f"+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return ver


def run_experiment(config, out=None, threads=1, resume=False):
    """Run ``config`` and write its artifacts; returns ``(run_dir, summary)``.

    ``record.json`` adds the code version and wall-clock to the summary.
    """
    run_dir = resolve_output_dir(config, out) / config.experiment
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.json")
    t0 = time.perf_counter()
    runner = RUNNERS[config.experiment]
    if config.experiment == "on-policy":
        summary, timings = runner(config, run_dir, threads, resume=resume)
    else:
        summary, timings = runner(config, run_dir, threads)
    summary = {"experiment": config.experiment, "config_hash": config_hash(config), "seeds": config.seeds,
               **summary}
    _write_json(run_dir / "summary.json", summary)
    fields = sorted({k for t in timings for k in t})
    timings.append({"total_seconds": time.perf_counter() - t0})
    write_csv(run_dir / "timings.csv", fields + ["total_seconds"], timings, config_hash(config))
    _write_json(run_dir / "record.json", {"config_hash": config_hash(config), "code_version": code_version(),
                                          "config": config_to_dict(config), "summary": summary,
                                          "wall_clock_seconds": time.perf_counter() - t0})
    return run_dir, summary
