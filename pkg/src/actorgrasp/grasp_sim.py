"""Planar top-down grasping simulator and evaluation policies.

Lengths are in workspace units: the workspace is the unit square and one
unit stands for 30 cm. The gripper pose is ``(x, y, z, theta)``; actions
are ``(dx, dy, dz, sin dtheta, cos dtheta)``. At the end of an episode the
gripper is scripted down to the table and closed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cem import CemConfig, cem_optimize, critic_predict
from .training import Episode, wrap_angle

UNIT_CM = 30.0
TABLE_Z = 0.0
Z_MAX = 0.5
START_Z = 0.3
CLASSES = ("block", "bottle")
# half-widths calibrated so a uniformly random grasp succeeds ~9% (blocks) / ~6% (bottles)
HALF_WIDTH = {"block": 0.31, "bottle": 0.098}
ANGLE_TOL = {"block": math.radians(15.0), "bottle": math.radians(90.0)}
Z_TOL = 0.02
PLACEMENT_MARGIN = 0.2
ACTION_DIM = 5


@dataclass
class SceneObject:
    x: float
    y: float
    phi: float
    half_width: float
    kind: str


@dataclass
class PlanarScene:
    objects: list
    gripper: np.ndarray
    kind: str
    max_objects: int = 2

    def copy(self):
        return PlanarScene(list(self.objects), self.gripper.copy(), self.kind, self.max_objects)

    def spec(self):
        return {
            "kind": self.kind,
            "max_objects": self.max_objects,
            "gripper": self.gripper.tolist(),
            "objects": [[o.x, o.y, o.phi, o.half_width, o.kind] for o in self.objects],
        }

    @classmethod
    def from_spec(cls, spec):
        objs = [SceneObject(float(x), float(y), float(p), float(h), k) for x, y, p, h, k in spec["objects"]]
        return cls(objs, np.asarray(spec["gripper"], dtype=np.float64), spec["kind"], spec["max_objects"])


@dataclass
class GraspAction:
    dx: float
    dy: float
    dz: float
    sin: float
    cos: float

    def __post_init__(self):
        n = math.hypot(self.sin, self.cos)
        if n == 0.0:
            self.sin, self.cos = 0.0, 1.0
        else:
            self.sin, self.cos = self.sin / n, self.cos / n

    @property
    def theta(self):
        return decode_azimuth(self.sin, self.cos)

    @classmethod
    def from_theta(cls, dx, dy, dz, theta):
        return cls(dx, dy, dz, math.sin(theta), math.cos(theta))

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        return cls(float(v[0]), float(v[1]), float(v[2]), float(v[3]), float(v[4]))

    def to_vector(self):
        return np.array([self.dx, self.dy, self.dz, self.sin, self.cos])

    def translation_norm(self):
        return math.sqrt(self.dx**2 + self.dy**2 + self.dz**2)


def encode_azimuth(theta):
    theta = np.asarray(theta, dtype=np.float64)
    return np.stack([np.sin(theta), np.cos(theta)], axis=-1)


def decode_azimuth(s, c):
    """Angle in (-pi, pi] from its sine-cosine encoding."""
    return float(wrap_angle(math.atan2(s, c)))


@dataclass
class EpisodeConfig:
    max_steps: int = 10
    collect_min_steps: int = 3
    collect_max_steps: int = 10
    converge_translation: float = 0.5 / UNIT_CM  # 5 mm
    converge_rotation: float = math.radians(2.0)
    critic_ratio: float = 0.95

    def __post_init__(self):
        if self.converge_translation <= 0 or self.converge_rotation <= 0 or self.critic_ratio <= 0:
            raise ValueError("episode thresholds must be positive")
        if not 1 <= self.collect_min_steps <= self.collect_max_steps:
            raise ValueError("collect step range is empty")


# -- scene -------------------------------------------------------------------
def cond_dim(max_objects=2):
    return 4 * max_objects + len(CLASSES) + 1


def condition_vector(scene: PlanarScene):
    """Object poses relative to the gripper, class one-hot, gripper height.

    Per object slot: ``(dx, dy, sin(phi - theta), cos(phi - theta))``;
    unused slots are zero.
    """
    gx, gy, gz, gth = scene.gripper
    out = np.zeros(cond_dim(scene.max_objects))
    for i, o in enumerate(scene.objects[: scene.max_objects]):
        rel = o.phi - gth
        out[4 * i : 4 * i + 4] = (o.x - gx, o.y - gy, math.sin(rel), math.cos(rel))
    base = 4 * scene.max_objects
    out[base + CLASSES.index(scene.kind)] = 1.0
    out[base + len(CLASSES)] = gz - TABLE_Z
    return out


def scene_reset(n_objects, kind, rng, max_objects=None, max_tries=1000):
    """Place ``n_objects`` non-overlapping objects and a randomly posed gripper."""
    if kind not in CLASSES:
        raise ValueError(f"unknown object class {kind!r}")
    max_objects = n_objects if max_objects is None else max_objects
    if n_objects > max_objects:
        raise ValueError("more objects than condition slots")
    h = HALF_WIDTH[kind]
    for _ in range(max_tries):
        objs = []
        for _ in range(n_objects):
            x, y = rng.uniform(PLACEMENT_MARGIN, 1 - PLACEMENT_MARGIN, size=2)
            if not all(math.hypot(x - o.x, y - o.y) > h + o.half_width for o in objs):
                break
            objs.append(SceneObject(float(x), float(y), float(rng.uniform(0, math.pi)), h, kind))
        if len(objs) == n_objects:
            break
    else:
        raise RuntimeError(f"could not place {n_objects} {kind} objects after {max_tries} tries")
    gx, gy = rng.uniform(0, 1, size=2)
    gripper = np.array([gx, gy, START_Z, float(wrap_angle(rng.uniform(-math.pi, math.pi)))])
    scene = PlanarScene(objs, gripper, kind, max_objects)
    return scene, condition_vector(scene)


def env_step(scene: PlanarScene, action: GraspAction):
    out = scene.copy()
    x, y, z, th = scene.gripper
    out.gripper = np.array([
        min(max(x + action.dx, 0.0), 1.0),
        min(max(y + action.dy, 0.0), 1.0),
        min(max(z + action.dz, TABLE_Z), Z_MAX),
        float(wrap_angle(th + action.theta)),
    ])
    return out


def angle_misalignment(theta, phi):
    """Smallest rotation aligning a two-finger gripper at ``theta`` with ``phi`` (period pi)."""
    d = abs(float(wrap_angle(theta - phi)))
    return min(d, math.pi - d)


def grasp_success(scene: PlanarScene):
    gx, gy, gz, gth = scene.gripper
    if abs(gz - TABLE_Z) > Z_TOL:
        return 0
    for o in scene.objects:
        if math.hypot(gx - o.x, gy - o.y) <= o.half_width and angle_misalignment(gth, o.phi) <= ANGLE_TOL[o.kind]:
            return 1
    return 0


def feasible_mask(scene, actions):
    """Actions whose resulting gripper position stays inside the workspace."""
    actions = np.atleast_2d(actions)
    x, y = scene.gripper[0], scene.gripper[1]
    nx, ny = x + actions[:, 0], y + actions[:, 1]
    return (nx >= 0) & (nx <= 1) & (ny >= 0) & (ny <= 1)


def action_bounds(scene):
    """Per-dimension ``(low, high)`` of ``(dx, dy, dz, dtheta)`` keeping the pose in the workspace."""
    x, y, z, _ = scene.gripper
    low = np.array([-x, -y, TABLE_Z - z, -math.pi])
    high = np.array([1 - x, 1 - y, Z_MAX - z, math.pi])
    return low, high


# -- policies ----------------------------------------------------------------
@dataclass
class Decision:
    action: GraspAction
    terminate: bool = False


class RandomPolicy:
    """Uniform over the feasible action box of the current pose."""

    name = "random"

    def __init__(self):
        self.forward_batches = 0
        self.scored_samples = 0

    def act(self, scene, cond, rng):
        low, high = action_bounds(scene)
        a = rng.uniform(low, high)
        return Decision(GraspAction.from_theta(a[0], a[1], a[2], a[3]))


def random_policy(scene, rng):
    return RandomPolicy().act(scene, None, rng).action


def _actor_converged(action: GraspAction, config: EpisodeConfig):
    return (action.translation_norm() <= config.converge_translation
            and abs(action.theta) <= config.converge_rotation)


class ActorPolicy:
    """Sample ``n`` actions, keep feasible ones, execute the most probable."""

    name = "actor"

    def __init__(self, model, n=64, config=None):
        self.model = model
        self.n = n
        self.config = config or EpisodeConfig()
        self.forward_batches = 0
        self.scored_samples = 0

    def propose(self, scene, cond, rng):
        actions, log_probs = self.model.sample_n(cond, self.n, rng)
        self.forward_batches += 1
        self.scored_samples += self.n
        return actions, log_probs

    def act(self, scene, cond, rng):
        actions, log_probs = self.propose(scene, cond, rng)
        feas = feasible_mask(scene, actions)
        if feas.any():
            i = int(np.argmax(np.where(feas, log_probs, -np.inf)))
            a = actions[i]
        else:
            a = actions[int(np.argmax(log_probs))].copy()
            low, high = action_bounds(scene)
            a[:2] = np.clip(a[:2], low[:2], high[:2])
        action = GraspAction.from_vector(a)
        return Decision(action, _actor_converged(action, self.config))


def actor_policy(model, cond, n, rng, scene=None):
    pol = ActorPolicy(model, n)
    scene = scene or _dummy_scene()
    return pol.act(scene, cond, rng).action


def _dummy_scene():
    return PlanarScene([], np.array([0.5, 0.5, START_Z, 0.0]), "block")


class SamplingPolicy:
    """One model sample per step, clipped to the workspace (on-policy collection)."""

    name = "sampling"

    def __init__(self, model):
        self.model = model
        self.forward_batches = 0
        self.scored_samples = 0

    def act(self, scene, cond, rng):
        a, _ = self.model.sample_n(cond, 1, rng)
        a = a[0]
        self.forward_batches += 1
        self.scored_samples += 1
        low, high = action_bounds(scene)
        a[:3] = np.clip(a[:3], low[:3], high[:3])
        return Decision(GraspAction.from_vector(a))


def cem_config_for(scene, population=64, elite_fraction=0.1, iterations=3):
    """Initial CEM Gaussian covering the workspace from the current gripper pose.

    Standard deviations mirror 15 cm horizontal, 6 cm vertical and 90 degrees
    of rotation.
    """
    x, y, z, _ = scene.gripper
    low, high = action_bounds(scene)
    return CemConfig(
        population=population, elite_fraction=elite_fraction, iterations=iterations,
        init_mean=[0.5 - x, 0.5 - y, 0.0, 0.0],
        init_std=[15.0 / UNIT_CM, 15.0 / UNIT_CM, 6.0 / UNIT_CM, math.pi / 2],
        std_floor=1e-3, lower=low.tolist(), upper=high.tolist(), clip=True,
    )


def _encode_cem(pop):
    return np.concatenate([pop[:, :3], encode_azimuth(pop[:, 3])], axis=1)


class CemPolicy:
    """CEM over ``(dx, dy, dz, dtheta)`` scored by the critic."""

    name = "cem"

    def __init__(self, critic, population=64, elite_fraction=0.1, iterations=3, config=None):
        self.critic = critic
        self.population = population
        self.elite_fraction = elite_fraction
        self.iterations = iterations
        self.config = config or EpisodeConfig()
        self.forward_batches = 0
        self.scored_samples = 0

    def act(self, scene, cond, rng):
        # the terminate probe (zero action) rides along with the last batch
        probe = np.array([[0.0, 0.0, 0.0, 0.0, 1.0]])
        calls, zero = [0], [0.0]

        def score(pop):
            calls[0] += 1
            self.forward_batches += 1
            self.scored_samples += len(pop)
            enc = _encode_cem(pop)
            if calls[0] < self.iterations:
                return critic_predict(self.critic, cond, enc)
            values = critic_predict(self.critic, cond, np.concatenate([enc, probe]))
            zero[0] = values[-1]
            return values[:-1]

        cfg = cem_config_for(scene, self.population, self.elite_fraction, self.iterations)
        best, trace = cem_optimize(score, cfg, rng, dim=4)
        terminate = zero[0] > self.config.critic_ratio * trace[-1].best_score
        return Decision(GraspAction.from_theta(*best), terminate)


def cem_policy(critic, cond, rng, scene=None, population=64, elite_fraction=0.1, iterations=3):
    return CemPolicy(critic, population, elite_fraction, iterations).act(scene or _dummy_scene(), cond, rng).action


class ActorCriticPolicy:
    """Actor proposes, critic ranks; ties go to higher actor density, then lower index."""

    name = "actor+critic"

    def __init__(self, actor, critic, n=64, config=None):
        self.actor = actor
        self.critic = critic
        self.n = n
        self.config = config or EpisodeConfig()
        self.forward_batches = 0
        self.scored_samples = 0

    def act(self, scene, cond, rng):
        actions, log_probs = self.actor.sample_n(cond, self.n, rng)
        values = critic_predict(self.critic, cond, np.concatenate([actions, [[0.0, 0.0, 0.0, 0.0, 1.0]]]))
        values, zero = values[:-1], values[-1]
        self.forward_batches += 2
        self.scored_samples += self.n
        feas = feasible_mask(scene, actions)
        if not feas.any():
            feas = np.ones(len(actions), dtype=bool)
        idx = np.flatnonzero(feas)
        # lexsort: last key is primary
        order = np.lexsort((idx, -log_probs[idx], -values[idx]))
        i = idx[order[0]]
        a = actions[i].copy()
        low, high = action_bounds(scene)
        a[:2] = np.clip(a[:2], low[:2], high[:2])
        terminate = zero > self.config.critic_ratio * values[i]
        return Decision(GraspAction.from_vector(a), terminate)


def actor_critic_policy(actor, critic, cond, n, rng, scene=None):
    return ActorCriticPolicy(actor, critic, n).act(scene or _dummy_scene(), cond, rng).action


# -- episodes ----------------------------------------------------------------
def run_episode(policy, scene, config=None, mode="collect", rng=None, seed=None):
    """Roll out one grasp trial and label it.

    ``collect`` executes a random number of steps in the configured range;
    ``evaluate`` stops when the policy reports convergence (the gripper then
    closes without executing that action) or after ``max_steps``.
    """
    config = config or EpisodeConfig()
    if mode not in ("collect", "evaluate"):
        raise ValueError(f"unknown episode mode {mode!r}")
    if rng is None:
        rng = np.random.default_rng(seed)
    start_spec = scene.spec()
    poses, conds, actions = [], [], []
    terminated_by = "length"
    if mode == "collect":
        n_steps = int(rng.integers(config.collect_min_steps, config.collect_max_steps + 1))
    else:
        n_steps = config.max_steps
    for _ in range(n_steps):
        cond = condition_vector(scene)
        decision = policy.act(scene, cond, rng)
        poses.append(scene.gripper.copy())
        conds.append(cond)
        if mode == "evaluate" and decision.terminate:
            terminated_by = "converged"
            actions.append(np.zeros(ACTION_DIM) + np.array([0, 0, 0, 0, 1.0]))
            break
        actions.append(decision.action.to_vector())
        scene = env_step(scene, decision.action)
    final = scene.gripper.copy()
    final[2] = TABLE_Z  # scripted descent before closing
    closed = scene.copy()
    closed.gripper = final
    return Episode(
        conditions=np.array(conds), poses=np.array(poses), final_pose=final,
        success=grasp_success(closed), actions=np.array(actions), seed=seed,
        scene=start_spec, mode=mode, terminated_by=terminated_by,
    )


def replay_episode(record: Episode, policy, config=None):
    """Re-simulate a logged episode from its seed and starting scene."""
    if record.seed is None:
        raise ValueError("episode record carries no seed")
    scene = PlanarScene.from_spec(record.scene)
    return run_episode(policy, scene, config, record.mode, seed=record.seed)


class GraspEnv:
    """Episode factory used by the training loops."""

    action_dim = ACTION_DIM

    def __init__(self, kind="block", n_objects=2, config=None, eval_seed=12345, n_proposals=64):
        self.kind = kind
        self.n_objects = n_objects
        self.config = config or EpisodeConfig()
        self.eval_seed = eval_seed
        self.n_proposals = n_proposals
        self.cond_dim = cond_dim(n_objects)

    def reset(self, rng):
        return scene_reset(self.n_objects, self.kind, rng)[0]

    def collect(self, kind, model, rng):
        if kind == "random":
            policy = RandomPolicy()
        elif kind == "actor":
            policy = SamplingPolicy(model)
        else:
            raise ValueError(f"unknown collection policy {kind!r}")
        return run_episode(policy, self.reset(rng), self.config, "collect", rng)

    def evaluate_policy(self, policy, n_episodes, seed=None):
        """Mean success over ``n_episodes`` evaluate-mode episodes with a fixed scene stream."""
        rng = np.random.default_rng(self.eval_seed if seed is None else seed)
        wins = 0
        for _ in range(n_episodes):
            ep = run_episode(policy, self.reset(rng), self.config, "evaluate", rng)
            wins += ep.success
        return wins / n_episodes

    def evaluate(self, model, n_episodes, rng=None):
        return self.evaluate_policy(ActorPolicy(model, self.n_proposals, self.config), n_episodes)


def measure_inference_time(policy, n_decisions, kind="block", seed=0):
    """Wall-clock per decision and exact model-forward batch counts."""
    rng = np.random.default_rng(seed)
    scenes = [scene_reset(2, kind, rng) for _ in range(n_decisions)]
    b0, s0 = policy.forward_batches, policy.scored_samples
    t0 = time.perf_counter()
    with ad.no_grad():
        for scene, cond in scenes:
            policy.act(scene, cond, rng)
    wall = time.perf_counter() - t0
    return {
        "policy": policy.name,
        "decisions": n_decisions,
        "mean_seconds": wall / n_decisions,
        "forward_batches_per_decision": (policy.forward_batches - b0) / n_decisions,
        "scored_samples_per_decision": (policy.scored_samples - s0) / n_decisions,
    }
