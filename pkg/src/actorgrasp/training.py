"""Actor losses, replay buffer, episode relabeling and training loops."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cem import critic_train_step


@dataclass
class Transition:
    condition: np.ndarray
    action: np.ndarray
    success: int
    episode_id: int = 0
    step: int = 0


@dataclass
class Episode:
    """A recorded grasp trial.

    ``poses[t]`` is the gripper pose ``(x, y, z, theta)`` before step ``t``
    and ``conditions[t]`` the observation taken there; ``final_pose`` is
    where the gripper closed.
    """

    conditions: np.ndarray
    poses: np.ndarray
    final_pose: np.ndarray
    success: int
    episode_id: int = 0
    actions: np.ndarray | None = None
    seed: int | None = None
    scene: dict | None = None
    mode: str = "collect"
    terminated_by: str = "length"

    def to_json(self):
        return json.dumps({
            "episode_id": self.episode_id,
            "seed": self.seed,
            "mode": self.mode,
            "scene": self.scene,
            "poses": np.asarray(self.poses).tolist(),
            "conditions": np.asarray(self.conditions).tolist(),
            "actions": None if self.actions is None else np.asarray(self.actions).tolist(),
            "final_pose": np.asarray(self.final_pose).tolist(),
            "success": int(self.success),
            "terminated_by": self.terminated_by,
        })

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(
            conditions=np.asarray(d["conditions"], dtype=np.float64),
            poses=np.asarray(d["poses"], dtype=np.float64),
            final_pose=np.asarray(d["final_pose"], dtype=np.float64),
            success=int(d["success"]),
            episode_id=d["episode_id"],
            actions=None if d["actions"] is None else np.asarray(d["actions"], dtype=np.float64),
            seed=d["seed"],
            scene=d["scene"],
            mode=d["mode"],
            terminated_by=d["terminated_by"],
        )


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.mod(theta + np.pi, 2 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)


def pose_delta_action(final_pose, pose):
    """Encoded action ``(dx, dy, dz, sin dtheta, cos dtheta)`` taking ``pose`` to ``final_pose``."""
    final_pose = np.asarray(final_pose, dtype=np.float64)
    pose = np.asarray(pose, dtype=np.float64)
    d = final_pose - pose
    dtheta = wrap_angle(d[..., 3])
    return np.concatenate([d[..., :3], np.sin(dtheta)[..., None], np.cos(dtheta)[..., None]], axis=-1)


def relabel_episode(episode: Episode):
    n = len(episode.poses)
    if n < 1:
        raise ValueError("episode has no steps")
    actions = pose_delta_action(episode.final_pose, episode.poses)
    return [
        Transition(np.asarray(episode.conditions[t], dtype=np.float64), actions[t],
                   int(episode.success), episode.episode_id, t)
        for t in range(n)
    ]


@dataclass
class Batch:
    condition: np.ndarray
    action: np.ndarray
    success: np.ndarray

    def __len__(self):
        return len(self.success)


class ReplayBuffer:
    """Bounded FIFO ring of transitions with a success-only view."""

    def __init__(self, capacity, cond_dim, action_dim):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.cond = np.zeros((capacity, cond_dim))
        self.action = np.zeros((capacity, action_dim))
        self.success = np.zeros(capacity, dtype=np.int8)
        self.episode = np.zeros(capacity, dtype=np.int64)
        self.step = np.zeros(capacity, dtype=np.int64)
        self.start = 0
        self.size = 0

    def __len__(self):
        return self.size

    @property
    def n_success(self):
        return int(self.success[self._order()].sum())

    def _order(self):
        return (self.start + np.arange(self.size)) % self.capacity

    def add(self, tr: Transition):
        if self.size < self.capacity:
            i = (self.start + self.size) % self.capacity
            self.size += 1
        else:
            i = self.start
            self.start = (self.start + 1) % self.capacity
        self.cond[i] = tr.condition
        self.action[i] = tr.action
        self.success[i] = tr.success
        self.episode[i] = tr.episode_id
        self.step[i] = tr.step

    def extend(self, transitions):
        for tr in transitions:
            self.add(tr)

    def view(self, success_only=False):
        idx = self._order()
        if success_only:
            idx = idx[self.success[idx] == 1]
        return idx

    def items(self, success_only=False):
        idx = self.view(success_only)
        return Batch(self.cond[idx].copy(), self.action[idx].copy(), self.success[idx].astype(np.float64))

    def sample(self, n, rng, success_only=False):
        idx = self.view(success_only)
        if n > len(idx):
            raise ValueError(f"buffer holds {len(idx)} eligible transitions, {n} requested")
        pick = idx[rng.choice(len(idx), size=n, replace=False)]
        return Batch(self.cond[pick], self.action[pick], self.success[pick].astype(np.float64))

    def state_dict(self):
        idx = self._order()
        return {"capacity": self.capacity, "cond": self.cond[idx], "action": self.action[idx],
                "success": self.success[idx], "episode": self.episode[idx], "step": self.step[idx]}

    @classmethod
    def from_state(cls, state):
        cond, action = np.asarray(state["cond"]), np.asarray(state["action"])
        buf = cls(int(state["capacity"]), cond.shape[1], action.shape[1])
        n = len(cond)
        buf.cond[:n], buf.action[:n] = cond, action
        buf.success[:n], buf.episode[:n], buf.step[:n] = state["success"], state["episode"], state["step"]
        buf.size = n
        return buf


def buffer_add(buffer, transition):
    buffer.add(transition)
    return buffer


def buffer_sample(buffer, n, rng, success_only=False):
    return buffer.sample(n, rng, success_only)


# -- losses ----------------------------------------------------------------
def nll_loss(model, cond, actions, success=None):
    """Mean negative log density of successful actions."""
    if success is not None and np.any(np.asarray(success) != 1):
        raise ValueError("nll_loss: batch contains failed transitions; actor losses use successes only")
    return ad.neg(model.log_prob(cond, actions).mean())


def entropy_regularized_loss(model, cond, actions, rewards, alpha, n_entropy_samples, rng,
                             normalize="reward"):
    """Reward-weighted NLL plus ``alpha`` times a Monte-Carlo E_{a~pi}[log pi].

    With ``normalize="reward"`` the NLL term is divided by the total reward,
    so at ``alpha == 0`` it coincides with :func:`nll_loss` on the successful
    rows. ``normalize="batch"`` divides by the batch size instead; with
    on-policy batches its stationary point is pi proportional to exp(r / alpha).
    Returns ``(loss, entropy_estimate)``; the estimate is ``None`` when alpha is 0.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if normalize not in ("reward", "batch"):
        raise ValueError(f"normalize must be 'reward' or 'batch', got {normalize!r}")
    rewards = np.asarray(rewards, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    total = rewards.sum() if normalize == "reward" else float(len(rewards))
    keep = rewards != 0
    if keep.any() and total > 0:
        lp = model.log_prob(cond[keep], actions[keep])
        loss = ad.affine(ad.mul(lp, rewards[keep]).sum(), -1.0 / total, 0.0)
    else:
        loss = ad.Tensor(0.0)
    ent = None
    if alpha > 0:
        e = model.entropy_term(cond, n_entropy_samples, rng)
        loss = ad.add(loss, ad.affine(e, alpha, 0.0))
        ent = e.item()
    return loss, ent


# -- training loops ----------------------------------------------------------
@dataclass
class TrainConfig:
    batch_size: int = 128
    alpha: float = 0.0
    n_entropy_samples: int = 4
    total_steps: int = 2000
    eval_interval: int = 500
    eval_episodes: int = 200
    lr: float = 1e-3
    warmup_success: int = 2000
    capacity: int = 200_000
    env_step_budget: int = 60_000
    episodes_per_round: int = 20
    train_steps_per_round: int = 20
    action_noise: list | None = None  # per-dimension std added to actor training actions

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        for name in ("batch_size", "n_entropy_samples", "eval_interval", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


CURVE_FIELDS = ("step", "env_steps", "eval_success_rate", "loss", "entropy_estimate")


def curve_to_csv(curve, header=None):
    out = io.StringIO()
    if header:
        out.write(f"# {header}\n")
    w = csv.DictWriter(out, fieldnames=CURVE_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in curve:
        w.writerow({k: _fmt(row.get(k)) for k in CURVE_FIELDS})
    return out.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def jitter(actions, noise, rng):
    """Add zero-mean Gaussian noise with per-dimension std ``noise`` (no-op for ``None``)."""
    if noise is None:
        return actions
    return actions + rng.standard_normal(actions.shape) * np.asarray(noise, dtype=np.float64)


def off_policy_train(model, dataset, config: TrainConfig, rng, evaluate=None, env_steps=None):
    """Fit ``model`` by NLL on the successful part of ``dataset``.

    ``dataset`` is a :class:`ReplayBuffer` or a :class:`Batch`. ``evaluate``
    is an optional ``callable(model) -> success rate`` run every
    ``eval_interval`` steps and at the end.
    """
    data = dataset.items(success_only=True) if isinstance(dataset, ReplayBuffer) else dataset
    keep = np.asarray(data.success) == 1
    cond, actions = data.condition[keep], data.action[keep]
    n = len(cond)
    if n == 0:
        raise ValueError("off_policy_train: dataset has no successful transitions")
    opt = ad.Adam(model.parameters(), lr=config.lr)
    curve = []
    loss_val = None
    for step in range(1, config.total_steps + 1):
        pick = rng.choice(n, size=min(config.batch_size, n), replace=False)
        opt.zero_grad()
        loss = nll_loss(model, cond[pick], jitter(actions[pick], config.action_noise, rng))
        loss.backward()
        opt.step()
        loss_val = loss.item()
        if evaluate is not None and (step % config.eval_interval == 0 or step == config.total_steps):
            curve.append({"step": step, "env_steps": env_steps, "eval_success_rate": float(evaluate(model)),
                          "loss": loss_val, "entropy_estimate": None})
    if evaluate is None:
        curve.append({"step": config.total_steps, "env_steps": env_steps, "eval_success_rate": None,
                      "loss": loss_val, "entropy_estimate": None})
    return curve


@dataclass
class OnPolicyState:
    """Everything needed to continue an on-policy run bit-for-bit."""

    buffer: ReplayBuffer
    optimizer: ad.Adam
    rng: np.random.Generator
    env_steps: int = 0
    train_steps: int = 0
    episodes: int = 0
    next_eval: int = 0
    curve: list = field(default_factory=list)
    warm: bool = False
    last_loss: float | None = None
    last_entropy: float | None = None

    def save(self, path, model):
        arrays = {f"param::{k}": v.data for k, v in model.named_parameters().items()}
        opt = self.optimizer.state_dict()
        for i, (m, v) in enumerate(zip(opt["m"], opt["v"])):
            arrays[f"adam_m::{i}"] = m
            arrays[f"adam_v::{i}"] = v
        for k, v in self.buffer.state_dict().items():
            if k != "capacity":
                arrays[f"buffer::{k}"] = v
        meta = {
            "capacity": self.buffer.capacity, "adam": {k: opt[k] for k in ("t", "lr", "beta1", "beta2", "eps")},
            "rng": self.rng.bit_generator.state, "env_steps": self.env_steps, "train_steps": self.train_steps,
            "episodes": self.episodes, "next_eval": self.next_eval, "curve": self.curve, "warm": self.warm,
            "last_loss": self.last_loss, "last_entropy": self.last_entropy,
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, model):
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            named = model.named_parameters()
            for k, t in named.items():
                t.data = z[f"param::{k}"].copy()
            n_params = len(named)
            opt = ad.Adam(model.parameters())
            opt.load_state_dict({**meta["adam"], "m": [z[f"adam_m::{i}"] for i in range(n_params)],
                                 "v": [z[f"adam_v::{i}"] for i in range(n_params)]})
            buf = ReplayBuffer.from_state({"capacity": meta["capacity"],
                                           **{k: z[f"buffer::{k}"] for k in ("cond", "action", "success",
                                                                              "episode", "step")}})
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        return cls(buf, opt, rng, meta["env_steps"], meta["train_steps"], meta["episodes"],
                   meta["next_eval"], meta["curve"], meta["warm"], meta["last_loss"], meta["last_entropy"])


def on_policy_train(model, env, config: TrainConfig, warmup_success_count=None, rng=None,
                    behavior="actor", state=None, stop_after_env_steps=None):
    """Warm up with random actions, then alternate collection and training.

    ``env`` provides ``collect(policy_kind, model, rng) -> Episode``,
    ``evaluate(model, n_episodes, rng) -> success rate`` and the
    ``cond_dim``/``action_dim`` attributes. ``behavior`` is ``"actor"``
    (pure model sampling) or ``"random"``. Pass a saved ``state`` to resume;
    ``stop_after_env_steps`` pauses early so a run can be checkpointed.
    Returns the state; its ``curve`` holds the evaluation rows.
    """
    if behavior not in ("actor", "random"):
        raise ValueError(f"unknown behavior policy {behavior!r}")
    warmup = config.warmup_success if warmup_success_count is None else warmup_success_count
    if state is None:
        rng = np.random.default_rng(0) if rng is None else rng
        state = OnPolicyState(ReplayBuffer(config.capacity, env.cond_dim, env.action_dim),
                              ad.Adam(model.parameters(), lr=config.lr), rng)
    rng = state.rng
    budget = config.env_step_budget if stop_after_env_steps is None else min(
        config.env_step_budget, stop_after_env_steps)

    def add_episode(ep):
        state.buffer.extend(relabel_episode(ep))
        state.env_steps += len(ep.poses)
        state.episodes += 1

    while not state.warm and state.buffer.n_success < warmup and state.env_steps < budget:
        ep = env.collect("random", None, rng)
        ep.episode_id = state.episodes
        add_episode(ep)
    if not state.warm and state.buffer.n_success >= warmup:
        state.warm = True
        state.next_eval = state.env_steps

    def record():
        rate = env.evaluate(model, config.eval_episodes, rng)
        state.curve.append({"step": state.train_steps, "env_steps": state.env_steps,
                            "eval_success_rate": float(rate), "loss": state.last_loss,
                            "entropy_estimate": state.last_entropy})

    while state.warm and state.env_steps < budget:
        if state.env_steps >= state.next_eval:
            record()
            state.next_eval += config.eval_interval
        for _ in range(config.episodes_per_round):
            ep = env.collect(behavior, model, rng)
            ep.episode_id = state.episodes
            add_episode(ep)
        n_succ = state.buffer.n_success
        for _ in range(config.train_steps_per_round):
            if n_succ == 0:
                break
            batch = state.buffer.sample(min(config.batch_size, n_succ), rng, success_only=True)
            state.optimizer.zero_grad()
            loss, ent = entropy_regularized_loss(model, batch.condition,
                                                 jitter(batch.action, config.action_noise, rng), batch.success,
                                                 config.alpha, config.n_entropy_samples, rng)
            loss.backward()
            state.optimizer.step()
            state.train_steps += 1
            state.last_loss, state.last_entropy = loss.item(), ent
    if state.warm and state.env_steps >= config.env_step_budget and (
            not state.curve or state.curve[-1]["env_steps"] != state.env_steps):
        record()
    return state


def steps_to_threshold(curve, threshold):
    """First ``env_steps`` whose evaluation reaches ``threshold``; ``None`` if never."""
    for row in curve:
        if row["eval_success_rate"] is not None and row["eval_success_rate"] >= threshold:
            return row["env_steps"]
    return None


def off_policy_train_critic(critic, dataset, steps, batch_size, rng, evaluate=None, eval_interval=None,
                            env_steps=None):
    """Fit a critic by cross-entropy on every stored transition, successes and failures alike."""
    data = dataset.items() if isinstance(dataset, ReplayBuffer) else dataset
    n = len(data.condition)
    if n == 0:
        raise ValueError("off_policy_train_critic: empty dataset")
    eval_interval = eval_interval or steps
    curve = []
    loss_val = None
    for step in range(1, steps + 1):
        pick = rng.choice(n, size=min(batch_size, n), replace=False)
        loss_val = critic_train_step(critic, data.condition[pick], data.action[pick], data.success[pick])
        if evaluate is not None and (step % eval_interval == 0 or step == steps):
            curve.append({"step": step, "env_steps": env_steps, "eval_success_rate": float(evaluate(critic)),
                          "loss": loss_val, "entropy_estimate": None})
    if evaluate is None:
        curve.append({"step": steps, "env_steps": env_steps, "eval_success_rate": None,
                      "loss": loss_val, "entropy_estimate": None})
    return curve
