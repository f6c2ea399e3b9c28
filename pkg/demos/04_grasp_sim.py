"""
Grasping in the planar simulator
================================

Collect random grasps, relabel every step with the displacement to the final
pose, then train an actor (density over actions) and a critic (success
probability). Compare three policies: sample-and-pick actor, CEM on the
critic, and actor proposals ranked by the critic.

Run:  python demos/04_grasp_sim.py   (a few minutes)
"""

import numpy as np

from actorgrasp import grasp_sim as gs
from actorgrasp.cem import CriticModel
from actorgrasp.density import MofModel
from actorgrasp.experiments import GRASP_ACTION_NOISE, collect_random_dataset
from actorgrasp.training import TrainConfig, off_policy_train, off_policy_train_critic

rng = np.random.default_rng(0)
env = gs.GraspEnv("block")
data, episodes = collect_random_dataset(env, 8000, rng)
print(f"{episodes} random episodes, {len(data)} transitions, success rate {data.success.mean():.3f}")

actor = MofModel(env.action_dim, env.cond_dim, k=4, n_layers=4, hidden=32, feat_dim=16, encoder_hidden=32,
                 rng=rng)
off_policy_train(actor, data, TrainConfig(total_steps=3000, batch_size=128, lr=1e-3,
                                          action_noise=list(GRASP_ACTION_NOISE)), rng)
critic = CriticModel(env.cond_dim, env.action_dim, rng=rng)
off_policy_train_critic(critic, data, steps=1500, batch_size=256, rng=rng)

# %%
# Evaluation uses a fixed scene stream, so all three policies see the same scenes.
policies = [gs.ActorPolicy(actor, 64), gs.CemPolicy(critic), gs.ActorCriticPolicy(actor, critic, 64)]
for pol in policies:
    print(f"{pol.name:13s} success {env.evaluate_policy(pol, 100):.2f}")

# %%
# Cost per decision: CEM scores 3 x 64 proposals, the actor draws 64.
for pol in policies:
    stats = gs.measure_inference_time(pol, 50)
    print(f"{pol.name:13s} {stats['forward_batches_per_decision']:.0f} forward batches, "
          f"{stats['scored_samples_per_decision']:.0f} scored, {1e3 * stats['mean_seconds']:.2f} ms")
