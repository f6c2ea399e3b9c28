"""
How many CEM iterations does one success take?
==============================================

Ten targets in the unit cube, success means landing within r of one. CEM
searches with the smooth oracle exp(-d^2 / 2r^2); we count iterations until a
population member succeeds. A trained actor gets one batch of 100 samples.

Run:  python demos/02_cem_scaling.py   (about a minute)
"""

from actorgrasp.toy import actor_on_hypersphere, run_scaling_experiment, train_hypersphere_actor

results = run_scaling_experiment(dims=[1, 2, 3, 4, 5, 6], radii=[0.1, 0.03], repeats=20, master_seed=0)
print(" r     D  median  max  failures")
for res in results:
    s = res.summary()
    print(f"{res.radius:4.2f}  {res.dim:2d}  {s['median']:6.1f}  {s['max']:4.0f}  {s['failures']:3d}")

# %%
# The actor conditions on the 10 target coordinates and proposes actions
# in one shot. Failed CEM searches above count as 51 in the summary.
import numpy as np

rng = np.random.default_rng(0)
model = train_hypersphere_actor(2, 0.1, steps=600, rng=rng)
print("actor, D=2, r=0.1:", actor_on_hypersphere(model, 2, 0.1, n_tasks=100, rng=rng))
