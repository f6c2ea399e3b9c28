"""
Two small training pathologies
==============================

1. Two identical Gaussian components on two-cluster data receive identical
   gradients, so gradient descent never separates them. A mixture of flows
   started from the same latent mixture escapes.
2. Adding alpha * E[log pi] to a reward-weighted likelihood makes the
   on-policy solution proportional to exp(r / alpha).

Run:  python demos/03_saddle_and_entropy.py   (a few minutes)
"""

import math

from actorgrasp.toy import (
    entropy_fixed_point_run, saddle_gradient, saddle_loss, saddle_stall_run, two_cluster_grid,
)

grad, loss = saddle_gradient()
print("gradient at mu=0.5, sigma=0.5 (means, log-stds, logits):", grad.round(5))
x = two_cluster_grid()
grad_fit, _ = saddle_gradient(std=(x.std(), x.std()))
print(f"at the fitted std {x.std():.5f} the gradient norm is {abs(grad_fit).max():.1e}")
print(f"symmetric loss {saddle_loss():.4f}")

for seed in range(3):
    print(f"seed {seed}: GMM final NLL {saddle_stall_run('gmm', seed):.3f}, "
          f"MoF final NLL {saddle_stall_run('mof', seed):.3f}")

# %%
# Reward 1 on [0, 0.5], 0 on (0.5, 1]. The density ratio between the two
# halves should approach e^(1/alpha).
for alpha in (1.0, 0.5):
    ratio = entropy_fixed_point_run(alpha, steps=1500)
    print(f"alpha {alpha}: mass ratio {ratio:.2f}, target {math.exp(1 / alpha):.2f}")
