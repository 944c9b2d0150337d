"""The inner maximization in isolation: L2 projection and normalized ascent.

Projects points onto an epsilon-ball, then runs the ascent loop on a toy
objective whose constrained maximizer is known in closed form.
"""

import numpy as np

import promptshift as ps
from promptshift.perturb import PerturbationBatch

rng = np.random.default_rng(0)

# Projection: identity inside the ball, radial rescale outside.
for phi in (np.array([0.3, 0.2]), np.array([3.0, -4.0])):
    out = ps.project(phi[None, None, :], 1.0)[0, 0]
    print(f"phi={phi} |phi|={np.linalg.norm(phi):.2f} -> "
          f"proj={np.round(out, 4)} |proj|={np.linalg.norm(out):.4f}")

# Idempotence and direction preservation on random batches.
phi = rng.normal(0, 2, size=(4, 3, 5))
once = ps.project(phi, 0.8)
twice = ps.project(once, 0.8)
print("idempotent:", np.max(np.abs(once - twice)) < 1e-12)

# Ascent on f(delta) = -0.5 |delta - a|^2 with |a| outside the ball: the
# constrained maximizer is the boundary point eps * a / |a|.
a = np.array([2.4, -1.8]).reshape(1, 1, 2)
target = a / np.linalg.norm(a)  # eps = 1
batch = PerturbationBatch(delta=np.zeros((1, 1, 2)), epsilon=1.0,
                          step_size=0.2, steps=50)
out = ps.ascend(batch, lambda d: a - d)
print(f"ascended to {np.round(out.delta[0, 0], 5)}, "
      f"maximizer {np.round(target[0, 0], 5)}, "
      f"gap {np.linalg.norm(out.delta - target):.2e}")

# The ball invariant holds after every step (the monitor counts violations).
from promptshift.perturb import ball_monitor
ball_monitor.reset()
for _ in range(200):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)),
             int(rng.integers(1, 5)))
    eps = float(rng.uniform(0.05, 2.0))
    pb = ps.init_delta(shape, eps, rng, step_size=0.3,
                       steps=int(rng.integers(1, 5)))
    direction = rng.normal(size=shape)
    ps.ascend(pb, lambda d: direction + 0.05 * d)
print(f"fuzz: {ball_monitor.projections} projections, "
      f"{ball_monitor.violations} radius violations")
