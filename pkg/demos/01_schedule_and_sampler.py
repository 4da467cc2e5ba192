"""Noise schedule and the deterministic residual sampler.

Run: python demos/01_schedule_and_sampler.py
"""
import numpy as np

from docdiff.inference import enhance
from docdiff.schedule import linear_schedule, make_step_plan, q_sample, reverse_step

s = linear_schedule()  # T=100, beta 1e-4 -> 0.02
print("alpha_bar at t = 0, 1, 50, 100:", s.alpha_bar[[0, 1, 50, 100]])

# %% step plans: K hops from T down to 0
for K in (1, 5, 20):
    print(K, "steps:", make_step_plan(100, K).timesteps)

# %% if the x0 estimate is perfect, the reverse hops land exactly on it
rng = np.random.default_rng(0)
x0 = rng.random((1, 1, 8, 8)).astype(np.float32)
x = q_sample(x0, np.array([100]), rng.standard_normal(x0.shape).astype(np.float32), s)
for t_from, t_to in make_step_plan(100, 5).transitions():
    x = reverse_step(x, x0, t_from, t_to, s)
    print(f"hop {t_from:3d} -> {t_to:3d}   max |x - x0| = {np.abs(x - x0).max():.2e}")


# %% the same thing through the full pipeline, with a stand-in model
class Oracle:
    schedule = s

    def __init__(self, coarse, residual):
        self.c, self.r = coarse, residual

    def coarse(self, y):
        return self.c

    def denoise(self, x_t, t, cond):
        return self.r


coarse = (0.3 + 0.4 * rng.random((1, 1, 32, 32))).astype(np.float32)
residual = (0.2 * rng.standard_normal((1, 1, 32, 32))).astype(np.float32)
out = enhance(Oracle(coarse, residual), np.zeros_like(coarse), steps=5)
print("enhance == clip(coarse + residual):",
      np.abs(out - np.clip(coarse + residual, 0, 1)).max())
