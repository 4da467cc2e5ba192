"""Train both nets briefly on synthetic blur, then enhance and score.

Run: python demos/03_train_and_enhance.py [iterations]

A few hundred iterations take a couple of minutes on one core. The coarse
predictor improves first. The diffusion refiner needs far longer at this
scale, so expect the refined output to trail the coarse one early on.
"""
import sys
import time

import numpy as np

from docdiff.data import make_pair
from docdiff.freqsep import highpass
from docdiff.inference import enhance, make_tile_plan
from docdiff.metrics import binarize, f_measure, psnr, ssim
from docdiff.trainer import TrainConfig, new_training_state, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 200

train_pairs = [make_pair("blur", 0, i, 32)[:2] for i in range(200)]
test_pairs = [make_pair("blur", 1, i, 32)[:2] for i in range(16)]

state = new_training_state(TrainConfig(iters=iters))
cp, den = state.bundle.parameter_counts()
print(f"coarse predictor {cp} params, denoiser {den} params")

start = time.time()


def report(i, terms):
    if i % 50 == 0:
        print(f"iter {i:5d}  total {terms['total']:.4f}  pixel {terms['pixel']:.4f}  "
              f"dm {terms['dm']:.4f}  ({time.time() - start:.0f}s)")


train(state, train_pairs, callback=report)
model = state.bundle

# %% score degraded input, coarse output and the full pipeline
rows = []
for y, gt in test_pairs:
    coarse = np.clip(model.coarse(y), 0, 1)
    full = enhance(model, y, steps=5, seed=0)
    rows.append([psnr(y, gt), psnr(coarse, gt), psnr(full, gt), ssim(full, gt),
                 f_measure(binarize(full), binarize(gt))[0],
                 float(np.mean(highpass((full - gt)[None]).data ** 2)),
                 float(np.mean(highpass((coarse - gt)[None]).data ** 2))])
m = np.mean(rows, axis=0)
print(f"PSNR degraded {m[0]:.2f}  coarse {m[1]:.2f}  full {m[2]:.2f} dB")
print(f"SSIM {m[3]:.3f}  FM {m[4]:.1f}")
print(f"highpass MSE full {m[5]:.4f} vs coarse {m[6]:.4f}")

# %% tiling cost for a page larger than one tile
plan = make_tile_plan(300, 300)
print(f"300x300 page: {len(plan.origins)} tiles, {100 * plan.overhead:.2f}% extra pixels")
