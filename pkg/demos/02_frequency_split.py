"""Frequency split of a text patch and the four training loss terms.

Run: python demos/02_frequency_split.py
"""
import numpy as np

from docdiff.data import make_pair
from docdiff.freqsep import highpass, lowpass, total_loss

degraded, clean, kind = make_pair("blur", 0, 3, 32)
x = clean[None]
hp, lp = highpass(x).data, lowpass(x).data

print("kind:", kind)
print("split is exact:", np.array_equal(hp + lp, x.astype(np.float64)))
print("highpass energy, clean  :", float(np.mean(hp ** 2)))
print("highpass energy, blurred:", float(np.mean(highpass(degraded[None]).data ** 2)))

# ink edges carry the high band; flat paper carries none
edges = np.abs(hp[0, 0]) > 0
print("pixels with highpass response: %.1f%%" % (100 * edges.mean()))

# %% loss terms for a coarse guess that is just the blurred input
terms = total_loss(degraded[None], x, np.zeros_like(x), np.zeros_like(x))
for name, value in terms.items():
    print(f"{name:>6s} {float(value.data):.5f}")
