"""Flow matching on a 2-D Gaussian mixture with the dialogue model's own transformer.

Each "sequence" is a single frame with two features and no text, so the
network learns the unconditional field that carries noise onto the mixture.
Takes about a minute on one core.

Run: python demos/toy_flow.py
"""

import numpy as np
import torch

from dialogue_flow.model import ModelConfig, VectorField
from dialogue_flow.train import fit_unconditional, sample_unconditional

torch.set_num_threads(1)
MEANS = np.array([[-2.0, 0.0], [2.0, 0.0]])


def mixture(rng, n):
    return MEANS[rng.integers(0, 2, n)] + 0.3 * rng.standard_normal((n, 2))


model = VectorField(ModelConfig(d_features=2), seed=0)
losses = fit_unconditional(model, lambda r, n: mixture(r, n)[:, None, :], steps=600, batch=256, seed=0)
print(f"loss: first 50 steps {np.mean(losses[:50]):.3f}, last 50 steps {np.mean(losses[-50:]):.3f}")

print("target: 0.50 on the right mode, spread 0.239, y sd 0.300")
for nfe in (2, 8, 32):
    x = sample_unconditional(model, 2000, nfe=nfe, seed=1)[:, 0, :]
    right = x[:, 0] > 0
    print(f"nfe={nfe:>2}: {right.mean():.2f} of samples on the right mode, "
          f"spread around the modes {np.abs(np.abs(x[:, 0]) - 2).mean():.3f}, y sd {x[:, 1].std():.3f}")

# text histogram of the x coordinate
x = sample_unconditional(model, 2000, nfe=32, seed=2)[:, 0, 0]
counts, edges = np.histogram(x, bins=24, range=(-3.5, 3.5))
for c, e in zip(counts, edges):
    print(f"{e:+5.2f} {'#' * (c // 8)}")
