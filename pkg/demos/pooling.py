"""Posterior pooling in a few lines: confident frames pull the utterance mean,
noisy frames barely move it, and total precision grows with every frame."""

import numpy as np

from xiplus import DiagonalGaussian, posterior_pool, prior_init

prior = prior_init(2)  # zero mean, unit precision
frames = [
    DiagonalGaussian(np.array([1.0, 0.0]), np.array([50.0, 50.0])),  # clean
    DiagonalGaussian(np.array([-4.0, 3.0]), np.array([0.1, 0.1])),  # noisy outlier
    DiagonalGaussian(np.array([0.9, 0.1]), np.array([40.0, 40.0])),
]

for t in range(len(frames) + 1):
    post = posterior_pool(frames[:t], prior)
    print(f"after {t} frames: mean={np.round(post.mean, 3)} precision={np.round(post.precision, 2)}")

# weighting by precision is what keeps the outlier from dragging the mean
naive = np.mean([f.mean for f in frames], axis=0)
print("plain average of frame means:", np.round(naive, 3))
