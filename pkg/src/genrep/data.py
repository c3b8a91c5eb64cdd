"""Datasets for the experiments.

"Real" images are procedural renders degraded by Gaussian pixel noise and a
global brightness shift, standing in for the gap between generated and
photographed images.  Labels always come from the analytic scene.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import SeededRNG
from .generators import IMAGE_RES, labels_for_latents, render, sample_latent

NOISE_SIGMA = 0.02
BRIGHTNESS_JITTER = 0.05
TRAIN_POOL = 512
REAL_TEST = 128
SYNTHETIC_TEST = 30


@dataclass
class Split:
    images: np.ndarray  # (N, 3, 32, 32)
    labels: np.ndarray  # (N, 32, 32)
    latents: np.ndarray  # (N, 12)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Split(self.images[idx], self.labels[idx], self.latents[idx])


def clean_images(latents):
    return render(np.atleast_2d(latents), IMAGE_RES)[:, :3]


def realistic_images(latents, rng, noise=NOISE_SIGMA, jitter=BRIGHTNESS_JITTER):
    """Clean renders plus per-image brightness shift and per-pixel noise (unclipped)."""
    clean = clean_images(latents)
    n = len(clean)
    shift = rng.uniform(size=(n, 1, 1, 1), low=-jitter, high=jitter)
    return clean + shift + rng.normal(size=clean.shape, scale=noise)


def make_real_split(n, rng):
    latents = sample_latent(rng.spawn(1), n=n)
    return Split(realistic_images(latents, rng.spawn(2)), labels_for_latents(latents), latents)


def make_synthetic_split(generator, n, rng):
    latents = sample_latent(rng.spawn(1), n=n)
    image, _ = generator.generate(latents)
    return Split(image.data, labels_for_latents(latents), latents)


def make_datasets(seed, generator=None, train=TRAIN_POOL, real_test=REAL_TEST,
                  synthetic_test=SYNTHETIC_TEST):
    """Dict of ``train``, ``real-test`` and ``synthetic-test`` splits for one seed.

    The real splits depend on ``seed`` only, never on the generator.
    """
    from .generators import ProceduralGenerator
    rng = SeededRNG(seed).spawn(401)
    generator = generator if generator is not None else ProceduralGenerator()
    return {
        "train": make_real_split(train, rng.spawn(1)),
        "real-test": make_real_split(real_test, rng.spawn(2)),
        "synthetic-test": make_synthetic_split(generator, synthetic_test, rng.spawn(3)),
    }
