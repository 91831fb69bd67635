"""Synthetic benchmarks.

* ``embedding_mixture``: unit-sphere mixture with a guaranteed minimum
  angle between component directions, optional class imbalance and a
  matching synthetic noun vocabulary.
* ``image_mixture``: small images whose class is carried by a weak,
  flip-symmetric luminance pattern buried under class-independent colored
  clutter; used with the stub vision encoder for the self-enhancement stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError


@dataclass
class Mixture:
    data: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    nouns: list
    noun_data: np.ndarray
    min_angle_deg: float


def class_sizes(N, K, imbalance=1.0):
    """Sizes with largest/smallest ratio ``imbalance`` (geometric in between)."""
    rel = imbalance ** (-np.arange(K) / max(K - 1, 1))
    sizes = np.rint(N * rel / rel.sum()).astype(int)
    sizes[0] += N - sizes.sum()
    return sizes


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _separated_directions(K, D, separation_deg, rng, tries=1000):
    cos_max = np.cos(np.deg2rad(separation_deg))
    for _ in range(tries):
        c = _unit(rng.standard_normal((K, D)))
        g = c @ c.T
        np.fill_diagonal(g, -1)
        if g.max() <= cos_max:
            return c
    raise DegenerateDataError(f"could not place {K} directions {separation_deg} degrees apart in D={D}")


def embedding_mixture(
    N=2000,
    D=64,
    K=5,
    separation_deg=60.0,
    spread_deg=25.0,
    imbalance=1.0,
    n_nouns_per_cluster=40,
    n_distractors=200,
    seed=0,
) -> Mixture:
    """Points ``normalize(c_k + tan(spread) * g)`` with ``g ~ N(0, I/D)``."""
    rng = np.random.default_rng(seed)
    centers = _separated_directions(K, D, separation_deg, rng)
    sizes = class_sizes(N, K, imbalance)
    labels = np.repeat(np.arange(K), sizes)
    rng.shuffle(labels)
    scale = np.tan(np.deg2rad(spread_deg))
    data = _unit(centers[labels] + scale * rng.standard_normal((N, D)) / np.sqrt(D))

    noun_labels = np.repeat(np.arange(K), n_nouns_per_cluster)
    nouns = [f"concept{k}_{j}" for k in range(K) for j in range(n_nouns_per_cluster)]
    noun_data = _unit(centers[noun_labels] + scale * rng.standard_normal((len(noun_labels), D)) / np.sqrt(D))
    if n_distractors:
        nouns += [f"distractor_{j}" for j in range(n_distractors)]
        noun_data = np.vstack([noun_data, _unit(rng.standard_normal((n_distractors, D)))])
    g = centers @ centers.T
    np.fill_diagonal(g, -1)
    min_angle = float(np.rad2deg(np.arccos(np.clip(g.max(), -1, 1))))
    return Mixture(data, labels, centers, nouns, noun_data, min_angle)


def _smooth_field(rng, n, channels, size, cutoff):
    """Random low-frequency fields via a truncated Fourier basis."""
    f = np.fft.fftfreq(size)
    mask = (np.abs(f)[:, None] <= cutoff) & (np.abs(f)[None, :] <= cutoff)
    spec = (rng.standard_normal((n, channels, size, size)) + 1j * rng.standard_normal((n, channels, size, size))) * mask
    out = np.real(np.fft.ifft2(spec))
    return out / out.std(axis=(-2, -1), keepdims=True)


def image_mixture(N=2000, K=5, size=16, signal=0.6, clutter=1.0, noise=0.1, imbalance=1.0, seed=0):
    """Images of shape (N, 3, size, size) and their class labels."""
    rng = np.random.default_rng(seed)
    proto = _smooth_field(rng, K, 1, size, 0.2)
    proto = 0.5 * (proto + proto[..., ::-1])
    proto /= proto.std(axis=(-2, -1), keepdims=True)
    sizes = class_sizes(N, K, imbalance)
    labels = np.repeat(np.arange(K), sizes)
    rng.shuffle(labels)
    clutter_fields = _smooth_field(rng, N, 3, size, 0.25)
    images = signal * proto[labels] + clutter * clutter_fields + noise * rng.standard_normal((N, 3, size, size))
    return images.astype(np.float32), labels


@dataclass
class ImageBenchmark:
    images: np.ndarray
    labels: np.ndarray
    features: np.ndarray
    nouns: list
    noun_data: np.ndarray


def class_anchored_vocabulary(features, labels, K, n_per_cluster=40, n_distractors=200, jitter=0.05, seed=0):
    """Synthetic nouns scattered around each class mean of ``features``, plus random distractors.

    Stands in for a real noun list whose concepts match the image classes.
    """
    rng = np.random.default_rng(seed)
    means = _unit(np.stack([features[labels == k].mean(0) for k in range(K)]))
    anchored = np.repeat(means, n_per_cluster, axis=0)
    anchored = _unit(anchored + jitter * rng.standard_normal(anchored.shape))
    nouns = [f"concept{k}_{j}" for k in range(K) for j in range(n_per_cluster)]
    data = anchored
    if n_distractors:
        nouns += [f"distractor_{j}" for j in range(n_distractors)]
        data = np.vstack([anchored, _unit(rng.standard_normal((n_distractors, features.shape[1])))])
    return nouns, data


def stub_image_benchmark(encoder, N=1000, K=5, signal=3.0, clutter=1.0, noise=0.1, imbalance=1.0, n_per_cluster=40, n_distractors=200, seed=0):
    """Images, labels, frozen-encoder features and a matching noun vocabulary."""
    import torch

    size = encoder.patch * int(round(encoder.pos.shape[0] ** 0.5))
    images, labels = image_mixture(N, K, size, signal, clutter, noise, imbalance, seed)
    with torch.no_grad():
        feats = torch.nn.functional.normalize(encoder(torch.as_tensor(images)), dim=1).numpy().astype(np.float64)
    nouns, noun_data = class_anchored_vocabulary(feats, labels, K, n_per_cluster, n_distractors, seed=seed + 1)
    return ImageBenchmark(images, labels, feats, nouns, noun_data)
