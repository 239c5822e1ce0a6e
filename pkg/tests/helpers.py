"""Shared fixtures for the model-level tests: small, fast synthetic scenes."""

import numpy as np

from mixsep.cacg import PosteriorTensor
from mixsep.synth import ScenarioConfig, SegmentPlan, build_meeting
from mixsep.vmf import smooth_one_hot, spherical_kmeans_pp


def tiny_scenario(
    active,
    duration_s=6.0,
    k_true=None,
    overlap=0.2,
    kappa_true=30.0,
    seed=0,
    channels=3,
    embed_dim=16,
    spatial_groups=None,
    segments=None,
):
    """A low-rate scenario (F=33, frame rate 125) that builds in milliseconds."""
    if segments is None:
        segments = [SegmentPlan(duration_s, list(active))]
    if k_true is None:
        k_true = max(max(p.active) for p in segments) + 1
    return ScenarioConfig(
        k_true=k_true,
        segments=segments,
        channels=channels,
        embed_dim=embed_dim,
        sample_rate=2000,
        stft_size_ms=32.0,
        window_ms=25.0,
        shift_ms=8.0,
        kappa_true=kappa_true,
        anisotropy=4.0,
        overlap=overlap,
        gap_s=0.6,
        block_s=1.2,
        seed=seed,
        spatial_groups=spatial_groups,
    )


def random_soft_posterior(rng, n_comp, n_frames, n_bins, replicate=True):
    """Frame-level random soft assignment, replicated over frequency."""
    labels = rng.integers(0, n_comp, size=n_frames)
    gamma_t = np.full((n_comp, n_frames), 0.1 / max(n_comp - 1, 1))
    gamma_t[labels, np.arange(n_frames)] = 0.9
    gamma_t /= gamma_t.sum(axis=0, keepdims=True)
    gamma = np.repeat(gamma_t[:, :, None], n_bins, axis=2)
    return PosteriorTensor(gamma, gamma_t.copy())


def kmeans_init_posterior(embeddings, voiced, n_clusters, n_bins, seed=0, with_noise=True):
    """k-means++ one-hot responsibilities, smoothed, noise on silence frames."""
    from mixsep.vmf import EmbeddingSequence

    n_frames = embeddings.num_frames
    idx = np.flatnonzero(voiced)
    sub = EmbeddingSequence(embeddings.frames[idx], embeddings.frame_rate)
    assign = smooth_one_hot(spherical_kmeans_pp(sub, n_clusters, seed))
    rows = n_clusters + (1 if with_noise else 0)
    gamma_t = np.zeros((rows, n_frames))
    gamma_t[:n_clusters, idx] = assign
    if with_noise:
        gamma_t[n_clusters, ~voiced] = 1.0
    else:
        gamma_t[:, ~voiced] = 1.0 / n_clusters
    gamma = np.repeat(gamma_t[:, :, None], n_bins, axis=2)
    return PosteriorTensor(gamma, gamma_t.copy())
