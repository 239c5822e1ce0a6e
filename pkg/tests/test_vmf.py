import math

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from mixsep.errors import ConfigurationError, InvalidInputError
from mixsep.numerics import log_vmf_normalizer
from mixsep.synth import sample_vmf
from mixsep.vmf import (
    EmbeddingSequence,
    SpectralComponent,
    smooth_one_hot,
    spherical_kmeans_pp,
    vmf_log_pdf,
    vmf_m_step,
    vmfmm_em,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def make_clusters(rng, n_per, mus, kappa, seed0=100):
    frames = np.concatenate(
        [sample_vmf(mu, kappa, n_per, seed0 + i) for i, mu in enumerate(mus)]
    )
    labels = np.repeat(np.arange(len(mus)), n_per)
    perm = rng.permutation(frames.shape[0])
    return EmbeddingSequence(frames[perm]), labels[perm]


def orthonormal(rng, dim, count):
    return np.linalg.qr(rng.standard_normal((dim, count)))[0].T


class TestVmfLogPdf:
    def test_kappa_zero_uniform(self):
        comp = SpectralComponent(unit([1.0, 0, 0, 0]), 0.0)
        rng = np.random.default_rng(0)
        values = [
            vmf_log_pdf(comp, unit(rng.standard_normal(4))) for _ in range(5)
        ]
        assert np.allclose(values, log_vmf_normalizer(4, 0.0))

    def test_at_mode(self):
        mu = unit(np.arange(1.0, 65.0))
        comp = SpectralComponent(mu, 35.0)
        want = log_vmf_normalizer(64, 35.0) + 35.0
        assert abs(vmf_log_pdf(comp, mu) - want) < 1e-10

    def test_monte_carlo_normalization(self):
        # uniform-proposal integral over S^2, 1e5 draws (acceptance runs 1e6)
        rng = np.random.default_rng(42)
        comp = SpectralComponent(unit([0.3, -0.5, 0.81]), 5.0)
        x = rng.standard_normal((100_000, 3))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        area = 4.0 * math.pi
        dens = np.exp([vmf_log_pdf(comp, xi) for xi in x[:2000]])
        # vectorized density for the full sample
        dens = np.exp(log_vmf_normalizer(3, comp.kappa) + comp.kappa * (x @ comp.mu))
        assert abs(area * dens.mean() - 1.0) < 0.02

    def test_rejects_non_unit(self):
        comp = SpectralComponent(unit([1.0, 0.0]), 1.0)
        with pytest.raises(InvalidInputError):
            vmf_log_pdf(comp, np.array([2.0, 0.0]))


class TestVmfMStep:
    def test_single_frame_saturates_at_cap(self):
        frames = np.stack([unit([1, 2, 3, 4.0]), unit([0, 1, 0, 0.0])])
        resp = np.array([[1.0, 0.0]])
        (comp,) = vmf_m_step(EmbeddingSequence(frames), resp, kappa_max=35.0)
        assert np.allclose(comp.mu, frames[0], atol=1e-12)
        assert comp.kappa == 35.0

    def test_antipodal_cancellation_degenerate(self):
        e = unit([1.0, -1.0, 0.5])
        frames = np.stack([e, -e])
        resp = np.array([[0.5, 0.5]])
        (comp,) = vmf_m_step(EmbeddingSequence(frames), resp, kappa_max=35.0)
        assert comp.kappa == 0.0
        assert abs(np.linalg.norm(comp.mu) - 1.0) < 1e-12

    def test_recovers_sampler_parameters(self):
        mu = unit(np.sin(np.arange(16.0) + 0.3))
        frames = sample_vmf(mu, 20.0, 5000, seed=1234)
        resp = np.ones((1, 5000))
        (comp,) = vmf_m_step(EmbeddingSequence(frames), resp, kappa_max=1000.0)
        assert float(comp.mu @ mu) >= 0.999
        assert abs(comp.kappa - 20.0) <= 2.0

    def test_kappa_never_exceeds_cap(self):
        rng = np.random.default_rng(8)
        frames = sample_vmf(unit(rng.standard_normal(8)), 200.0, 300, seed=77)
        resp = rng.uniform(0.0, 1.0, size=(3, 300))
        comps = vmf_m_step(EmbeddingSequence(frames), resp, kappa_max=35.0)
        assert all(c.kappa <= 35.0 for c in comps)

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(21)
        frames = sample_vmf(unit(rng.standard_normal(6)), 10.0, 200, seed=3)
        resp = rng.uniform(0.2, 1.0, size=(2, 200))
        rot = np.linalg.qr(rng.standard_normal((6, 6)))[0]
        base = vmf_m_step(EmbeddingSequence(frames), resp, kappa_max=50.0)
        rotated = vmf_m_step(EmbeddingSequence(frames @ rot.T), resp, kappa_max=50.0)
        for b, r in zip(base, rotated):
            assert np.allclose(rot @ b.mu, r.mu, atol=1e-9)
            assert abs(b.kappa - r.kappa) < 1e-9


class TestVmfmmEm:
    def test_single_component_mean_direction(self):
        rng = np.random.default_rng(5)
        frames = sample_vmf(unit(rng.standard_normal(8)), 8.0, 400, seed=10)
        seq = EmbeddingSequence(frames)
        mixture, resp, trace = vmfmm_em(seq, np.ones((1, 400)), 5, kappa_max=35.0)
        assert np.allclose(resp, 1.0)
        want = unit(frames.sum(axis=0))
        assert float(mixture.components[0].mu @ want) > 1.0 - 1e-12

    def test_two_separated_clusters(self):
        rng = np.random.default_rng(17)
        mus = orthonormal(rng, 16, 2)
        assert abs(float(mus[0] @ mus[1])) < 0.2
        seq, labels = make_clusters(rng, 250, mus, kappa=30.0)
        init = spherical_kmeans_pp(seq, 2, seed=0)
        mixture, resp, trace = vmfmm_em(seq, smooth_one_hot(init), 30, kappa_max=35.0)
        hard = np.argmax(resp, axis=0)
        acc = max(np.mean(hard == labels), np.mean(hard == 1 - labels))
        assert acc >= 0.99

    def test_loglik_monotone_over_random_inits(self):
        rng = np.random.default_rng(29)
        mus = orthonormal(rng, 8, 3)
        seq, _ = make_clusters(rng, 60, mus, kappa=12.0)
        for trial in range(50):
            trial_rng = np.random.default_rng(1000 + trial)
            raw = trial_rng.uniform(0.05, 1.0, size=(3, seq.num_frames))
            init = raw / raw.sum(axis=0, keepdims=True)
            _, _, trace = vmfmm_em(seq, init, 15, kappa_max=35.0)
            diffs = np.diff(trace)
            tol = 1e-6 * np.abs(trace[:-1])
            assert np.all(diffs >= -tol)

    def test_posterior_columns_sum_to_one(self):
        rng = np.random.default_rng(31)
        seq, _ = make_clusters(rng, 50, orthonormal(rng, 8, 2), kappa=20.0)
        init = smooth_one_hot(spherical_kmeans_pp(seq, 2, seed=1))
        _, resp, _ = vmfmm_em(seq, init, 10, kappa_max=35.0)
        assert np.allclose(resp.sum(axis=0), 1.0, atol=1e-9)

    def test_more_components_than_frames_rejected(self):
        frames = sample_vmf(unit([1.0, 0, 0]), 5.0, 4, seed=2)
        with pytest.raises(ConfigurationError):
            vmfmm_em(EmbeddingSequence(frames), np.ones((5, 4)) / 5.0, 3, kappa_max=35.0)


class TestSphericalKmeans:
    def test_single_cluster(self):
        frames = sample_vmf(unit([0.0, 1.0, 0.0]), 10.0, 30, seed=4)
        assign = spherical_kmeans_pp(EmbeddingSequence(frames), 1, seed=0)
        assert np.array_equal(assign, np.ones((1, 30)))

    def test_orthogonal_clusters_exact_bipartition(self):
        rng = np.random.default_rng(13)
        mus = np.eye(8)[:2]
        seq, labels = make_clusters(rng, 40, mus, kappa=200.0)
        assign = spherical_kmeans_pp(seq, 2, seed=3)
        hard = np.argmax(assign, axis=0)
        acc = max(np.mean(hard == labels), np.mean(hard == 1 - labels))
        assert acc == 1.0

    def test_eight_speakers_accuracy(self):
        rng = np.random.default_rng(41)
        mus = orthonormal(rng, 32, 8)
        seq, labels = make_clusters(rng, 60, mus, kappa=25.0)
        assign = spherical_kmeans_pp(seq, 8, seed=7)
        hard = np.argmax(assign, axis=0)
        # best permutation via Hungarian on the contingency table
        table = np.zeros((8, 8))
        for h, l in zip(hard, labels):
            table[h, l] += 1
        rows, cols = linear_sum_assignment(-table)
        acc = table[rows, cols].sum() / labels.shape[0]
        assert acc >= 0.95

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        seq, _ = make_clusters(rng, 30, orthonormal(rng, 8, 3), kappa=15.0)
        a = spherical_kmeans_pp(seq, 3, seed=11)
        b = spherical_kmeans_pp(seq, 3, seed=11)
        assert np.array_equal(a, b)

    def test_k_exceeding_frames_rejected(self):
        frames = sample_vmf(unit([1.0, 0.0]), 3.0, 4, seed=6)
        with pytest.raises(ConfigurationError):
            spherical_kmeans_pp(EmbeddingSequence(frames), 5, seed=0)


class TestEmbeddingSequence:
    def test_from_raw_normalizes(self):
        rows = np.array([[3.0, 4.0], [0.5, 0.0]])
        seq = EmbeddingSequence.from_raw(rows)
        assert np.allclose(np.linalg.norm(seq.frames, axis=1), 1.0, atol=1e-12)

    def test_zero_row_rejected(self):
        with pytest.raises(InvalidInputError):
            EmbeddingSequence.from_raw(np.array([[0.0, 0.0]]))

    def test_non_unit_rows_rejected(self):
        with pytest.raises(InvalidInputError):
            EmbeddingSequence(np.array([[0.5, 0.0]]))
