"""Math primitives: quaternions, hemisphere sampling, deterministic RNG."""

import numpy as np
import pytest
from scipy import stats

from photonfield import core
from photonfield.core import (
    Rng,
    draw_unit,
    fold_key,
    normalize,
    orthonormal_basis,
    quaternion_to_matrix,
    random_unit_quaternion,
    rotation_jacobian,
    sample_cosine_hemisphere,
    seed_key,
)


class TestQuaternions:
    def test_identity_quaternion_gives_identity_matrix(self):
        r = quaternion_to_matrix(np.array([1.0, 0.0, 0.0, 0.0]))
        np.testing.assert_array_equal(r, np.eye(3))

    def test_negated_quaternion_gives_bitwise_same_matrix(self):
        rng = Rng(3)
        q = random_unit_quaternion(rng, 50)
        np.testing.assert_array_equal(quaternion_to_matrix(q), quaternion_to_matrix(-q))

    def test_random_quaternions_give_orthonormal_rotations(self):
        rng = Rng(4)
        q = random_unit_quaternion(rng, 200)
        r = quaternion_to_matrix(q)
        rtr = np.einsum("kji,kjl->kil", r, r)
        np.testing.assert_allclose(rtr, np.broadcast_to(np.eye(3), rtr.shape), atol=1e-9)
        np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-9)

    def test_rotation_preserves_vector_norm(self):
        rng = Rng(5)
        q = random_unit_quaternion(rng, 100)
        v = np.stack([rng.uniform(100) * 4 - 2, rng.uniform(100) * 4 - 2, rng.uniform(100) * 4 - 2], axis=1)
        rv = np.einsum("kij,kj->ki", quaternion_to_matrix(q), v)
        np.testing.assert_allclose(np.linalg.norm(rv, axis=1), np.linalg.norm(v, axis=1), rtol=1e-9)

    def test_rotation_jacobian_matches_finite_differences(self):
        rng = Rng(6)
        q = random_unit_quaternion(rng, 20)
        jac = rotation_jacobian(q)
        h = 1e-7
        for m in range(4):
            dq = np.zeros(4)
            dq[m] = h
            fd = (quaternion_to_matrix(q + dq) - quaternion_to_matrix(q - dq)) / (2 * h)
            np.testing.assert_allclose(jac[:, m], fd, atol=1e-7)

    def test_sampled_quaternions_are_unit(self):
        q = random_unit_quaternion(Rng(7), 1000)
        np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-12)


class TestCosineHemisphere:
    def test_zero_inputs_give_pole_direction(self):
        n = np.array([0.0, 0.0, 1.0])
        d, pdf = sample_cosine_hemisphere(0.0, 0.0, n)
        np.testing.assert_allclose(d, n, atol=1e-12)
        assert pdf == pytest.approx(1.0 / np.pi, rel=1e-12)

    def test_directions_stay_in_normal_hemisphere(self):
        rng = Rng(8)
        n = normalize(np.stack([rng.uniform(500) - 0.5, rng.uniform(500) - 0.5, rng.uniform(500) - 0.5], axis=1))
        d, pdf = sample_cosine_hemisphere(rng.uniform(500), rng.uniform(500), n)
        assert np.all(np.einsum("ij,ij->i", d, n) > 0.0)
        assert np.all(pdf > 0.0)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)

    def test_monte_carlo_integral_of_cosine_is_pi(self):
        # importance-weighted estimate of the hemisphere integral of cos
        rng = Rng(9)
        n = np.array([0.0, 0.0, 1.0])
        m = 100_000
        nn = np.broadcast_to(n, (m, 3))
        d, pdf = sample_cosine_hemisphere(rng.uniform(m), rng.uniform(m), nn)
        cos = d[:, 2]
        est = float(np.mean(cos / pdf))
        assert est == pytest.approx(np.pi, rel=0.01)

    def test_monte_carlo_integral_of_cosine_squared(self):
        # independent target: integral of cos^2 over the hemisphere is 2*pi/3
        rng = Rng(10)
        n = np.array([0.0, 0.0, 1.0])
        m = 100_000
        nn = np.broadcast_to(n, (m, 3))
        d, pdf = sample_cosine_hemisphere(rng.uniform(m), rng.uniform(m), nn)
        cos = d[:, 2]
        est = float(np.mean(cos**2 / pdf))
        assert est == pytest.approx(2.0 * np.pi / 3.0, rel=0.01)

    def test_empirical_density_matches_cosine_by_chi_square(self):
        # marginal density of cos(theta) under cos/pi sampling is 2c, so the
        # expected mass of bin [a, b] is b^2 - a^2
        rng = Rng(11)
        m = 100_000
        n = np.broadcast_to(np.array([0.0, 0.0, 1.0]), (m, 3))
        d, _ = sample_cosine_hemisphere(rng.uniform(m), rng.uniform(m), n)
        cos = d[:, 2]
        edges = np.linspace(0.0, 1.0, 17)
        counts, _ = np.histogram(cos, bins=edges)
        expected = (edges[1:] ** 2 - edges[:-1] ** 2) * m
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        crit = stats.chi2.ppf(0.999, len(counts) - 1)
        assert chi2 < crit


class TestRng:
    def test_equal_seeds_give_equal_streams(self):
        a = Rng(1234)
        b = Rng(1234)
        np.testing.assert_array_equal(a.uniform(10_000), b.uniform(10_000))

    def test_seed_changes_stream(self):
        assert not np.array_equal(Rng(1).uniform(100), Rng(2).uniform(100))

    def test_derived_streams_are_distinct(self):
        base = Rng(7)
        a = base.derive(0).uniform(1000)
        b = base.derive(1).uniform(1000)
        assert not np.array_equal(a, b)
        # derivation is stable
        np.testing.assert_array_equal(a, Rng(7).derive(0).uniform(1000))

    def test_draws_lie_in_unit_interval(self):
        u = Rng(8).uniform(100_000)
        assert np.all(u >= 0.0) and np.all(u < 1.0)
        assert abs(u.mean() - 0.5) < 0.005

    def test_draw_unit_is_pure_function_of_key_and_counter(self):
        key = fold_key(seed_key(5), 9)
        np.testing.assert_array_equal(
            draw_unit(key, np.arange(100, dtype=np.uint64)),
            draw_unit(key, np.arange(100, dtype=np.uint64)),
        )

    def test_scalar_and_vector_draws_agree(self):
        a = Rng(21)
        b = Rng(21)
        singles = np.array([a.uniform() for _ in range(64)])
        np.testing.assert_array_equal(singles, b.uniform(64))


class TestBasis:
    def test_orthonormal_basis_completes_frame(self):
        rng = Rng(12)
        n = normalize(np.stack([rng.uniform(300) - 0.5, rng.uniform(300) - 0.5, rng.uniform(300) - 0.5], axis=1))
        t, b = orthonormal_basis(n)
        np.testing.assert_allclose(np.einsum("ij,ij->i", t, n), 0.0, atol=1e-12)
        np.testing.assert_allclose(np.einsum("ij,ij->i", b, n), 0.0, atol=1e-12)
        np.testing.assert_allclose(np.einsum("ij,ij->i", t, b), 0.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(t, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(b, axis=1), 1.0, atol=1e-12)

    def test_normalize_rejects_zero_vector(self):
        with pytest.raises(ValueError):
            normalize(np.zeros(3))
