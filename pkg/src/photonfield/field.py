"""Continuous radiance field of anisotropic Gaussian primitives.

Each primitive carries a mean position, a unit quaternion, per-axis scales
(kept in log space so the induced precision matrix stays positive
definite), and an RGB flux. A query at a point gathers a hybrid
(ball + k-nearest top-up) neighborhood, weights each primitive by an
anisotropic Gaussian kernel times a smooth radial falloff, and returns the
softly normalized weighted flux:

    L(x) = sum_i w_i(x) * flux_i / max(sum_i w_i(x), eps)
    w_i(x) = exp(-0.5 * d^T Lambda_i d) * psi(|d|),   d = x - mean_i

where psi is 1 inside the query radius and exp(-3 t^2) beyond it, with
t the radius-relative excess distance. Everything is differentiable in
the continuous parameters; the discrete neighborhood is treated as
locally constant.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import core
from .core import Rng, quaternion_to_matrix, rotation_jacobian
from .photons import PhotonMap
from .spatial import PointIndex

DEFAULT_RADIUS = 0.02
DEFAULT_K_MIN = 3
DEFAULT_EPS = 1e-6
DEFAULT_INITIAL_SCALE = 0.01

SCALE_MIN = 1e-5
SCALE_MAX = 10.0

_MAGIC = b"GPF1"
_FALLOFF_SHARPNESS = 3.0


@dataclass(frozen=True)
class GaussianPrimitive:
    """View of one field element (scale in linear units)."""

    mean: np.ndarray
    quat: np.ndarray  # (w, x, y, z), unit
    scale: np.ndarray
    flux: np.ndarray


@dataclass(frozen=True)
class Neighborhood:
    """Neighbor ids captured by a forward query, pinned to the parameter
    state they were computed against."""

    ids: np.ndarray
    version: int


def _falloff(dist, radius: float):
    r_eff = max(radius, 1e-6)
    t = np.maximum(dist - radius, 0.0) / r_eff
    return np.where(dist <= radius, 1.0, np.exp(-_FALLOFF_SHARPNESS * t * t))


def gaussian_weight(prim: GaussianPrimitive, x, radius: float) -> float:
    """Anisotropic kernel weight of one primitive at ``x`` (with falloff)."""
    d = np.asarray(x, dtype=np.float64) - prim.mean
    rot = quaternion_to_matrix(prim.quat)
    u = (rot.T @ d) / prim.scale
    w_gauss = np.exp(-0.5 * float(u @ u))
    dist = float(np.linalg.norm(d))
    return float(w_gauss * _falloff(np.asarray(dist), radius))


class GaussianField:
    """Mutable set of Gaussian primitives plus a rebuildable spatial index.

    The index over means may lag parameter updates during optimization
    (rebuilt on a cadence); weights and radiance always use the current
    parameters. Public single-point queries refresh the index first.
    """

    def __init__(self, means, quats, log_scales, flux, radius=DEFAULT_RADIUS, k_min=DEFAULT_K_MIN, eps=DEFAULT_EPS):
        self.means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        self.quats = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(-1, 3)
        self.flux = np.asarray(flux, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        if not (len(self.quats) == len(self.log_scales) == len(self.flux) == n):
            raise ValueError("parameter blocks must have matching lengths")
        self.radius = float(radius)
        self.k_min = int(k_min)
        self.eps = float(eps)
        self._version = 0
        self._index: PointIndex | None = None
        self._index_version = -1

    # -- construction ------------------------------------------------------

    @classmethod
    def from_photons(
        cls,
        photons: PhotonMap,
        initial_scale: float = DEFAULT_INITIAL_SCALE,
        rng: Rng | int = 0,
        radius: float = DEFAULT_RADIUS,
        k_min: int = DEFAULT_K_MIN,
        eps: float = DEFAULT_EPS,
    ) -> "GaussianField":
        """Seed one primitive per photon: mean and flux copied from the
        photon, isotropic initial scale, uniformly random orientation."""
        if len(photons) == 0:
            raise ValueError("cannot initialize from empty photon map")
        rng = core.as_rng(rng)
        n = len(photons)
        quats = core.random_unit_quaternion(rng, n)
        log_scales = np.full((n, 3), np.log(initial_scale))
        return cls(photons.positions.copy(), quats, log_scales, photons.flux.copy(), radius, k_min, eps)

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.means[i], self.quats[i], self.scales[i], self.flux[i])

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def version(self) -> int:
        return self._version

    def mark_updated(self):
        """Record a parameter mutation: invalidates captured neighborhoods
        and makes the index stale for public queries."""
        self._version += 1

    def rebuild_index(self):
        self._index = PointIndex(self.means)
        self._index_version = self._version

    def ensure_index(self):
        if self._index is None or self._index_version != self._version:
            self.rebuild_index()

    # -- forward -----------------------------------------------------------

    def _neighbors(self, xs):
        return self._index.hybrid_query_batch(xs, self.radius, self.k_min)

    def _weight_terms(self, xs_rows, ids):
        """Per-neighbor kernel terms shared by forward and backward."""
        d = xs_rows - self.means[ids]
        rot = quaternion_to_matrix(self.quats[ids])
        y = np.einsum("kij,ki->kj", rot, d)
        s = np.exp(self.log_scales[ids])
        u = y / s
        w_gauss = np.exp(-0.5 * np.einsum("kj,kj->k", u, u))
        dist = np.sqrt(np.einsum("ki,ki->k", d, d))
        psi = _falloff(dist, self.radius)
        return d, rot, s, u, w_gauss, dist, psi, w_gauss * psi

    def query_batch(self, xs):
        """Field radiance at points (B, 3) -> (B, 3) (index used as-is)."""
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
        if len(self) == 0:
            return np.zeros((len(xs), 3))
        if self._index is None:
            raise RuntimeError("field index has not been built; call rebuild_index() first")
        flat, splits = self._neighbors(xs)
        L, _, _ = self._forward(xs, flat, splits)
        return L

    def _forward(self, xs, flat, splits):
        b = len(xs)
        owner = np.repeat(np.arange(b, dtype=np.intp), np.diff(splits))
        if len(flat) == 0:
            return np.zeros((b, 3)), np.zeros(b), np.zeros(0)
        _, _, _, _, _, _, _, w = self._weight_terms(xs[owner], flat)
        s_tot = np.bincount(owner, weights=w, minlength=b)
        num = np.zeros((b, 3))
        wphi = w[:, None] * self.flux[flat]
        for ch in range(3):
            num[:, ch] = np.bincount(owner, weights=wphi[:, ch], minlength=b)
        z = np.maximum(s_tot, self.eps)
        return num / z[:, None], s_tot, w

    def query(self, x):
        """Radiance and captured neighborhood at one point (fresh index)."""
        self.ensure_index()
        x = np.asarray(x, dtype=np.float64).reshape(3)
        if len(self) == 0:
            return np.zeros(3), Neighborhood(np.empty(0, dtype=np.intp), self._version)
        ids = self._index.hybrid_query(x, self.radius, self.k_min)
        splits = np.array([0, len(ids)], dtype=np.intp)
        L, _, _ = self._forward(x[None, :], ids, splits)
        return L[0], Neighborhood(ids, self._version)

    # -- backward ----------------------------------------------------------

    def _backward_terms(self, xs_rows, ids, owner, dl_rows, b):
        """Per-neighbor parameter gradients of J = sum_b dl_b . L_b."""
        d, rot, s, u, w_gauss, dist, psi, w = self._weight_terms(xs_rows, ids)
        s_tot = np.bincount(owner, weights=w, minlength=b)
        num = np.zeros((b, 3))
        wphi = w[:, None] * self.flux[ids]
        for ch in range(3):
            num[:, ch] = np.bincount(owner, weights=wphi[:, ch], minlength=b)
        z = np.maximum(s_tot, self.eps)
        L = num / z[:, None]

        ind = (s_tot > self.eps).astype(np.float64)
        dl_phi = np.einsum("kc,kc->k", dl_rows, self.flux[ids])
        dl_L = np.einsum("kc,kc->k", dl_rows, L[owner])
        g_w = (dl_phi - ind[owner] * dl_L) / z[owner]

        g_flux = (w / z[owner])[:, None] * dl_rows

        # d(w_gauss)/d(mean) = w_gauss * R (u / s); psi adds the radial term
        r_eff = max(self.radius, 1e-6)
        t_excess = np.maximum(dist - self.radius, 0.0) / r_eff
        outside = dist > self.radius
        with np.errstate(invalid="ignore", divide="ignore"):
            d_hat = np.where(dist[:, None] > 0.0, d / np.where(dist[:, None] > 0.0, dist[:, None], 1.0), 0.0)
        radial = np.where(outside, 2.0 * _FALLOFF_SHARPNESS * t_excess / r_eff, 0.0)
        r_u_over_s = np.einsum("kij,kj->ki", rot, u / s)
        g_mean = (g_w * w)[:, None] * (r_u_over_s + radial[:, None] * d_hat)

        g_log_scale = (g_w * w)[:, None] * (u * u)

        jac = rotation_jacobian(self.quats[ids])  # (K, 4, 3, 3)
        a_t_d = np.einsum("kmij,ki->kmj", jac, d)  # rows: (A_m^T d)_j
        g_quat = -(g_w * w)[:, None] * np.einsum("kmj,kj->km", a_t_d, u / s)

        return L, g_mean, g_quat, g_log_scale, g_flux

    def query_gradients(self, x, dl_dout, neighborhood: Neighborhood):
        """Per-neighbor gradients of J = dl_dout . L(x).

        ``neighborhood`` must come from a forward query against the current
        parameter state; a stale capture is a contract violation.
        """
        if neighborhood.version != self._version:
            raise ValueError("stale neighborhood: field parameters changed since the forward query")
        x = np.asarray(x, dtype=np.float64).reshape(3)
        dl = np.asarray(dl_dout, dtype=np.float64).reshape(3)
        ids = neighborhood.ids
        k = len(ids)
        owner = np.zeros(k, dtype=np.intp)
        xs_rows = np.broadcast_to(x, (k, 3))
        dl_rows = np.broadcast_to(dl, (k, 3))
        _, g_mean, g_quat, g_log_scale, g_flux = self._backward_terms(xs_rows, ids, owner, dl_rows, 1)
        return {"mean": g_mean, "quat": g_quat, "log_scale": g_log_scale, "flux": g_flux}

    def backward_scatter(self, xs, dl_dout, flat, splits):
        """Accumulate batch query gradients into dense parameter arrays.

        Deterministic ordered reduction (sequential scatter-add in flat
        neighbor order), so training is bit-reproducible.
        """
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
        dl = np.asarray(dl_dout, dtype=np.float64).reshape(-1, 3)
        b = len(xs)
        owner = np.repeat(np.arange(b, dtype=np.intp), np.diff(splits))
        g = {
            "mean": np.zeros_like(self.means),
            "quat": np.zeros_like(self.quats),
            "log_scale": np.zeros_like(self.log_scales),
            "flux": np.zeros_like(self.flux),
        }
        if len(flat) == 0:
            return g
        _, g_mean, g_quat, g_log_scale, g_flux = self._backward_terms(xs[owner], flat, owner, dl[owner], b)
        np.add.at(g["mean"], flat, g_mean)
        np.add.at(g["quat"], flat, g_quat)
        np.add.at(g["log_scale"], flat, g_log_scale)
        np.add.at(g["flux"], flat, g_flux)
        return g

    # -- serialization (GPF1: little-endian, float32 payload) ---------------

    def save(self, path) -> None:
        n = len(self)
        payload = np.empty((n, 13), dtype="<f4")
        payload[:, 0:3] = self.means
        payload[:, 3:7] = self.quats
        payload[:, 7:10] = self.scales
        payload[:, 10:13] = self.flux
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", n))
            fh.write(payload.tobytes())

    @classmethod
    def load(cls, path, radius=DEFAULT_RADIUS, k_min=DEFAULT_K_MIN, eps=DEFAULT_EPS) -> "GaussianField":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _MAGIC:
                raise ValueError(f"not a field checkpoint: bad magic {magic!r}")
            (n,) = struct.unpack("<I", fh.read(4))
            data = np.frombuffer(fh.read(n * 13 * 4), dtype="<f4")
        if data.size != n * 13:
            raise ValueError("truncated field checkpoint")
        data = data.reshape(n, 13).astype(np.float64)
        scales = np.clip(data[:, 7:10], SCALE_MIN, SCALE_MAX)
        return cls(data[:, 0:3], data[:, 3:7], np.log(scales), data[:, 10:13], radius, k_min, eps)
