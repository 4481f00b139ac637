"""Rendering integrators: progressive photon mapping, path tracing, and
the photon-field camera pass.

All camera integrators share one wavefront tracer that follows rays
through delta (mirror/dielectric) bounces to the first diffuse hit,
accumulating throughput along the way; what happens at that hit is the
only thing that differs: photon-density gathering, a field query, or
supervision-point capture.

Images are (height, width, 3) float64 arrays of linear radiance.
Everything is deterministic for a fixed seed: random streams are keyed by
(seed, pass, pixel, sample), never by execution order, so thread count and
chunking cannot change output bits.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import core, scene as scene_mod
from .core import draw_unit, fold_key, seed_key, vdot
from .photons import PhotonMap, trace_photons
from .spatial import PointIndex

_TAG_PHOTON = 0xA1
_TAG_CAMERA = 0xC3
_MAX_DELTA_CHAIN = 32
_RR_START = 3
_RAY_OFFSET = 1e-7


@dataclass
class SppmConfig:
    """Progressive photon-mapping parameters (per-iteration photon passes
    with frame averaging and a shrinking gather radius)."""

    iterations: int = 1000
    photons_per_iter: int = 100_000
    initial_radius: float = 0.02
    alpha: float = 0.7
    max_photon_bounces: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.photons_per_iter < 1:
            raise ValueError("iterations and photons_per_iter must be >= 1")
        if self.initial_radius <= 0.0:
            raise ValueError("initial_radius must be positive")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")


def sppm_radius(t: int, r0: float, alpha: float) -> float:
    """Gather radius after ``t`` progressive iterations.

    r(0) = r0 and r(t) = r(t-1) * sqrt((t-1+alpha) / t); strictly
    decreasing for alpha < 1 and constant for alpha = 1.
    """
    if t < 0:
        raise ValueError("iteration index must be non-negative")
    r = float(r0)
    for j in range(1, t + 1):
        r *= math.sqrt((j - 1 + alpha) / j)
    return r


def _ordered_map(fn, args, threads: int):
    """Map preserving argument order with at most ``threads`` workers.

    Results are yielded in submission order regardless of completion
    order, so parallel reductions stay bit-identical to serial ones.
    """
    if threads <= 1:
        for a in args:
            yield fn(a)
        return
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as ex:
        pending = deque()
        it = iter(args)
        for a in it:
            pending.append(ex.submit(fn, a))
            if len(pending) >= threads * 2:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


# ---------------------------------------------------------------------------
# shared camera pass


@dataclass
class FirstDiffuse:
    """Per-ray outcome of tracing through delta bounces.

    ``emitted`` carries beta * L_e from emitter hits seen through a
    delta-only prefix; rays with ``found`` landed on a (non-emitting side
    of a) diffuse surface, with throughput ``beta`` accumulated along the
    prefix and ``n_delta`` delta bounces before the hit.
    """

    found: np.ndarray  # (n,) bool
    position: np.ndarray  # (n, 3)
    normal: np.ndarray  # (n, 3)
    wo: np.ndarray  # (n, 3)
    albedo: np.ndarray  # (n, 3)
    shape_id: np.ndarray  # (n,)
    beta: np.ndarray  # (n, 3)
    emitted: np.ndarray  # (n, 3)
    n_delta: np.ndarray  # (n,)


def trace_to_first_diffuse(scene: scene_mod.Scene, origins, dirs, keys, ctrs) -> FirstDiffuse:
    """Trace rays through delta interactions to their first diffuse hit.

    Emitter hits behind a delta-only prefix terminate the ray and deposit
    beta * L_e into ``emitted`` (the emitter is not gathered). ``ctrs`` is
    advanced in place as paths consume BSDF draws.
    """
    n = len(origins)
    out = FirstDiffuse(
        found=np.zeros(n, dtype=bool),
        position=np.zeros((n, 3)),
        normal=np.zeros((n, 3)),
        wo=np.zeros((n, 3)),
        albedo=np.zeros((n, 3)),
        shape_id=np.full(n, -1, dtype=np.intp),
        beta=np.ones((n, 3)),
        emitted=np.zeros((n, 3)),
        n_delta=np.zeros(n, dtype=np.intp),
    )
    alive = np.arange(n, dtype=np.intp)
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    beta = np.ones((n, 3))
    for depth in range(_MAX_DELTA_CHAIN):
        if alive.size == 0:
            break
        hits = scene.intersect_batch(o, d)
        hv = hits.valid
        alive = alive[hv]
        if alive.size == 0:
            break
        o = hits.position[hv]
        beta = beta[hv]
        sub_normal = hits.normal[hv]
        sub_wo = hits.wo[hv]
        sub_albedo = hits.albedo[hv]
        sub_sid = hits.shape_id[hv]
        sub_kind = hits.mat_kind[hv]
        sub_emission = hits.emission[hv]
        sub_ior = hits.ior[hv]
        sub_entering = hits.entering[hv]

        emitter = np.any(sub_emission > 0.0, axis=1)
        if np.any(emitter):
            rows = alive[emitter]
            out.emitted[rows] += beta[emitter] * sub_emission[emitter]

        diffuse = (sub_kind == scene_mod.DIFFUSE) & ~emitter
        if np.any(diffuse):
            rows = alive[diffuse]
            out.found[rows] = True
            out.position[rows] = o[diffuse]
            out.normal[rows] = sub_normal[diffuse]
            out.wo[rows] = sub_wo[diffuse]
            out.albedo[rows] = sub_albedo[diffuse]
            out.shape_id[rows] = sub_sid[diffuse]
            out.beta[rows] = beta[diffuse]
            out.n_delta[rows] = depth

        cont = ~emitter & ~diffuse
        if not np.any(cont):
            break
        sub = scene_mod.Hits(
            valid=np.ones(int(cont.sum()), dtype=bool),
            t=np.zeros(int(cont.sum())),
            position=o[cont],
            normal=sub_normal[cont],
            wo=sub_wo[cont],
            shape_id=sub_sid[cont],
            mat_kind=sub_kind[cont],
            albedo=sub_albedo[cont],
            ior=sub_ior[cont],
            emission=sub_emission[cont],
            entering=sub_entering[cont],
        )
        alive = alive[cont]
        beta = beta[cont]
        k = keys[alive]
        c = ctrs[alive]
        u1 = draw_unit(k, c)
        u2 = draw_unit(k, c + np.uint64(1))
        u3 = draw_unit(k, c + np.uint64(2))
        ctrs[alive] += np.uint64(3)
        wi, weight, _, _ = scene_mod.sample_bsdf_batch(sub, u1, u2, u3)
        beta = beta * weight
        o = sub.position + _RAY_OFFSET * wi
        d = wi
    return out


def _camera_keys(seed: int, pass_idx: int, pixel_ids):
    base = fold_key(fold_key(seed_key(seed), _TAG_CAMERA), pass_idx)
    return fold_key(base, pixel_ids.astype(np.uint64))


def _camera_rays(camera: scene_mod.Camera, seed: int, pass_idx: int):
    w, h = camera.resolution
    pixel_ids = np.arange(w * h, dtype=np.intp)
    keys = _camera_keys(seed, pass_idx, pixel_ids)
    ctrs = np.zeros(w * h, dtype=np.uint64)
    jx = draw_unit(keys, ctrs)
    jy = draw_unit(keys, ctrs + np.uint64(1))
    ctrs += np.uint64(2)
    o, d = camera.primary_rays(pixel_ids, np.stack([jx, jy], axis=1))
    return pixel_ids, keys, ctrs, o, d


# ---------------------------------------------------------------------------
# photon-density estimation


def kde_gather_batch(index: PointIndex, photons: PhotonMap, positions, normals, wos, albedo, radius: float):
    """Density-estimated outgoing radiance at diffuse surface points.

    L = 1/(pi r^2) * sum over photons within r of flux * f_r, evaluating
    the diffuse BSDF against each photon's incident direction (photons
    arriving under the surface contribute zero).
    """
    m = len(positions)
    out = np.zeros((m, 3))
    if len(photons) == 0 or m == 0:
        return out
    flat, splits = index.ball_query_batch(positions, radius)
    if len(flat) == 0:
        return out
    owner = np.repeat(np.arange(m, dtype=np.intp), np.diff(splits))
    fr = scene_mod.eval_bsdf_batch(
        albedo[owner], normals[owner], np.full(len(flat), scene_mod.DIFFUSE, dtype=np.uint8), photons.incident[flat], wos[owner]
    )
    contrib = photons.flux[flat] * fr
    np.add.at(out, owner, contrib)
    out /= math.pi * radius * radius
    return out


def kde_gather(index: PointIndex, photons: PhotonMap, it: scene_mod.SurfaceInteraction, radius: float):
    """Single-point photon gather (scalar wrapper over the batch kernel)."""
    if not it.material.is_diffuse:
        raise ValueError("photon gathering requires a diffuse surface point")
    return kde_gather_batch(
        index,
        photons,
        it.position[None, :],
        it.normal[None, :],
        it.wo[None, :],
        it.material.albedo[None, :],
        radius,
    )[0]


def _photon_pass(scene: scene_mod.Scene, cfg: SppmConfig, iteration: int):
    key = fold_key(fold_key(seed_key(cfg.seed), _TAG_PHOTON), iteration)
    photons = trace_photons(scene, cfg.photons_per_iter, cfg.max_photon_bounces, core.Rng.from_key(key))
    index = PointIndex(photons.positions)
    return photons, index


# ---------------------------------------------------------------------------
# SPPM


def _sppm_frame(scene, camera, cfg, t, radius):
    photons, index = _photon_pass(scene, cfg, t)
    pixel_ids, keys, ctrs, o, d = _camera_rays(camera, cfg.seed, t)
    fd = trace_to_first_diffuse(scene, o, d, keys, ctrs)
    w, h = camera.resolution
    frame = fd.emitted.copy()
    found = fd.found
    if np.any(found):
        gathered = kde_gather_batch(
            index, photons, fd.position[found], fd.normal[found], fd.wo[found], fd.albedo[found], radius
        )
        frame[found] += fd.beta[found] * gathered
    return frame.reshape(h, w, 3)


def render_sppm(scene: scene_mod.Scene, camera: scene_mod.Camera, cfg: SppmConfig, threads: int = 1, snapshots=None):
    """Progressive photon-mapping render: mean of per-iteration frames.

    Each iteration traces a fresh photon map, follows camera rays to the
    first diffuse hit, and gathers with the iteration's radius. When
    ``snapshots`` is given (iterable of iteration counts), returns
    (image, {count: running-mean image}); the running mean after t
    iterations is bit-identical to a T=t render with the same seed.
    """
    scene._require_emitters()
    w, h = camera.resolution
    acc = np.zeros((h, w, 3))
    snaps = {}
    wanted = set(int(s) for s in snapshots) if snapshots else set()
    radii = [sppm_radius(t, cfg.initial_radius, cfg.alpha) for t in range(cfg.iterations)]

    def job(t):
        return _sppm_frame(scene, camera, cfg, t, radii[t])

    for t, frame in enumerate(_ordered_map(job, range(cfg.iterations), threads)):
        acc += frame
        if (t + 1) in wanted:
            snaps[t + 1] = acc / (t + 1)
    img = acc / cfg.iterations
    if snapshots is not None:
        return img, snaps
    return img


@dataclass
class SurfacePoints:
    """Diffuse supervision points: position, outgoing direction, and the
    local frame/material data needed to gather radiance there."""

    position: np.ndarray  # (m, 3)
    wo: np.ndarray  # (m, 3)
    normal: np.ndarray  # (m, 3)
    albedo: np.ndarray  # (m, 3)

    def __len__(self) -> int:
        return len(self.position)


def resolve_surface_points(scene: scene_mod.Scene, points) -> SurfacePoints:
    """Recover surface frames for bare (position, outgoing dir) pairs.

    Re-casts the final path segment from just off the surface; raises if
    any point does not land on a diffuse surface (contract violation).
    """
    pts = [(np.asarray(x, dtype=np.float64), np.asarray(w, dtype=np.float64)) for x, w in points]
    xs = np.array([p for p, _ in pts]).reshape(-1, 3)
    wos = np.array([w for _, w in pts]).reshape(-1, 3)
    o = xs + 1e-3 * wos
    hits = scene.intersect_batch(o, -wos)
    ok = hits.valid & (hits.mat_kind == scene_mod.DIFFUSE)
    if not np.all(ok):
        bad = int(np.nonzero(~ok)[0][0])
        raise ValueError(f"point {bad} is not on a diffuse surface")
    if np.any(np.linalg.norm(hits.position - xs, axis=1) > 1e-3):
        bad = int(np.argmax(np.linalg.norm(hits.position - xs, axis=1)))
        raise ValueError(f"point {bad} does not lie on scene geometry")
    return SurfacePoints(hits.position, wos, hits.normal, hits.albedo)


def reference_radiance_at_points(scene: scene_mod.Scene, points, cfg: SppmConfig, threads: int = 1):
    """Photon-mapped outgoing radiance averaged over cfg.iterations passes.

    ``points`` is a :class:`SurfacePoints` batch or an iterable of
    (position, outgoing-direction) pairs at diffuse surfaces. Shares the
    photon-pass seeding of :func:`render_sppm`, so a gather here matches
    the corresponding camera-pass gather for equal seeds.
    """
    scene._require_emitters()
    if not isinstance(points, SurfacePoints):
        points = resolve_surface_points(scene, points)
    m = len(points)
    acc = np.zeros((m, 3))
    radii = [sppm_radius(t, cfg.initial_radius, cfg.alpha) for t in range(cfg.iterations)]

    def job(t):
        photons, index = _photon_pass(scene, cfg, t)
        return kde_gather_batch(index, photons, points.position, points.normal, points.wo, points.albedo, radii[t])

    for contrib in _ordered_map(job, range(cfg.iterations), threads):
        acc += contrib
    return acc / cfg.iterations


# ---------------------------------------------------------------------------
# path tracer (reference integrator)


def _pt_chunk(scene, camera, seed, max_depth, sample_range):
    w, h = camera.resolution
    npix = w * h
    s0, s1 = sample_range
    parts = [_camera_rays(camera, seed, s) for s in range(s0, s1)]
    pixel_ids = np.concatenate([p[0] for p in parts])
    keys = np.concatenate([p[1] for p in parts])
    ctrs = np.concatenate([p[2] for p in parts])
    o = np.concatenate([p[3] for p in parts])
    d = np.concatenate([p[4] for p in parts])
    return _pt_trace(scene, pixel_ids, keys, ctrs, o, d, max_depth, npix)


def _pt_trace(scene, pixel_ids, keys, ctrs, o, d, max_depth, npix):
    img = np.zeros((npix, 3))
    n = len(pixel_ids)
    path = np.arange(n, dtype=np.intp)  # live row -> index into keys/ctrs
    pix = np.asarray(pixel_ids, dtype=np.intp).copy()
    beta = np.ones((n, 3))
    prev_delta = np.ones(n, dtype=bool)
    prev_pdf = np.zeros(n)
    for depth in range(max_depth):
        if path.size == 0:
            break
        hits = scene.intersect_batch(o, d)
        hv = hits.valid
        path = path[hv]
        if path.size == 0:
            break
        pix = pix[hv]
        beta = beta[hv]
        prev_delta = prev_delta[hv]
        prev_pdf = prev_pdf[hv]
        t = hits.t[hv]
        pos = hits.position[hv]
        nrm = hits.normal[hv]
        wo = hits.wo[hv]
        sid = hits.shape_id[hv]
        kind = hits.mat_kind[hv]
        alb = hits.albedo[hv]
        ior = hits.ior[hv]
        entering = hits.entering[hv]
        emission = hits.emission[hv]

        # emission picked up by the BSDF-sampling strategy, MIS-weighted
        # against the light sampler unless the previous vertex was delta
        evis = np.any(emission > 0.0, axis=1)
        if np.any(evis):
            rows = np.nonzero(evis)[0]
            wmis = np.ones(len(rows))
            need = ~prev_delta[rows] & (depth > 0)
            if np.any(need):
                rr = rows[need]
                slot = scene.emitter_slot_of_shape(sid[rr])
                cos_l = vdot(nrm[rr], wo[rr])
                pdf_l = scene.emitter_select_prob(slot) / scene.emitter_area[slot] * t[rr] ** 2 / np.maximum(cos_l, 1e-12)
                wmis[need] = prev_pdf[rr] / (prev_pdf[rr] + pdf_l)
            np.add.at(img, pix[rows], beta[rows] * emission[rows] * wmis[:, None])

        sub = scene_mod.Hits(
            valid=np.ones(len(path), dtype=bool),
            t=t,
            position=pos,
            normal=nrm,
            wo=wo,
            shape_id=sid,
            mat_kind=kind,
            albedo=alb,
            ior=ior,
            emission=emission,
            entering=entering,
        )

        k = keys[path]
        c = ctrs[path]
        diff = kind == scene_mod.DIFFUSE
        if np.any(diff) and scene.has_emitters:
            # next-event estimation at diffuse vertices
            rows = np.nonzero(diff)[0]
            u_pick = draw_unit(k[rows], c[rows])
            u_l1 = draw_unit(k[rows], c[rows] + np.uint64(1))
            u_l2 = draw_unit(k[rows], c[rows] + np.uint64(2))
            slot = scene.pick_emitter(u_pick)
            ly, ln, pdf_area = scene.sample_on_emitter(slot, u_l1, u_l2)
            to_l = ly - pos[rows]
            dist = np.linalg.norm(to_l, axis=1)
            wl = to_l / np.maximum(dist, 1e-12)[:, None]
            cos_x = vdot(nrm[rows], wl)
            cos_l = vdot(ln, -wl)
            cand = (cos_x > 0.0) & (cos_l > 1e-9) & (dist > 1e-6)
            if np.any(cand):
                rr = rows[cand]
                t_sh, _ = scene.geometry.intersect(pos[rr] + _RAY_OFFSET * wl[cand], wl[cand])
                visible = t_sh > dist[cand] - 1e-4
                if np.any(visible):
                    rv = rr[visible]
                    cv = cand.copy()
                    cv[cand] = visible
                    radiance = scene.emitter_radiance[slot[cv]]
                    pdf_l = (
                        scene.emitter_select_prob(slot[cv]) * pdf_area[cv] * dist[cv] ** 2 / cos_l[cv]
                    )
                    f = alb[rv] / math.pi
                    pdf_b = cos_x[cv] / math.pi
                    wmis = pdf_l / (pdf_l + pdf_b)
                    contrib = beta[rv] * f * (cos_x[cv] / pdf_l * wmis)[:, None] * radiance
                    np.add.at(img, pix[rv], contrib)
        ctrs[path[diff]] += np.uint64(3)

        # continuation
        u1 = draw_unit(keys[path], ctrs[path])
        u2 = draw_unit(keys[path], ctrs[path] + np.uint64(1))
        u3 = draw_unit(keys[path], ctrs[path] + np.uint64(2))
        ctrs[path] += np.uint64(3)
        wi, weight, is_delta, pdf_dir = scene_mod.sample_bsdf_batch(sub, u1, u2, u3)
        beta = beta * weight
        keep = np.any(beta > 0.0, axis=1)

        if depth + 1 >= _RR_START:
            p = np.minimum(1.0, beta.max(axis=1))
            u_rr = draw_unit(keys[path], ctrs[path])
            ctrs[path] += np.uint64(1)
            survive = (u_rr < p) & (p > 0.0)
            keep &= survive
            inv_p = np.where(survive, 1.0 / np.maximum(p, 1e-300), 0.0)
            beta = beta * inv_p[:, None]

        path = path[keep]
        if path.size == 0:
            break
        pix = pix[keep]
        beta = beta[keep]
        prev_delta = is_delta[keep]
        prev_pdf = pdf_dir[keep]
        o = pos[keep] + _RAY_OFFSET * wi[keep]
        d = wi[keep]
    return img


def render_pt(
    scene: scene_mod.Scene,
    camera: scene_mod.Camera,
    spp: int,
    max_depth: int = 16,
    rng: core.Rng | int = 0,
    threads: int = 1,
):
    """Unidirectional path tracing with next-event estimation and balance-
    heuristic MIS at diffuse vertices; Russian roulette after depth 3."""
    if spp < 1:
        raise ValueError("spp must be >= 1")
    seed = int(core.as_rng(rng).key) if not isinstance(rng, (int, np.integer)) else int(rng)
    w, h = camera.resolution
    chunk = max(1, min(spp, max(1, (1 << 17) // (w * h))))
    ranges = [(s, min(s + chunk, spp)) for s in range(0, spp, chunk)]

    def job(r):
        return _pt_chunk(scene, camera, seed, max_depth, r)

    acc = np.zeros((w * h, 3))
    for part in _ordered_map(job, ranges, threads):
        acc += part
    return (acc / spp).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# photon-field camera pass


def render_gpf(
    scene: scene_mod.Scene,
    camera: scene_mod.Camera,
    field,
    spp: int = 1,
    seed: int = 0,
    bsdf_modulation: bool = False,
    threads: int = 1,
):
    """Render by querying a trained photon field at first diffuse hits.

    Shares the delta-prefix camera pass with the photon-mapping renderer;
    the field query replaces density estimation. ``bsdf_modulation``
    additionally multiplies queries by the surface albedo (ablation switch;
    off by default because the supervision target already folds the BSDF
    in). Negative field output is clamped at the final pixel.
    """
    if spp < 1:
        raise ValueError("spp must be >= 1")
    w, h = camera.resolution
    field.ensure_index()

    def job(s):
        pixel_ids, keys, ctrs, o, d = _camera_rays(camera, seed, s)
        fd = trace_to_first_diffuse(scene, o, d, keys, ctrs)
        frame = fd.emitted.copy()
        found = fd.found
        if np.any(found):
            queried = field.query_batch(fd.position[found])
            if bsdf_modulation:
                queried = queried * fd.albedo[found]
            frame[found] += fd.beta[found] * queried
        return frame

    acc = np.zeros((w * h, 3))
    for frame in _ordered_map(job, range(spp), threads):
        acc += frame
    img = (acc / spp).reshape(h, w, 3)
    return np.maximum(img, 0.0)
