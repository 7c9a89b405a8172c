"""Planar geometry: oriented boxes, convex polygon distance, closing speed.

Scalar routines (``min_distance`` and friends) work on arbitrary convex
polygons. The ``box_pair_*`` routines are batched, compiled versions
specialised to rectangles; the planner calls them on every (horizon step, obstacle) pair.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

D_MIN = 1e-3
_REPEAT_TOL = 1e-9

# CCW corner signs in the box frame: front-left, rear-left, rear-right, front-right
_CORNER_SIGNS = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])


class GeometryError(ValueError):
    """Raised for degenerate or non-convex polygons."""


def wrap_angle(a):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    out = a - 2.0 * np.pi * np.ceil((np.asarray(a) - np.pi) / (2.0 * np.pi))
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class OrientedBox:
    center: tuple[float, float]
    heading: float
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise GeometryError(f"box dimensions must be positive, got {self.length}x{self.width}")
        cx, cy = (float(c) for c in self.center)
        if not (math.isfinite(cx) and math.isfinite(cy) and math.isfinite(self.heading)):
            raise GeometryError("box center and heading must be finite")
        object.__setattr__(self, "center", (cx, cy))
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))


class Polygon:
    """Convex polygon with counterclockwise vertices, shape (n, 2)."""

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise GeometryError("polygon needs at least 3 vertices of shape (n, 2)")
        if not np.all(np.isfinite(v)):
            raise GeometryError("polygon vertices must be finite")
        gaps = np.linalg.norm(v - np.roll(v, -1, axis=0), axis=1)
        if np.any(gaps < _REPEAT_TOL):
            raise GeometryError("polygon has repeated vertices")
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if np.any(cross <= 0.0):
            raise GeometryError("polygon must be strictly convex and counterclockwise")
        self.vertices = v

    def __len__(self):
        return len(self.vertices)

    def __repr__(self):
        return f"Polygon({self.vertices.tolist()})"


def box_corners(cx, cy, heading, length, width):
    """World-frame corners of one or many boxes, shape (..., 4, 2), CCW."""
    cx, cy, heading, length, width = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (cx, cy, heading, length, width))
    )
    local = 0.5 * _CORNER_SIGNS * np.stack([length, width], axis=-1)[..., None, :]
    c = np.cos(heading)[..., None]
    s = np.sin(heading)[..., None]
    x = cx[..., None] + c * local[..., 0] - s * local[..., 1]
    y = cy[..., None] + s * local[..., 0] + c * local[..., 1]
    return np.stack([x, y], axis=-1)


def box_to_polygon(b: OrientedBox) -> Polygon:
    return Polygon(box_corners(b.center[0], b.center[1], b.heading, b.length, b.width))


def _sat_separation(pa: np.ndarray, pb: np.ndarray) -> float:
    """Largest gap over all edge normals; <= 0 means the polygons touch or overlap."""
    best = -np.inf
    for p, q in ((pa, pb), (pb, pa)):
        e = np.roll(p, -1, axis=0) - p
        normals = np.stack([e[:, 1], -e[:, 0]], axis=1)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        own = np.einsum("ij,ij->i", normals, p)
        other = (q @ normals.T).min(axis=0)
        best = max(best, float(np.max(other - own)))
    return best


def _point_segment_distances(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    a = poly
    e = np.roll(poly, -1, axis=0) - a
    rel = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pkj,kj->pk", rel, e) / np.einsum("kj,kj->k", e, e), 0.0, 1.0)
    closest = a[None] + t[..., None] * e[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def polygons_overlap(a: Polygon, b: Polygon, tol: float = 1e-12) -> bool:
    """True when the interiors intersect (touching does not count)."""
    return _sat_separation(a.vertices, b.vertices) < -tol


def min_distance(a: Polygon, b: Polygon) -> float:
    """Exact Euclidean distance between two convex polygons, 0 if they meet.

    Disjoint convex sets attain their distance at a vertex of one polygon, so
    checking every vertex against every edge of the other is exact.
    """
    if not isinstance(a, Polygon) or not isinstance(b, Polygon):
        raise GeometryError("min_distance expects Polygon arguments")
    va, vb = a.vertices, b.vertices
    if _sat_separation(va, vb) <= 0.0:
        return 0.0
    d1 = _point_segment_distances(va, vb).min()
    d2 = _point_segment_distances(vb, va).min()
    return float(min(d1, d2))


def closing_speed(z_ego, v_ego, z_obs, v_obs, d_min: float = D_MIN) -> float:
    """Relative velocity projected on the ego-to-obstacle line; positive when closing."""
    rel = np.asarray(z_obs, dtype=float) - np.asarray(z_ego, dtype=float)
    dv = np.asarray(v_ego, dtype=float) - np.asarray(v_obs, dtype=float)
    return float(dv @ rel / max(float(np.hypot(rel[0], rel[1])), d_min))


def closing_speed_batch(z_ego, v_ego, z_obs, v_obs, d_min: float = D_MIN) -> np.ndarray:
    rel = np.asarray(z_obs, dtype=float) - np.asarray(z_ego, dtype=float)
    dv = np.asarray(v_ego, dtype=float) - np.asarray(v_obs, dtype=float)
    sep = np.maximum(np.linalg.norm(rel, axis=-1), d_min)
    return np.sum(dv * rel, axis=-1) / sep


# ---------------------------------------------------------------------------
# Batched box-box queries (numba kernels)


@njit(cache=True)
def _abs_sign(v):
    return 1.0 if v >= 0.0 else -1.0


@njit(cache=True)
def _seg_closest(vx, vy, sx, sy, ex, ey):
    t = ((vx - sx) * ex + (vy - sy) * ey) / (ex * ex + ey * ey)
    t = min(max(t, 0.0), 1.0)
    return sx + t * ex, sy + t * ey


@njit(cache=True)
def pair_signed_distance(ax, ay, ta, la, wa, bx, by, tb, lb, wb, want_grad):
    """Signed distance between two rectangles and its gradient w.r.t. box a's pose.

    Returns ``(sd, d/dx, d/dy, d/dtheta)``; the gradient is zero unless requested.
    """
    ca, sa = np.cos(ta), np.sin(ta)
    cb, sb = np.cos(tb), np.sin(tb)
    dx, dy = bx - ax, by - ay
    # separating axes a.u, a.n, b.u, b.n
    best = -1e300
    kbest = 0
    for k in range(4):
        if k == 0:
            ux, uy = ca, sa
        elif k == 1:
            ux, uy = -sa, ca
        elif k == 2:
            ux, uy = cb, sb
        else:
            ux, uy = -sb, cb
        ea = 0.5 * la * abs(ca * ux + sa * uy) + 0.5 * wa * abs(-sa * ux + ca * uy)
        eb = 0.5 * lb * abs(cb * ux + sb * uy) + 0.5 * wb * abs(-sb * ux + cb * uy)
        gap = abs(dx * ux + dy * uy) - ea - eb
        if gap > best:
            best = gap
            kbest = k

    if best <= 0.0:
        if not want_grad:
            return best, 0.0, 0.0, 0.0
        if kbest == 0:
            ux, uy = ca, sa
        elif kbest == 1:
            ux, uy = -sa, ca
        elif kbest == 2:
            ux, uy = cb, sb
        else:
            ux, uy = -sb, cb
        sg = _abs_sign(dx * ux + dy * uy)
        mx, my = sg * ux, sg * uy  # from a toward b
        pmx, pmy = -my, mx
        if kbest < 2:
            # the axis turns with a, so b's extent along it changes too
            ub = cb * mx + sb * my
            nb = -sb * mx + cb * my
            g = pmx * dx + pmy * dy
            g -= 0.5 * lb * _abs_sign(ub) * (cb * pmx + sb * pmy)
            g -= 0.5 * wb * _abs_sign(nb) * (-sb * pmx + cb * pmy)
        else:
            ua = ca * mx + sa * my
            na = -sa * mx + ca * my
            g = -0.5 * la * _abs_sign(ua) * na + 0.5 * wa * _abs_sign(na) * ua
        return best, -mx, -my, g

    # disjoint: every vertex of one box against every edge of the other
    hla, hwa, hlb, hwb = 0.5 * la, 0.5 * wa, 0.5 * lb, 0.5 * wb
    pax = np.empty(4)
    pay = np.empty(4)
    pbx = np.empty(4)
    pby = np.empty(4)
    for k in range(4):
        sx = 1.0 if (k == 0 or k == 3) else -1.0
        sy = 1.0 if k < 2 else -1.0
        pax[k] = ax + ca * sx * hla - sa * sy * hwa
        pay[k] = ay + sa * sx * hla + ca * sy * hwa
        pbx[k] = bx + cb * sx * hlb - sb * sy * hwb
        pby[k] = by + sb * sx * hlb + cb * sy * hwb
    dmin2 = 1e300
    px = py = qx = qy = 0.0
    for v in range(4):
        for e in range(4):
            e1 = (e + 1) % 4
            cx, cy = _seg_closest(pax[v], pay[v], pbx[e], pby[e], pbx[e1] - pbx[e], pby[e1] - pby[e])
            d2 = (pax[v] - cx) ** 2 + (pay[v] - cy) ** 2
            if d2 < dmin2:
                dmin2 = d2
                px, py, qx, qy = pax[v], pay[v], cx, cy
            cx, cy = _seg_closest(pbx[v], pby[v], pax[e], pay[e], pax[e1] - pax[e], pay[e1] - pay[e])
            d2 = (pbx[v] - cx) ** 2 + (pby[v] - cy) ** 2
            if d2 < dmin2:
                dmin2 = d2
                px, py, qx, qy = cx, cy, pbx[v], pby[v]
    d = np.sqrt(dmin2)
    if not want_grad:
        return d, 0.0, 0.0, 0.0
    nx, ny = (px - qx) / d, (py - qy) / d
    return d, nx, ny, -nx * (py - ay) + ny * (px - ax)


@njit(cache=True)
def _box_pair_kernel(ego, ego_dims, obs, obs_dims, want_grad):
    m = ego.shape[0]
    sd = np.empty(m)
    grad = np.zeros((m, 3))
    for i in range(m):
        r = pair_signed_distance(ego[i, 0], ego[i, 1], ego[i, 2], ego_dims[i, 0], ego_dims[i, 1],
                                 obs[i, 0], obs[i, 1], obs[i, 2], obs_dims[i, 0], obs_dims[i, 1],
                                 want_grad)
        sd[i] = r[0]
        grad[i, 0] = r[1]
        grad[i, 1] = r[2]
        grad[i, 2] = r[3]
    return sd, grad


def box_pair_signed_distance(ego_pose, ego_dims, obs_pose, obs_dims, with_grad=False):
    """Signed distance between batches of rectangle pairs.

    Parameters
    ----------
    ego_pose, obs_pose : array, shape (M, 3) or (3,)
        Box centers and headings ``(x, y, theta)``; a single pose broadcasts.
    ego_dims, obs_dims : array, shape (M, 2) or (2,)
        ``(length, width)`` per box.
    with_grad : bool
        Also return the gradient with respect to the ego pose.

    Returns
    -------
    sd : array, shape (M,)
        Exact distance for disjoint pairs; minus the penetration depth
        (separating-axis gap) for overlapping pairs.
    grad : array, shape (M, 3)
        Only when ``with_grad``; derivative of ``sd`` w.r.t. ego ``(x, y, theta)``.
    """
    ego_pose = np.atleast_2d(np.asarray(ego_pose, dtype=float))
    obs_pose = np.atleast_2d(np.asarray(obs_pose, dtype=float))
    if ego_pose.shape[-1] != 3 or obs_pose.shape[-1] != 3 or ego_pose.ndim != 2 or obs_pose.ndim != 2:
        raise GeometryError("poses must have shape (M, 3)")
    m = max(len(ego_pose), len(obs_pose))
    try:
        ego_pose = np.ascontiguousarray(np.broadcast_to(ego_pose, (m, 3)))
        obs_pose = np.ascontiguousarray(np.broadcast_to(obs_pose, (m, 3)))
    except ValueError:
        raise GeometryError("pose batches must have equal length or length 1") from None
    ego_dims = np.ascontiguousarray(np.broadcast_to(np.asarray(ego_dims, dtype=float), (m, 2)))
    obs_dims = np.ascontiguousarray(np.broadcast_to(np.asarray(obs_dims, dtype=float), (m, 2)))
    sd, grad = _box_pair_kernel(ego_pose, ego_dims, obs_pose, obs_dims, with_grad)
    return (sd, grad) if with_grad else sd


def box_pair_distance(ego_pose, ego_dims, obs_pose, obs_dims):
    """Exact distance for batches of rectangle pairs (0 when touching/overlapping)."""
    return np.maximum(box_pair_signed_distance(ego_pose, ego_dims, obs_pose, obs_dims), 0.0)


def box_pair_overlap(ego_pose, ego_dims, obs_pose, obs_dims, tol: float = 1e-12):
    """Interior overlap test for batches of rectangle pairs."""
    return box_pair_signed_distance(ego_pose, ego_dims, obs_pose, obs_dims) < -tol


def box_circumradius(dims):
    dims = np.asarray(dims, dtype=float)
    return 0.5 * np.hypot(dims[..., 0], dims[..., 1])
