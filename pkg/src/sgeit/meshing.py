"""Deterministic triangular meshes of the perturbed domain.

A structured polar template of the reference disk is built first: a graded
boundary grid whose vertices include the electrode endpoints, two
boundary-following "ribbon" rings whose depth tracks the local grid
spacing, and staggered interior rings whose density coarsens toward the
center.  The template is triangulated (Delaunay of the template points;
the disk is convex so the boundary polygon is reproduced exactly) and then
pushed forward onto the perturbed domain by scaling the radial coordinate.

For the unperturbed parameter the template is mirror symmetric about the
axis through the middle of the first electrode, which lets discrete
solutions inherit the reflection symmetries of the continuum problem.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay

from sgeit.geometry import (
    TWO_PI,
    ConductivityPartition,
    ElectrodeArc,
    RadialCurve,
    SetupConfig,
    SplineBoundary,
    _arcs_on_curve,
    build_partition,
    electrode_angles,
)


@dataclass(frozen=True)
class MeshResolution:
    target_vertices: int = 2000
    electrode_refinement: float = 4.0

    def __post_init__(self):
        if self.target_vertices < 200:
            raise ValueError("degenerate resolution: need at least 200 vertices")
        if self.electrode_refinement < 1.0:
            raise ValueError("electrode_refinement must be >= 1")


@dataclass
class TriMesh:
    """Conforming triangulation with electrode-tagged boundary edges."""

    vertices: np.ndarray        # (n, 2)
    triangles: np.ndarray       # (t, 3), counterclockwise
    boundary_edges: np.ndarray  # (b, 2) vertex index pairs
    boundary_tags: np.ndarray   # (b,) electrode index 1..M, 0 for gaps
    element_pixel: np.ndarray   # (t,) conductivity pixel of each triangle

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    def min_angle(self) -> float:
        """Smallest interior angle over all triangles, in degrees."""
        p = self.vertices[self.triangles]
        angles = []
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            cosang = np.einsum("ij,ij->i", a, b) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
        return float(np.min(angles))

    def boundary_length(self, tag: int) -> float:
        edges = self.boundary_edges[self.boundary_tags == tag]
        if len(edges) == 0:
            return 0.0
        d = self.vertices[edges[:, 0]] - self.vertices[edges[:, 1]]
        return float(np.sum(np.hypot(d[:, 0], d[:, 1])))

    def edge_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def to_json(self, path) -> None:
        data = {
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "boundary_edges": self.boundary_edges.tolist(),
            "boundary_tags": self.boundary_tags.tolist(),
            "element_pixel": self.element_pixel.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(data, fh)
            fh.write("\n")


def _graded_interval(a: float, b: float, n: int, refinement: float) -> np.ndarray:
    """Subdivide [a, b] into n parts, finer toward both endpoints.

    The endpoint-to-midpoint spacing ratio approaches 1/refinement; the map
    is symmetric so mirror-symmetric inputs stay mirror symmetric.
    """
    t = np.linspace(0.0, 1.0, n + 1)
    strength = (refinement - 1.0) / (refinement + 1.0)
    w = t - strength * np.sin(TWO_PI * t) / TWO_PI
    return a + (b - a) * w


def _boundary_grid(intervals: list[tuple[float, float]], rho0: float,
                   h_bnd: float, refinement: float) -> np.ndarray:
    """Graded boundary angles containing all electrode endpoints."""
    m = len(intervals)
    angles: list[np.ndarray] = []
    for k, (a, b) in enumerate(intervals):
        n_e = max(4, round((b - a) * rho0 / (0.75 * h_bnd)))
        angles.append(_graded_interval(a, b, n_e, refinement)[:-1])
        gap_end = intervals[(k + 1) % m][0] + (TWO_PI if k + 1 == m else 0.0)
        n_g = max(4, round((gap_end - b) * rho0 / h_bnd))
        angles.append(_graded_interval(b, gap_end, n_g, refinement)[:-1])
    grid = np.sort(np.mod(np.concatenate(angles), TWO_PI))
    if np.min(np.diff(grid)) * rho0 < 1e-9:
        raise ValueError("boundary grid degenerate: coincident angles")
    return grid


def _ribbon_template(curve: RadialCurve, rho0: float, phis: np.ndarray,
                     depths: np.ndarray) -> np.ndarray:
    """Template positions whose push-forward offsets the boundary inward.

    The physical offset follows the inward normal of the perturbed curve
    (a purely radial offset would shear the boundary cells wherever the
    curve runs at a tilt); the physical points are then pulled back onto
    the reference disk where the triangulation happens.
    """
    r = np.asarray(curve.radius(phis), dtype=float)
    dr = np.asarray(curve.radius_deriv(phis), dtype=float)
    speed = np.sqrt(r * r + dr * dr)
    cos_p, sin_p = np.cos(phis), np.sin(phis)
    on_curve = np.column_stack([r * cos_p, r * sin_p])
    tangent = np.column_stack([dr * cos_p - r * sin_p, dr * sin_p + r * cos_p]) / speed[:, None]
    normal = np.column_stack([-tangent[:, 1], tangent[:, 0]])  # inward for ccw
    phys = on_curve + depths[:, None] * normal
    r_p = np.hypot(phys[:, 0], phys[:, 1])
    phi_p = np.arctan2(phys[:, 1], phys[:, 0])
    r_t = rho0 * r_p / np.asarray(curve.radius(phi_p), dtype=float)
    return np.column_stack([r_t * np.cos(phi_p), r_t * np.sin(phi_p)])


def _disk_template(intervals: list[tuple[float, float]], curve: RadialCurve,
                   rho0: float, resolution: MeshResolution) -> tuple[np.ndarray, int]:
    """Template points of the reference disk; boundary points come last.

    Returns (points, n_boundary); points[-n_boundary:] lie exactly on the
    circle of radius rho0, sorted by angle.
    """
    target = resolution.target_vertices
    # calibrated so the default configurations land near the target count
    h = 0.80 * math.sqrt(math.pi * rho0**2 / target)
    h_bnd = 0.95 * h

    bnd = _boundary_grid(intervals, rho0, h_bnd, resolution.electrode_refinement)
    nb = len(bnd)
    gaps = np.diff(np.concatenate([bnd, [bnd[0] + TWO_PI]]))  # to next node
    spacing = rho0 * 0.5 * (gaps + np.roll(gaps, 1))          # local arc spacing

    points = [np.zeros((1, 2))]

    # ribbon: mid-staggered ring then an aligned ring, depth following the
    # local boundary spacing so cells stay near-square
    scale = np.asarray(curve.radius(bnd), dtype=float) / rho0
    mid = bnd + 0.5 * gaps
    mid_scale = np.asarray(curve.radius(mid), dtype=float) / rho0
    points.append(_ribbon_template(curve, rho0, mid, 0.85 * rho0 * gaps * mid_scale))
    points.append(_ribbon_template(curve, rho0, bnd, 1.8 * 0.85 * spacing * scale))

    # interior rings, coarsening toward the center
    axis = 0.5 * (intervals[0][0] + intervals[0][1])
    cut_r = rho0 - 2.9 * 0.85 * spacing  # keep clear of the ribbon
    size = lambda r: h * (1.65 - 0.65 * (r / rho0) ** 2)
    r = 0.9 * size(0.0)
    ring = 0
    while r < rho0:
        n_i = max(6, round(TWO_PI * r / size(r)))
        delta = TWO_PI / n_i
        offset = axis + (0.5 * delta if ring % 2 else 0.0)
        phi = np.mod(offset + delta * np.arange(n_i), TWO_PI)
        cut = np.interp(phi, bnd, cut_r, period=TWO_PI)
        keep = r < cut
        if np.any(keep):
            points.append(np.column_stack([r * np.cos(phi[keep]), r * np.sin(phi[keep])]))
        elif r > 0.8 * rho0:
            break
        r += size(r)
        ring += 1

    points.append(np.column_stack([rho0 * np.cos(bnd), rho0 * np.sin(bnd)]))
    return np.vstack(points), nb


def _template_mesh(intervals, curve, rho0, resolution):
    pts, nb = _disk_template(intervals, curve, rho0, resolution)
    tri = Delaunay(pts)
    if len(tri.coplanar):
        raise RuntimeError("template points too close: Delaunay dropped vertices")
    simplices = tri.simplices.copy()
    p = pts[simplices]
    areas = 0.5 * np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    flip = areas < 0
    simplices[flip, 1], simplices[flip, 2] = simplices[flip, 2], simplices[flip, 1].copy()
    return pts, simplices, nb


def _boundary_edges_from(triangles: np.ndarray) -> np.ndarray:
    counts: dict[tuple[int, int], tuple[int, int]] = {}
    seen: dict[tuple[int, int], int] = {}
    for tri in triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            seen[key] = seen.get(key, 0) + 1
            counts[key] = (a, b)  # keep triangle orientation
    edges = [counts[k] for k, c in seen.items() if c == 1]
    return np.array(edges, dtype=int)


def generate_mesh(y_gamma, y_e, cfg: SetupConfig,
                  resolution: MeshResolution | None = None,
                  partition: ConductivityPartition | None = None) -> TriMesh:
    """Mesh of the perturbed domain with electrode-labeled boundary edges."""
    curve = SplineBoundary(y_gamma, cfg)
    thetas = electrode_angles(y_e, cfg)
    arcs = _arcs_on_curve(curve, thetas, cfg.electrode_width)
    return mesh_star_domain(curve, arcs, cfg, resolution=resolution,
                            partition=partition)


def mesh_star_domain(curve: RadialCurve, arcs: list[ElectrodeArc],
                     cfg: SetupConfig,
                     resolution: MeshResolution | None = None,
                     partition: ConductivityPartition | None = None) -> TriMesh:
    """Mesh an arbitrary star-shaped domain given by a radial curve.

    Used both for the parametrized domains and for phantom geometries whose
    radius functions lie outside the spline span.  Pixel labels are pulled
    back through the radial scaling onto the reference disk.
    """
    if resolution is None:
        resolution = MeshResolution()
    if partition is None:
        partition = build_partition(cfg)
    rho0 = cfg.rho0

    intervals = [(a.start_angle, a.end_angle) for a in arcs]
    intervals.sort()
    pts, simplices, nb = _template_mesh(intervals, curve, rho0, resolution)

    # push the template onto the physical domain: scale radii by r(phi)/rho0
    phi = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), TWO_PI)
    scale = np.asarray(curve.radius(phi)) / rho0
    verts = pts * scale[:, None]

    p = verts[simplices]
    areas = 0.5 * np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    if np.any(areas <= 0):
        raise RuntimeError("push-forward inverted a template triangle")

    edges = _boundary_edges_from(simplices)
    mid = 0.5 * (phi[edges[:, 0]] + _unwrap_near(phi[edges[:, 0]], phi[edges[:, 1]]))
    tags = np.zeros(len(edges), dtype=int)
    for arc in arcs:
        width = arc.end_angle - arc.start_angle
        rel = np.mod(mid - arc.start_angle, TWO_PI)
        tags[rel < width] = arc.index

    centroid = p.mean(axis=1)
    c_r = np.hypot(centroid[:, 0], centroid[:, 1])
    c_phi = np.mod(np.arctan2(centroid[:, 1], centroid[:, 0]), TWO_PI)
    ref_r = rho0 * c_r / np.asarray(curve.radius(c_phi))
    element_pixel = partition.pixel_of(ref_r, c_phi)

    return TriMesh(vertices=verts, triangles=simplices,
                   boundary_edges=edges, boundary_tags=tags,
                   element_pixel=element_pixel)


def _unwrap_near(ref: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Shift phi by multiples of 2*pi to land within pi of ref."""
    return phi + TWO_PI * np.round((ref - phi) / TWO_PI)
