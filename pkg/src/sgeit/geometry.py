"""Parameter-to-physics maps for the measurement set-up.

All unknowns live in the hypercube [-1/2, 1/2]^N with N = n_sigma + n_gamma
+ 2*M, flattened in the fixed order (y_sigma, y_gamma, y_e, y_z).  The maps
implemented here turn those parameters into a boundary curve (perturbed
circle spanned by periodic quadratic B-splines), a homeomorphism onto the
reference disk, electrode arcs of fixed width, a pixelated conductivity and
per-electrode contact resistances.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

TWO_PI = 2.0 * math.pi


class NonOverlapViolation(ValueError):
    """Electrodes would overlap or change order on the boundary curve."""


# ---------------------------------------------------------------------------
# configuration and parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SetupConfig:
    """Fixed constants of the measurement set-up.

    ``sigma_bounds`` and ``zeta_bounds`` are the attainable ranges of the
    conductivity pixels and contact resistances; ``rho_minus``/``rho_plus``
    bound the radial coordinate of the boundary curve.
    """

    num_electrodes: int
    electrode_width: float
    rho_minus: float
    rho_plus: float
    angle_offset: float
    sigma_bounds: tuple[float, float]
    zeta_bounds: tuple[float, float]
    n_sigma: int
    n_gamma: int
    first_electrode_fixed: bool = True

    def __post_init__(self):
        if self.num_electrodes < 2:
            raise ValueError("need at least 2 electrodes")
        if not (0.0 < self.rho_minus <= self.rho_plus):
            raise ValueError("radii must satisfy 0 < rho_minus <= rho_plus")
        if self.angle_offset < 0.0:
            raise ValueError("angle_offset must be >= 0")
        if self.electrode_width <= 0.0:
            raise ValueError("electrode_width must be > 0")
        s_lo, s_hi = self.sigma_bounds
        if not (0.0 < s_lo <= s_hi):
            raise ValueError("sigma_bounds must satisfy 0 < lo <= hi")
        z_lo, z_hi = self.zeta_bounds
        if not (0.0 < z_lo <= z_hi):
            raise ValueError("zeta_bounds must satisfy 0 < lo <= hi")
        if self.n_sigma < 1:
            raise ValueError("n_sigma must be >= 1")
        if self.n_gamma < 3:
            raise ValueError("n_gamma must be >= 3")
        # Electrode-fit requirement: M electrodes of width omega must fit on
        # the shortest possible boundary curve.
        if TWO_PI * self.rho_minus <= self.num_electrodes * self.electrode_width:
            raise NonOverlapViolation(
                f"electrodes cannot fit: 2*pi*rho_minus = "
                f"{TWO_PI * self.rho_minus:.6g} <= M*omega = "
                f"{self.num_electrodes * self.electrode_width:.6g}"
            )

    @property
    def rho0(self) -> float:
        return 0.5 * (self.rho_minus + self.rho_plus)

    @property
    def num_parameters(self) -> int:
        return self.n_sigma + self.n_gamma + 2 * self.num_electrodes

    def block_slices(self) -> dict[str, slice]:
        """Slices of the flat parameter vector in the fixed block order."""
        ns, ng, m = self.n_sigma, self.n_gamma, self.num_electrodes
        return {
            "sigma": slice(0, ns),
            "gamma": slice(ns, ns + ng),
            "e": slice(ns + ng, ns + ng + m),
            "z": slice(ns + ng + m, ns + ng + 2 * m),
        }

    def to_dict(self) -> dict:
        return {
            "num_electrodes": self.num_electrodes,
            "electrode_width": self.electrode_width,
            "rho_minus": self.rho_minus,
            "rho_plus": self.rho_plus,
            "angle_offset": self.angle_offset,
            "sigma_bounds": list(self.sigma_bounds),
            "zeta_bounds": list(self.zeta_bounds),
            "n_sigma": self.n_sigma,
            "n_gamma": self.n_gamma,
            "first_electrode_fixed": self.first_electrode_fixed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SetupConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown SetupConfig keys: {sorted(extra)}")
        missing = known - set(data) - {"first_electrode_fixed"}
        if missing:
            raise ValueError(f"missing SetupConfig keys: {sorted(missing)}")
        kwargs = dict(data)
        kwargs["sigma_bounds"] = tuple(kwargs["sigma_bounds"])
        kwargs["zeta_bounds"] = tuple(kwargs["zeta_bounds"])
        return cls(**kwargs)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SetupConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class ParameterVector:
    """The parameter vector y = (y_sigma, y_gamma, y_e, y_z)."""

    y_sigma: np.ndarray
    y_gamma: np.ndarray
    y_e: np.ndarray
    y_z: np.ndarray

    def __post_init__(self):
        for name in ("y_sigma", "y_gamma", "y_e", "y_z"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.y_e.shape != self.y_z.shape:
            raise ValueError("y_e and y_z must both have one entry per electrode")

    @property
    def total_length(self) -> int:
        return len(self.y_sigma) + len(self.y_gamma) + len(self.y_e) + len(self.y_z)

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.y_sigma, self.y_gamma, self.y_e, self.y_z])

    @classmethod
    def from_flat(cls, y: np.ndarray, cfg: SetupConfig) -> "ParameterVector":
        y = np.asarray(y, dtype=float)
        if y.shape != (cfg.num_parameters,):
            raise ValueError(
                f"expected flat vector of length {cfg.num_parameters}, got {y.shape}"
            )
        s = cfg.block_slices()
        return cls(y[s["sigma"]], y[s["gamma"]], y[s["e"]], y[s["z"]])

    @classmethod
    def zero(cls, cfg: SetupConfig) -> "ParameterVector":
        return cls.from_flat(np.zeros(cfg.num_parameters), cfg)

    def in_hypercube(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.to_flat()) <= 0.5 + tol))


# ---------------------------------------------------------------------------
# periodic quadratic B-splines and the boundary curve
# ---------------------------------------------------------------------------

def _b2(t: np.ndarray) -> np.ndarray:
    """Cardinal quadratic B-spline on [0, 3] (unit knot spacing)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    m = (t >= 0.0) & (t < 1.0)
    out[m] = 0.5 * t[m] ** 2
    m = (t >= 1.0) & (t < 2.0)
    out[m] = 0.5 * (-2.0 * t[m] ** 2 + 6.0 * t[m] - 3.0)
    m = (t >= 2.0) & (t < 3.0)
    out[m] = 0.5 * (3.0 - t[m]) ** 2
    return out


def _b2_deriv(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    m = (t >= 0.0) & (t < 1.0)
    out[m] = t[m]
    m = (t >= 1.0) & (t < 2.0)
    out[m] = 3.0 - 2.0 * t[m]
    m = (t >= 2.0) & (t < 3.0)
    out[m] = t[m] - 3.0
    return out


def bspline_basis(i: int, phi, n_gamma: int):
    """Value of the i-th (1-based) periodic quadratic B-spline at angle phi.

    The splines sit on uniform knots k*2*pi/n_gamma, have support of angular
    length 6*pi/n_gamma and form a partition of unity.
    """
    if not 1 <= i <= n_gamma:
        raise IndexError(f"spline index {i} out of range 1..{n_gamma}")
    h = TWO_PI / n_gamma
    u = np.mod(np.asarray(phi, dtype=float) / h - (i - 1), n_gamma)
    return _b2(u)


def bspline_basis_deriv(i: int, phi, n_gamma: int):
    if not 1 <= i <= n_gamma:
        raise IndexError(f"spline index {i} out of range 1..{n_gamma}")
    h = TWO_PI / n_gamma
    u = np.mod(np.asarray(phi, dtype=float) / h - (i - 1), n_gamma)
    return _b2_deriv(u) / h


def _spline_matrix(phi: np.ndarray, n_gamma: int) -> np.ndarray:
    """All spline values at the given angles, shape (len(phi), n_gamma)."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    return np.stack([bspline_basis(i, phi, n_gamma) for i in range(1, n_gamma + 1)], axis=1)


def boundary_radius(phi, y_gamma, cfg: SetupConfig):
    """Radial coordinate of the boundary curve at angle(s) phi."""
    y_gamma = np.asarray(y_gamma, dtype=float)
    scalar = np.isscalar(phi)
    phi_arr = np.atleast_1d(np.asarray(phi, dtype=float))
    vals = cfg.rho0 + (cfg.rho_plus - cfg.rho_minus) * (_spline_matrix(phi_arr, cfg.n_gamma) @ y_gamma)
    return float(vals[0]) if scalar else vals


def boundary_radius_deriv(phi, y_gamma, cfg: SetupConfig):
    y_gamma = np.asarray(y_gamma, dtype=float)
    scalar = np.isscalar(phi)
    phi_arr = np.atleast_1d(np.asarray(phi, dtype=float))
    mat = np.stack(
        [bspline_basis_deriv(i, phi_arr, cfg.n_gamma) for i in range(1, cfg.n_gamma + 1)],
        axis=1,
    )
    vals = (cfg.rho_plus - cfg.rho_minus) * (mat @ y_gamma)
    return float(vals[0]) if scalar else vals


class RadialCurve:
    """A closed star-shaped curve given by a 2*pi-periodic radius function.

    Subclasses provide ``radius``/``radius_deriv`` and a list of breakpoint
    angles between which the radius is smooth; arc lengths are then computed
    by per-interval Gauss quadrature and electrode end angles by root
    finding on the cumulative arc length.
    """

    breakpoints: np.ndarray  # sorted, in [0, 2*pi)

    def radius(self, phi):  # pragma: no cover - interface
        raise NotImplementedError

    def radius_deriv(self, phi):  # pragma: no cover - interface
        raise NotImplementedError

    def speed(self, phi):
        r = self.radius(phi)
        dr = self.radius_deriv(phi)
        return np.sqrt(r * r + dr * dr)

    def points(self, phi) -> np.ndarray:
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        r = self.radius(phi)
        return np.column_stack([r * np.cos(phi), r * np.sin(phi)])

    # 24-point Gauss-Legendre is far beyond machine precision for the smooth
    # pieces between breakpoints.
    _gauss = np.polynomial.legendre.leggauss(24)

    def _segments(self, a: float, b: float) -> list[tuple[float, float]]:
        """Split [a, b] at (periodically repeated) breakpoints."""
        if b <= a:
            return []
        cuts = [a]
        if len(self.breakpoints):
            k0 = math.floor(a / TWO_PI)
            k1 = math.ceil(b / TWO_PI) + 1
            for k in range(k0, k1):
                for bp in self.breakpoints:
                    c = bp + k * TWO_PI
                    if a < c < b:
                        cuts.append(c)
        cuts.append(b)
        cuts = sorted(set(cuts))
        # keep quadrature panels short even on breakpoint-free curves
        out = []
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            n_sub = max(1, math.ceil((hi - lo) / (math.pi / 8.0)))
            edges = np.linspace(lo, hi, n_sub + 1)
            out.extend(zip(edges[:-1], edges[1:]))
        return out

    def arclength(self, a: float, b: float) -> float:
        """Arc length along the curve from angle a to angle b >= a."""
        xg, wg = self._gauss
        total = 0.0
        for lo, hi in self._segments(float(a), float(b)):
            half = 0.5 * (hi - lo)
            mid = 0.5 * (hi + lo)
            total += half * float(np.dot(wg, self.speed(mid + half * xg)))
        return total

    def total_length(self) -> float:
        return self.arclength(0.0, TWO_PI)

    def angle_at_arclength(self, start: float, s: float) -> float:
        """Angle phi > start with arc length s from start, measured ccw."""
        if s < 0:
            raise ValueError("arc length must be >= 0")
        if s == 0:
            return float(start)
        probe = np.linspace(0.0, TWO_PI, 720, endpoint=False)
        smin = float(np.min(self.speed(probe))) * 0.999
        smax = float(np.max(self.speed(probe))) * 1.001
        lo = start + s / smax
        hi = start + s / smin
        f = lambda phi: self.arclength(start, phi) - s
        # widen the bracket defensively; speed extrema come from sampling
        flo, fhi = f(lo), f(hi)
        while flo > 0:
            lo = start + 0.5 * (lo - start)
            flo = f(lo)
        while fhi < 0:
            hi = start + 2.0 * (hi - start)
            fhi = f(hi)
        return float(brentq(f, lo, hi, xtol=1e-12, rtol=8.9e-16))


class SplineBoundary(RadialCurve):
    """Boundary curve spanned by the periodic quadratic B-splines."""

    def __init__(self, y_gamma, cfg: SetupConfig):
        self.y_gamma = np.asarray(y_gamma, dtype=float)
        if self.y_gamma.shape != (cfg.n_gamma,):
            raise ValueError(f"y_gamma must have length {cfg.n_gamma}")
        self.cfg = cfg
        if np.any(self.y_gamma != 0.0):
            self.breakpoints = np.arange(cfg.n_gamma) * (TWO_PI / cfg.n_gamma)
        else:
            self.breakpoints = np.array([])  # exact circle

    def radius(self, phi):
        return boundary_radius(phi, self.y_gamma, self.cfg)

    def radius_deriv(self, phi):
        return boundary_radius_deriv(phi, self.y_gamma, self.cfg)


# ---------------------------------------------------------------------------
# homeomorphism between the perturbed and the reference disk
# ---------------------------------------------------------------------------

def map_to_reference(point, y_gamma, cfg: SetupConfig, tol: float = 1e-9):
    """Map polar point(s) (r, phi) in the perturbed domain onto the disk.

    Scales the radial coordinate by rho0 / r(phi, y_gamma); raises if a
    point lies outside the perturbed domain.
    """
    r, phi = point
    r = np.asarray(r, dtype=float)
    phi = np.asarray(phi, dtype=float)
    rb = boundary_radius(phi, y_gamma, cfg)
    if np.any(r > np.asarray(rb) * (1.0 + tol)):
        raise ValueError("point outside the perturbed domain")
    return cfg.rho0 * r / rb, phi


def map_from_reference(point, y_gamma, cfg: SetupConfig, tol: float = 1e-9):
    """Inverse of :func:`map_to_reference` (reference disk -> perturbed)."""
    r, phi = point
    r = np.asarray(r, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(r > cfg.rho0 * (1.0 + tol)):
        raise ValueError("point outside the reference disk")
    rb = boundary_radius(phi, y_gamma, cfg)
    return r * rb / cfg.rho0, phi


# ---------------------------------------------------------------------------
# electrodes
# ---------------------------------------------------------------------------

def electrode_angles(y_e, cfg: SetupConfig) -> np.ndarray:
    """Starting angles of the M electrodes."""
    y_e = np.asarray(y_e, dtype=float)
    m = cfg.num_electrodes
    if y_e.shape != (m,):
        raise ValueError(f"y_e must have length {m}")
    theta = np.arange(m) * (TWO_PI / m) + 2.0 * cfg.angle_offset * y_e
    if cfg.first_electrode_fixed:
        theta[0] = 0.0
    return np.mod(theta, TWO_PI)


@dataclass(frozen=True)
class ElectrodeArc:
    """One electrode as an arc of the boundary curve.

    ``end_angle`` may exceed 2*pi when the arc wraps; the arc covers the
    open angular interval (start_angle, end_angle) and has arc length equal
    to the electrode width along the perturbed curve.
    """

    index: int
    start_angle: float
    end_angle: float
    arc_length: float


def _arcs_on_curve(curve: RadialCurve, thetas: np.ndarray, omega: float) -> list[ElectrodeArc]:
    m = len(thetas)
    order = np.argsort(thetas)
    # counterclockwise gaps between consecutive starting points must exceed
    # the electrode width
    for k in range(m):
        a = thetas[order[k]]
        b = thetas[order[(k + 1) % m]]
        if k + 1 == m:
            b += TWO_PI
        gap = curve.arclength(a, b)
        if gap <= omega:
            raise NonOverlapViolation(
                f"electrodes {order[k] + 1} and {order[(k + 1) % m] + 1} overlap: "
                f"arc distance {gap:.6g} <= width {omega:.6g}"
            )
    arcs = []
    for idx, theta in enumerate(thetas):
        end = curve.angle_at_arclength(theta, omega)
        arcs.append(ElectrodeArc(index=idx + 1, start_angle=float(theta),
                                 end_angle=end, arc_length=omega))
    return arcs


def electrode_arcs(y_gamma, y_e, cfg: SetupConfig) -> list[ElectrodeArc]:
    """Arcs occupied by the electrodes on the perturbed boundary curve."""
    curve = SplineBoundary(y_gamma, cfg)
    thetas = electrode_angles(y_e, cfg)
    return _arcs_on_curve(curve, thetas, cfg.electrode_width)


# ---------------------------------------------------------------------------
# conductivity pixels and contact resistances
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConductivityPartition:
    """Annular-sector partition of the reference disk into n_sigma pixels.

    Rings have equal radial width; ring j (1-based, innermost first) is
    split into ``sectors[j-1]`` equal angular sectors.  Pixels are indexed
    ring-major, counterclockwise from angle 0 within each ring.
    """

    rho0: float
    sectors: tuple[int, ...]

    @property
    def n_rings(self) -> int:
        return len(self.sectors)

    @property
    def n_pixels(self) -> int:
        return int(sum(self.sectors))

    @property
    def ring_edges(self) -> np.ndarray:
        return np.linspace(0.0, self.rho0, self.n_rings + 1)

    def pixel_bounds(self, i: int) -> tuple[float, float, float, float]:
        """(r_in, r_out, phi_lo, phi_hi) of pixel i (0-based)."""
        if not 0 <= i < self.n_pixels:
            raise IndexError(f"pixel index {i} out of range")
        offset = 0
        for j, s in enumerate(self.sectors):
            if i < offset + s:
                k = i - offset
                edges = self.ring_edges
                return (edges[j], edges[j + 1], TWO_PI * k / s, TWO_PI * (k + 1) / s)
            offset += s
        raise AssertionError("unreachable")

    def centroids(self) -> np.ndarray:
        """Polar means (r, phi) of every pixel, shape (n_pixels, 2)."""
        out = np.empty((self.n_pixels, 2))
        i = 0
        edges = self.ring_edges
        for j, s in enumerate(self.sectors):
            r_mid = 0.5 * (edges[j] + edges[j + 1])
            for k in range(s):
                out[i] = (r_mid, TWO_PI * (k + 0.5) / s)
                i += 1
        return out

    def centroids_xy(self) -> np.ndarray:
        c = self.centroids()
        return np.column_stack([c[:, 0] * np.cos(c[:, 1]), c[:, 0] * np.sin(c[:, 1])])

    def areas(self) -> np.ndarray:
        out = np.empty(self.n_pixels)
        i = 0
        edges = self.ring_edges
        for j, s in enumerate(self.sectors):
            a = math.pi * (edges[j + 1] ** 2 - edges[j] ** 2) / s
            out[i:i + s] = a
            i += s
        return out

    def pixel_of(self, r, phi) -> np.ndarray:
        """Pixel indices of polar points in the reference disk (vectorized)."""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        phi = np.mod(np.atleast_1d(np.asarray(phi, dtype=float)), TWO_PI)
        width = self.rho0 / self.n_rings
        ring = np.clip((r / width).astype(int), 0, self.n_rings - 1)
        sectors = np.asarray(self.sectors)
        ring_offsets = np.concatenate([[0], np.cumsum(sectors)[:-1]])
        s = sectors[ring]
        sector = np.clip((phi / TWO_PI * s).astype(int), 0, s - 1)
        return ring_offsets[ring] + sector

    def to_dict(self) -> dict:
        return {"rho0": self.rho0, "n_rings": self.n_rings, "sectors": list(self.sectors)}


def build_partition(cfg: SetupConfig) -> ConductivityPartition:
    """Deterministic near-equal-area partition with n_sigma pixels.

    Uses round(sqrt(n_sigma)) equal-width rings and apportions sectors
    proportionally to ring area (largest-remainder rounding), which gives
    exactly 2j-1 sectors in ring j whenever n_sigma is a perfect square.
    """
    n = cfg.n_sigma
    if n < 1:
        raise ValueError(f"unsupported n_sigma: {n}")
    n_rings = max(1, round(math.sqrt(n)))
    ideal = np.array([n * (2 * j - 1) / n_rings**2 for j in range(1, n_rings + 1)])
    sectors = np.floor(ideal).astype(int)
    remainder = ideal - sectors
    short = n - int(sectors.sum())
    for j in np.argsort(-remainder, kind="stable")[:short]:
        sectors[j] += 1
    while np.any(sectors == 0):
        sectors[np.argmax(sectors)] -= 1
        sectors[np.argmin(sectors)] += 1
    assert sectors.sum() == n
    return ConductivityPartition(rho0=cfg.rho0, sectors=tuple(int(s) for s in sectors))


def sigma_values(y_sigma, cfg: SetupConfig) -> np.ndarray:
    """Per-pixel conductivities from the log-uniform parameter map."""
    y_sigma = np.asarray(y_sigma, dtype=float)
    lo, hi = cfg.sigma_bounds
    return np.exp(0.5 * math.log(lo * hi) + math.log(hi / lo) * y_sigma)


def contact_resistances(y_z, cfg: SetupConfig) -> np.ndarray:
    """Per-electrode contact resistances from the log-uniform map."""
    y_z = np.asarray(y_z, dtype=float)
    if y_z.shape != (cfg.num_electrodes,):
        raise ValueError(f"y_z must have length {cfg.num_electrodes}")
    lo, hi = cfg.zeta_bounds
    return np.exp(0.5 * math.log(lo * hi) + math.log(hi / lo) * y_z)


def conductivity_at(points_xy, y_sigma, y_gamma, cfg: SetupConfig,
                    partition: ConductivityPartition) -> np.ndarray:
    """Conductivity at Cartesian points of the perturbed domain.

    Points are pulled back onto the reference disk and assigned the value
    of the pixel they land in.
    """
    pts = np.atleast_2d(np.asarray(points_xy, dtype=float))
    r = np.hypot(pts[:, 0], pts[:, 1])
    phi = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), TWO_PI)
    r_ref, phi_ref = map_to_reference((r, phi), y_gamma, cfg)
    vals = sigma_values(y_sigma, cfg)
    return vals[partition.pixel_of(r_ref, phi_ref)]
