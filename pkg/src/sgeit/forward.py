"""FEM assembly and solution of the complete electrode model.

Nodal potentials use piecewise linear elements; electrode potentials are
expanded in the mean-free basis e_j - (1/M) 1, j = 1..M-1, which grounds
the system exactly (the assembled matrix is symmetric positive definite)
and makes every electrode-voltage column zero mean by construction.
Electrode boundary terms are integrated edge-wise in closed form.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from sgeit.geometry import (
    ParameterVector,
    SetupConfig,
    build_partition,
    contact_resistances,
    sigma_values,
)
from sgeit.meshing import MeshResolution, TriMesh, generate_mesh


class SolverBreakdown(RuntimeError):
    """Linear solve failed to reach the required residual."""


def default_currents(num_electrodes: int) -> np.ndarray:
    """Current basis I^m = e_1 - e_{m+1}, m = 1..M-1 (columns)."""
    m = num_electrodes
    if m < 2:
        raise ValueError("need at least 2 electrodes")
    out = np.zeros((m, m - 1))
    out[0, :] = 1.0
    out[np.arange(1, m), np.arange(m - 1)] = -1.0
    return out


def validate_current_matrix(currents: np.ndarray, num_electrodes: int | None = None) -> np.ndarray:
    currents = np.asarray(currents, dtype=float)
    if currents.ndim != 2 or currents.shape[1] != currents.shape[0] - 1:
        raise ValueError(f"current matrix must be M x (M-1), got {currents.shape}")
    if num_electrodes is not None and currents.shape[0] != num_electrodes:
        raise ValueError(
            f"current matrix has {currents.shape[0]} rows, expected {num_electrodes}")
    sums = currents.sum(axis=0)
    if np.any(np.abs(sums) > 1e-12 * max(1.0, np.abs(currents).max())):
        raise ValueError("current matrix columns must sum to zero")
    if np.linalg.matrix_rank(currents) != currents.shape[1]:
        raise ValueError("current matrix columns must be linearly independent")
    return currents


def mean_free_basis(num_electrodes: int) -> np.ndarray:
    """Columns e_j - (1/M) 1 for j = 1..M-1, spanning the mean-free space."""
    m = num_electrodes
    basis = -np.full((m, m - 1), 1.0 / m)
    basis[np.arange(m - 1), np.arange(m - 1)] += 1.0
    return basis


@dataclass
class ForwardSolution:
    electrode_voltages: np.ndarray  # (M, M-1), zero-mean columns
    nodal_potentials: np.ndarray    # (n, M-1)

    def stacked(self) -> np.ndarray:
        """Voltages as one length Q = M(M-1) vector (columns stacked)."""
        return np.ravel(self.electrode_voltages, order="F")


class MeshOperator:
    """Precomputed assembly data for one mesh (reused across parameters)."""

    def __init__(self, mesh: TriMesh, num_electrodes: int):
        self.mesh = mesh
        self.num_electrodes = num_electrodes
        v = mesh.vertices
        tri = mesh.triangles
        p0, p1, p2 = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
        area = 0.5 * np.cross(p1 - p0, p2 - p0)
        if np.any(area <= 0):
            raise ValueError("mesh has non-positive triangle areas")
        b = np.stack([p1[:, 1] - p2[:, 1], p2[:, 1] - p0[:, 1], p0[:, 1] - p1[:, 1]], axis=1)
        c = np.stack([p2[:, 0] - p1[:, 0], p0[:, 0] - p2[:, 0], p1[:, 0] - p0[:, 0]], axis=1)
        # element stiffness without conductivity: (b_i b_j + c_i c_j)/(4A)
        geom = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :])
        geom /= (4.0 * area)[:, None, None]
        self._geom = geom.reshape(len(tri), 9)
        self._rows = np.repeat(tri, 3, axis=1).ravel()
        self._cols = np.tile(tri, (1, 3)).ravel()

        e_mask = mesh.boundary_tags > 0
        edges = mesh.boundary_edges[e_mask]
        self._edge_tag = mesh.boundary_tags[e_mask] - 1
        d = v[edges[:, 0]] - v[edges[:, 1]]
        self._edge_len = np.hypot(d[:, 0], d[:, 1])
        self._edge_nodes = edges
        self.n_nodes = len(v)

    def assemble(self, sigma_per_element, z, currents) -> tuple[sp.csr_matrix, np.ndarray]:
        sigma_per_element = np.asarray(sigma_per_element, dtype=float)
        z = np.asarray(z, dtype=float)
        m = self.num_electrodes
        if np.any(sigma_per_element <= 0):
            raise ValueError("conductivities must be positive")
        if z.shape != (m,) or np.any(z <= 0):
            raise ValueError("contact resistances must be positive, one per electrode")
        currents = validate_current_matrix(currents, m)
        present = np.zeros(m, dtype=bool)
        present[np.unique(self._edge_tag)] = True
        driven = np.any(currents != 0.0, axis=1)
        if np.any(driven & ~present):
            missing = int(np.nonzero(driven & ~present)[0][0]) + 1
            raise ValueError(f"electrode {missing} carries current but has no boundary edges")

        n = self.n_nodes
        data = (sigma_per_element[:, None] * self._geom).ravel()

        inv_z = 1.0 / z[self._edge_tag]
        ell = self._edge_len
        i, j = self._edge_nodes[:, 0], self._edge_nodes[:, 1]
        s_rows = np.concatenate([i, j, i, j])
        s_cols = np.concatenate([i, j, j, i])
        diag = ell * inv_z / 3.0
        off = ell * inv_z / 6.0
        s_data = np.concatenate([diag, diag, off, off])

        stiff = sp.coo_matrix(
            (np.concatenate([data, s_data]),
             (np.concatenate([self._rows, s_rows]), np.concatenate([self._cols, s_cols]))),
            shape=(n, n)).tocsr()

        t_mat = np.zeros((n, m))
        half = 0.5 * ell * inv_z
        np.add.at(t_mat, (i, self._edge_tag), half)
        np.add.at(t_mat, (j, self._edge_tag), half)
        g_diag = np.zeros(m)
        np.add.at(g_diag, self._edge_tag, ell * inv_z)

        basis = mean_free_basis(m)
        coupling = -(t_mat @ basis)
        # fill the electrode block symmetrically, entry by entry
        block = np.empty((m - 1, m - 1))
        for a in range(m - 1):
            for bcol in range(a, m - 1):
                val = float(np.dot(g_diag * basis[:, a], basis[:, bcol]))
                block[a, bcol] = val
                block[bcol, a] = val

        a_mat = sp.bmat([[stiff, sp.csr_matrix(coupling)],
                         [sp.csr_matrix(coupling.T), sp.csr_matrix(block)]],
                        format="csr")
        rhs = np.vstack([np.zeros((n, currents.shape[1])), basis.T @ currents])
        return a_mat, rhs


def assemble(mesh: TriMesh, sigma_per_element, z, currents) -> tuple[sp.csr_matrix, np.ndarray]:
    """Assemble the grounded CEM system for one parameter realization."""
    return MeshOperator(mesh, len(np.asarray(z))).assemble(sigma_per_element, z, currents)


def solve(a_mat: sp.spmatrix, rhs: np.ndarray, rel_residual: float = 1e-10) -> ForwardSolution:
    """Direct sparse solve of the assembled system, all patterns at once."""
    rhs = np.asarray(rhs, dtype=float)
    m = rhs.shape[1] + 1
    n = a_mat.shape[0] - (m - 1)
    lu = spla.splu(sp.csc_matrix(a_mat))
    x = lu.solve(rhs)
    resid = np.linalg.norm(a_mat @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if not np.isfinite(resid) or resid > rel_residual:
        norm_a = spla.onenormest(a_mat.tocsc())
        raise SolverBreakdown(
            f"relative residual {resid:.3e} exceeds {rel_residual:.1e} "
            f"(||A||_1 ~ {norm_a:.3e}, n = {a_mat.shape[0]})")
    voltages = mean_free_basis(m) @ x[n:]
    voltages = voltages - voltages.mean(axis=0, keepdims=True)
    return ForwardSolution(electrode_voltages=voltages, nodal_potentials=x[:n])


def change_current_basis(voltages: np.ndarray, currents_old: np.ndarray,
                         currents_new: np.ndarray) -> np.ndarray:
    """Voltages the same body would produce under a different current basis.

    Linearity of the solution map gives U_new = U_old (I_old)^+ I_new for
    any new currents in the span of the old columns.
    """
    currents_old = np.asarray(currents_old, dtype=float)
    if np.linalg.matrix_rank(currents_old) != currents_old.shape[1]:
        raise ValueError("old current matrix is rank deficient")
    return np.asarray(voltages) @ (np.linalg.pinv(currents_old) @ currents_new)


def dump_system(a_mat: sp.spmatrix, rhs: np.ndarray, path) -> None:
    """Sparse triplet text dump of the assembled system, for debugging."""
    coo = sp.coo_matrix(a_mat)
    with open(path, "w") as fh:
        fh.write(f"# A {coo.shape[0]} {coo.shape[1]} nnz {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v:.17g}\n")
        fh.write(f"# F {rhs.shape[0]} {rhs.shape[1]}\n")
        for row in np.asarray(rhs):
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


class CemForwardSolver:
    """Forward map y -> stacked electrode voltages, with mesh reuse.

    Meshes (and their assembly precomputations) are cached per distinct
    computational geometry; most collocation nodes perturb only the
    conductivity or contact resistances and therefore share one mesh.
    Instances are picklable and safe to call concurrently on distinct
    inputs from separate processes.
    """

    def __init__(self, cfg: SetupConfig, currents: np.ndarray | None = None,
                 resolution: MeshResolution | None = None, cache_size: int = 16):
        self.cfg = cfg
        self.partition = build_partition(cfg)
        if currents is None:
            currents = default_currents(cfg.num_electrodes)
        self.currents = validate_current_matrix(currents, cfg.num_electrodes)
        self.resolution = resolution if resolution is not None else MeshResolution()
        self.cache_size = cache_size
        self._cache: OrderedDict[bytes, MeshOperator] = OrderedDict()

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_cache"] = OrderedDict()
        return state

    def _operator_for(self, y_gamma: np.ndarray, y_e: np.ndarray) -> MeshOperator:
        # dead geometry parameters (fixed-geometry set-ups) share one mesh
        g_key = y_gamma if self.cfg.rho_plus > self.cfg.rho_minus else np.zeros_like(y_gamma)
        e_key = y_e if self.cfg.angle_offset > 0 else np.zeros_like(y_e)
        key = g_key.tobytes() + e_key.tobytes()
        op = self._cache.get(key)
        if op is None:
            mesh = generate_mesh(g_key, e_key, self.cfg, resolution=self.resolution,
                                 partition=self.partition)
            op = MeshOperator(mesh, self.cfg.num_electrodes)
            self._cache[key] = op
            if len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(key)
        return op

    def solution(self, y_flat) -> ForwardSolution:
        p = ParameterVector.from_flat(np.asarray(y_flat, dtype=float), self.cfg)
        op = self._operator_for(p.y_gamma, p.y_e)
        sigma_e = sigma_values(p.y_sigma, self.cfg)[op.mesh.element_pixel]
        z = contact_resistances(p.y_z, self.cfg)
        a_mat, rhs = op.assemble(sigma_e, z, self.currents)
        return solve(a_mat, rhs)

    def voltages(self, y_flat) -> np.ndarray:
        return self.solution(y_flat).stacked()

    def __call__(self, y_flat) -> np.ndarray:
        return self.voltages(y_flat)
