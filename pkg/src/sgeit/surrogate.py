"""Tensorized-Legendre polynomial surrogate of the forward map.

The surrogate expands each of the Q = M(M-1) electrode voltages in
orthonormal Legendre polynomials over the parameter hypercube, restricted
to constant, linear and bilinear terms (P = (N^2+N)/2 + 1 basis functions).
Coefficients are computed by discrete projection with the Smolyak cubature
rule, one forward solve per sparse-grid node.
"""

from __future__ import annotations

import concurrent.futures
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from sgeit.geometry import ConductivityPartition, SetupConfig
from sgeit.sparse_grid import SmolyakRule, smolyak_rule

_MAGIC = b"CEMSURR1"
_SQRT3X2 = 2.0 * math.sqrt(3.0)


class SurrogateBuildError(RuntimeError):
    """A forward evaluation failed while building the surrogate."""


def legendre_1d(k: int, t):
    """Orthonormal Legendre polynomial of degree k on [-1/2, 1/2]."""
    if k < 0:
        raise ValueError("degree must be >= 0")
    coeffs = np.zeros(k + 1)
    coeffs[k] = 1.0
    t = np.asarray(t, dtype=float)
    vals = math.sqrt(2 * k + 1) * np.polynomial.legendre.legval(2.0 * t, coeffs)
    return float(vals) if vals.ndim == 0 else vals


class MultiIndexSet:
    """Constant, linear and bilinear multi-indices in a fixed order.

    Order: the zero index first, then the linear indices by coordinate,
    then bilinear indices (j, k) with j < k lexicographically.  Entries are
    in {0, 1} so no pure squares occur and P = (N^2+N)/2 + 1.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.linear = np.arange(dim)
        pairs = [(j, k) for j in range(dim) for k in range(j + 1, dim)]
        self.pair_i = np.array([p[0] for p in pairs], dtype=int)
        self.pair_j = np.array([p[1] for p in pairs], dtype=int)

    def __len__(self) -> int:
        return 1 + self.dim + len(self.pair_i)

    def index_tuple(self, p: int) -> tuple[tuple[int, int], ...]:
        """Sparse (dimension, degree) pairs of basis index p."""
        if not 0 <= p < len(self):
            raise IndexError(f"basis index {p} out of range")
        if p == 0:
            return ()
        p -= 1
        if p < self.dim:
            return ((int(self.linear[p]), 1),)
        p -= self.dim
        return ((int(self.pair_i[p]), 1), (int(self.pair_j[p]), 1))

    def basis_eval(self, p: int, y) -> float:
        """Value of the p-th tensorized basis polynomial at y."""
        y = np.asarray(y, dtype=float)
        if y.shape != (self.dim,):
            raise ValueError(f"expected parameter vector of length {self.dim}")
        out = 1.0
        for d, deg in self.index_tuple(p):
            out *= legendre_1d(deg, y[d])
        return out

    def values(self, y: np.ndarray) -> np.ndarray:
        """All P basis values at a single point y."""
        l1 = _SQRT3X2 * np.asarray(y, dtype=float)
        return np.concatenate([[1.0], l1, l1[self.pair_i] * l1[self.pair_j]])

    def values_matrix(self, nodes: np.ndarray) -> np.ndarray:
        """Basis values at many points, shape (len(nodes), P)."""
        l1 = _SQRT3X2 * np.asarray(nodes, dtype=float)
        ones = np.ones((len(l1), 1))
        return np.concatenate([ones, l1, l1[:, self.pair_i] * l1[:, self.pair_j]], axis=1)


@dataclass
class Surrogate:
    """Coefficient matrix of the voltage expansion plus build metadata."""

    coefficients: np.ndarray  # (Q, P)
    index_set: MultiIndexSet
    dim: int
    order: int
    cfg: SetupConfig | None = None
    partition: ConductivityPartition | None = None
    currents: np.ndarray | None = None

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        q, p = self.coefficients.shape
        if p != len(self.index_set):
            raise ValueError("coefficient columns do not match the basis size")
        if self.cfg is not None:
            m = self.cfg.num_electrodes
            if q != m * (m - 1):
                raise ValueError(f"expected Q = M(M-1) = {m * (m - 1)} rows, got {q}")

    @property
    def n_outputs(self) -> int:
        return self.coefficients.shape[0]

    def eval(self, y) -> np.ndarray:
        """Voltage vector predicted at parameter vector y (length Q)."""
        y = np.asarray(y, dtype=float)
        if y.shape != (self.dim,):
            raise ValueError(f"expected parameter vector of length {self.dim}")
        return self.coefficients @ self.index_set.values(y)

    def jacobian(self, y) -> np.ndarray:
        """Derivatives of the voltage vector, shape (Q, dim)."""
        y = np.asarray(y, dtype=float)
        if y.shape != (self.dim,):
            raise ValueError(f"expected parameter vector of length {self.dim}")
        iset = self.index_set
        n = self.dim
        l1 = _SQRT3X2 * y
        c_lin = self.coefficients[:, 1:1 + n]
        c_bil = self.coefficients[:, 1 + n:]
        jac_t = _SQRT3X2 * c_lin.T.copy()  # (dim, Q)
        if len(iset.pair_i):
            np.add.at(jac_t, iset.pair_i, (_SQRT3X2 * l1[iset.pair_j])[:, None] * c_bil.T)
            np.add.at(jac_t, iset.pair_j, (_SQRT3X2 * l1[iset.pair_i])[:, None] * c_bil.T)
        return jac_t.T

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        """Write the little-endian binary surrogate file."""
        self._require_metadata()
        cfg = self.cfg
        m = cfg.num_electrodes
        q, p = self.coefficients.shape
        sectors = self.partition.sectors
        flags = 1 if cfg.first_electrode_fixed else 0
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<9I", self.dim, q, p, self.order, m,
                                 cfg.n_sigma, cfg.n_gamma, len(sectors), flags))
            fh.write(struct.pack(f"<{len(sectors)}I", *sectors))
            fh.write(struct.pack("<8d", cfg.rho_minus, cfg.rho_plus,
                                 cfg.angle_offset, cfg.electrode_width,
                                 *cfg.sigma_bounds, *cfg.zeta_bounds))
            fh.write(np.ascontiguousarray(self.currents, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.coefficients, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Surrogate":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != _MAGIC:
                raise ValueError(f"not a surrogate file (magic {magic!r})")
            dim, q, p, order, m, n_sigma, n_gamma, n_rings, flags = struct.unpack(
                "<9I", fh.read(36))
            sectors = struct.unpack(f"<{n_rings}I", fh.read(4 * n_rings))
            (rho_minus, rho_plus, alpha, omega,
             s_lo, s_hi, z_lo, z_hi) = struct.unpack("<8d", fh.read(64))
            currents = np.frombuffer(fh.read(8 * m * (m - 1)), dtype="<f8").reshape(m, m - 1)
            coeffs = np.frombuffer(fh.read(8 * q * p), dtype="<f8").reshape(q, p)
            if fh.read(1):
                raise ValueError("trailing bytes in surrogate file")
        cfg = SetupConfig(
            num_electrodes=m, electrode_width=omega, rho_minus=rho_minus,
            rho_plus=rho_plus, angle_offset=alpha, sigma_bounds=(s_lo, s_hi),
            zeta_bounds=(z_lo, z_hi), n_sigma=n_sigma, n_gamma=n_gamma,
            first_electrode_fixed=bool(flags & 1))
        partition = ConductivityPartition(rho0=cfg.rho0, sectors=sectors)
        return cls(coefficients=coeffs.copy(), index_set=MultiIndexSet(dim),
                   dim=dim, order=order, cfg=cfg, partition=partition,
                   currents=currents.copy())

    def save_json(self, path) -> None:
        """JSON twin of the binary format, for small debug cases."""
        self._require_metadata()
        data = {
            "magic": _MAGIC.decode(),
            "dim": self.dim,
            "order": self.order,
            "config": self.cfg.to_dict(),
            "partition": self.partition.to_dict(),
            "currents": self.currents.tolist(),
            "coefficients": self.coefficients.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(data, fh)
            fh.write("\n")

    @classmethod
    def load_json(cls, path) -> "Surrogate":
        with open(path) as fh:
            data = json.load(fh)
        if data.get("magic") != _MAGIC.decode():
            raise ValueError("not a surrogate JSON file")
        cfg = SetupConfig.from_dict(data["config"])
        part = data["partition"]
        partition = ConductivityPartition(rho0=part["rho0"], sectors=tuple(part["sectors"]))
        dim = data["dim"]
        return cls(coefficients=np.array(data["coefficients"]),
                   index_set=MultiIndexSet(dim), dim=dim, order=data["order"],
                   cfg=cfg, partition=partition,
                   currents=np.array(data["currents"]))

    def _require_metadata(self) -> None:
        if self.cfg is None or self.partition is None or self.currents is None:
            raise ValueError("surrogate lacks set-up metadata and cannot be serialized")


# ---------------------------------------------------------------------------
# building
# ---------------------------------------------------------------------------

_worker_forward = None


def _init_worker(forward):
    global _worker_forward
    _worker_forward = forward


def _eval_chunk(args):
    indices, nodes = args
    out = [np.asarray(_worker_forward(node), dtype=float) for node in nodes]
    return indices, out


def build_surrogate(
    forward: Callable[[np.ndarray], np.ndarray],
    dim: int,
    order: int,
    *,
    cfg: SetupConfig | None = None,
    partition: ConductivityPartition | None = None,
    currents: np.ndarray | None = None,
    workers: int = 1,
    node_cap: int | None = None,
    rule: SmolyakRule | None = None,
) -> Surrogate:
    """Project the forward map onto the bilinear Legendre basis.

    ``forward`` maps a parameter vector to the length-Q voltage vector; it
    is evaluated once per merged sparse-grid node (in parallel when
    ``workers`` > 1, in which case it must be picklable and safe to call
    concurrently on distinct inputs).
    """
    if rule is None:
        rule = smolyak_rule(dim, order, node_cap=node_cap)
    index_set = MultiIndexSet(dim)
    evals = _forward_evaluations(forward, rule, cfg, workers)
    basis = index_set.values_matrix(rule.nodes)  # (n, P)
    coeffs = (evals * rule.weights[:, None]).T @ basis  # (Q, P)
    # drop coefficients at rounding-noise level
    cutoff = 1e-14 * np.max(np.abs(coeffs)) if coeffs.size else 0.0
    coeffs[np.abs(coeffs) < cutoff] = 0.0
    return Surrogate(coefficients=coeffs, index_set=index_set, dim=dim,
                     order=order, cfg=cfg, partition=partition, currents=currents)


def _forward_evaluations(forward, rule: SmolyakRule, cfg, workers: int) -> np.ndarray:
    order_idx = np.arange(rule.n_nodes)
    if cfg is not None:
        # group nodes sharing a computational geometry so per-worker mesh
        # caches stay hot; results are still stored in node order
        s = cfg.block_slices()
        keys = [rule.nodes[k, s["gamma"]].tobytes() + rule.nodes[k, s["e"]].tobytes()
                for k in range(rule.n_nodes)]
        order_idx = np.array(sorted(order_idx, key=lambda k: keys[k]))

    results: list[np.ndarray | None] = [None] * rule.n_nodes
    if workers <= 1:
        for k in order_idx:
            results[k] = _checked_eval(forward, rule.nodes[k], k)
    else:
        chunks = np.array_split(order_idx, workers * 4)
        jobs = [(chunk.tolist(), [rule.nodes[k] for k in chunk])
                for chunk in chunks if len(chunk)]
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=workers, initializer=_init_worker,
                initargs=(forward,)) as pool:
            try:
                for indices, vals in pool.map(_eval_chunk, jobs):
                    for k, v in zip(indices, vals):
                        results[k] = v
            except Exception as exc:  # noqa: BLE001 - reported with node id
                raise SurrogateBuildError(f"forward evaluation failed: {exc}") from exc

    q = results[0].shape[0]
    evals = np.empty((rule.n_nodes, q))
    for k, v in enumerate(results):
        if v is None or v.shape != (q,):
            raise SurrogateBuildError(f"inconsistent forward output at node {k}")
        evals[k] = v
    return evals


def _checked_eval(forward, node, k) -> np.ndarray:
    try:
        return np.asarray(forward(node), dtype=float)
    except Exception as exc:  # noqa: BLE001 - reported with node id
        raise SurrogateBuildError(
            f"forward evaluation failed at node {k}: y = {np.array2string(node, threshold=16)}"
        ) from exc
