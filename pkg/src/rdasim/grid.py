"""Cell-centered finite-volume discretization on structured 1D/2D grids.

Two-point flux approximation with distance-weighted harmonic face
diffusivities (exact for 1D piecewise-constant interface problems) and
first-order upwind advection on face-averaged drift.  Coefficients are
piecewise constant per cell and may switch at scheduled times.  Boundary
conditions: homogeneous Dirichlet (ghost mirror value 0), Robin
(diffusive flux proportional to the trace), and total-flux-zero walls
that also cancel the advective face term.

Operators act pointwise (rows are divided by cell volume), so on uniform
grids the pure-diffusion operator is symmetric; on non-uniform grids it
is volume-similar to a symmetric matrix.  Assembled operators are
scipy.sparse CSR matrices.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "StructuredGrid",
    "ScalarField",
    "CoefficientField",
    "Dirichlet",
    "Robin",
    "NoFluxWithDrift",
    "BoundarySpec",
    "SparseOperator",
    "face_diffusivity",
    "assemble_diffusion",
    "assemble_advection",
    "discrete_norm",
]

SparseOperator = sp.csr_matrix


class StructuredGrid:
    """Tensor-product cell-centered grid in 1 or 2 dimensions.

    Cells are flattened in C order (last axis fastest).  Widths may vary
    per cell along each axis.
    """

    def __init__(self, widths: Sequence[np.ndarray], origin: Sequence[float] | None = None):
        widths = tuple(np.asarray(w, dtype=float).ravel() for w in widths)
        if len(widths) not in (1, 2):
            raise ValueError(f"grid dimension must be 1 or 2, got {len(widths)}")
        for w in widths:
            if w.size < 1 or np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ValueError("cell widths must be positive and finite")
        self.widths = widths
        self.origin = tuple(float(o) for o in (origin or (0.0,) * len(widths)))
        self.dim = len(widths)
        self.shape = tuple(w.size for w in widths)
        self.ncells = int(np.prod(self.shape))

        # per-axis centers and the flattened geometry tables
        self.axis_centers = tuple(
            self.origin[a] + np.cumsum(widths[a]) - widths[a] / 2.0 for a in range(self.dim)
        )
        self.extents = tuple(
            (self.origin[a], self.origin[a] + float(np.sum(widths[a]))) for a in range(self.dim)
        )
        mesh = np.meshgrid(*self.axis_centers, indexing="ij")
        self.cell_centers = np.stack([m.ravel() for m in mesh])  # (dim, ncells)
        wmesh = np.meshgrid(*widths, indexing="ij")
        vol = np.ones(self.shape)
        for wm in wmesh:
            vol = vol * wm
        self.cell_volumes = vol.ravel()
        self.domain_volume = float(self.cell_volumes.sum())

    @classmethod
    def uniform(cls, extents: Sequence[Sequence[float]], cells: Sequence[int]) -> "StructuredGrid":
        """Uniform grid from per-axis (lo, hi) extents and cell counts."""
        extents = [tuple(map(float, e)) for e in extents]
        cells = [int(c) for c in cells]
        if len(extents) != len(cells):
            raise ValueError("extents and cells must have the same length")
        widths = []
        for (lo, hi), n in zip(extents, cells):
            if hi <= lo or n < 1:
                raise ValueError(f"bad axis specification ({lo}, {hi}) with {n} cells")
            widths.append(np.full(n, (hi - lo) / n))
        return cls(widths, origin=[e[0] for e in extents])

    def flat_index(self, *ij: int) -> int:
        return int(np.ravel_multi_index(ij, self.shape))

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Flat cell indices containing each column of `points` (dim, N)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[0] != self.dim:
            raise ValueError(f"expected points of shape ({self.dim}, N), got {pts.shape}")
        multi = []
        for a in range(self.dim):
            edges = self.origin[a] + np.concatenate([[0.0], np.cumsum(self.widths[a])])
            k = np.searchsorted(edges, pts[a], side="right") - 1
            multi.append(np.clip(k, 0, self.shape[a] - 1))
        return np.ravel_multi_index(multi, self.shape)

    def content_hash(self) -> int:
        """Stable 64-bit hash of the grid geometry, for checkpoint headers."""
        h = hashlib.sha256()
        h.update(np.int64(self.dim).tobytes())
        h.update(np.asarray(self.shape, dtype=np.int64).tobytes())
        h.update(np.asarray(self.origin, dtype="<f8").tobytes())
        for w in self.widths:
            h.update(w.astype("<f8").tobytes())
        return int.from_bytes(h.digest()[:8], "little")

    def is_uniform(self) -> bool:
        return all(np.allclose(w, w[0]) for w in self.widths)


@dataclass
class ScalarField:
    """Per-cell values bound to a grid."""

    values: np.ndarray
    grid: StructuredGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != self.grid.ncells:
            raise ValueError(
                f"field has {self.values.size} values for {self.grid.ncells} cells"
            )


def _field_values(fld) -> np.ndarray:
    return fld.values if isinstance(fld, ScalarField) else np.asarray(fld, dtype=float).ravel()


class CoefficientField:
    """Per-cell, per-species diffusion and drift, optionally time-scheduled.

    diffusion: (m, dim, ncells) diagonal tensor entries per cell;
    drift: (m, dim, ncells) drift vector per cell.  A schedule is a list
    of (t_switch, diffusion, drift) epochs; the epoch active at time t is
    the last one with t_switch <= t.  All diffusion entries must be
    positive (uniform ellipticity for diagonal tensors) and finite.
    """

    def __init__(self, grid: StructuredGrid, diffusion, drift=None,
                 schedule: list | None = None):
        self.grid = grid
        base_diff = self._check_diffusion(np.asarray(diffusion, dtype=float))
        base_drift = self._check_drift(drift, base_diff.shape[0])
        self.m = base_diff.shape[0]
        self.epochs: list[tuple[float, np.ndarray, np.ndarray]] = [(0.0, base_diff, base_drift)]
        for entry in schedule or []:
            t_switch, diff_e, drift_e = entry
            diff_e = self._check_diffusion(np.asarray(diff_e, dtype=float))
            drift_e = self._check_drift(drift_e, self.m)
            if diff_e.shape[0] != self.m:
                raise ValueError("schedule entries must keep the species count")
            self.epochs.append((float(t_switch), diff_e, drift_e))
        self.epochs.sort(key=lambda e: e[0])

    def _check_diffusion(self, diff: np.ndarray) -> np.ndarray:
        if diff.ndim != 3 or diff.shape[1] != self.grid.dim or diff.shape[2] != self.grid.ncells:
            raise ValueError(
                f"diffusion must have shape (m, {self.grid.dim}, {self.grid.ncells}), "
                f"got {diff.shape}"
            )
        if not np.all(np.isfinite(diff)) or np.any(diff <= 0):
            raise ValueError("diffusion entries must be positive and finite")
        return diff

    def _check_drift(self, drift, m: int) -> np.ndarray:
        if drift is None:
            return np.zeros((m, self.grid.dim, self.grid.ncells))
        arr = np.asarray(drift, dtype=float)
        if arr.shape != (m, self.grid.dim, self.grid.ncells):
            raise ValueError(
                f"drift must have shape ({m}, {self.grid.dim}, {self.grid.ncells}), "
                f"got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("drift entries must be finite")
        return arr

    @classmethod
    def constant(cls, grid: StructuredGrid, diffusion_per_species, drift_per_species=None):
        """Build from per-species scalars (isotropic) or per-axis sequences."""
        m = len(diffusion_per_species)
        diff = np.empty((m, grid.dim, grid.ncells))
        for i, d in enumerate(diffusion_per_species):
            d = np.asarray(d, dtype=float)
            if d.ndim == 0:
                diff[i] = d
            else:
                diff[i] = d.reshape(grid.dim, 1)
        drift = None
        if drift_per_species is not None:
            drift = np.zeros((m, grid.dim, grid.ncells))
            for i, b in enumerate(drift_per_species):
                b = np.asarray(b, dtype=float)
                drift[i] = b if b.ndim == 0 else b.reshape(grid.dim, 1)
        return cls(grid, diff, drift)

    def at_time(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        active = self.epochs[0]
        for epoch in self.epochs:
            if epoch[0] <= t:
                active = epoch
        return active[1], active[2]

    def switch_times(self) -> list[float]:
        return [e[0] for e in self.epochs[1:]]

    def ellipticity_bound(self) -> float:
        return float(min(np.min(diff) for _, diff, _ in self.epochs))

    def drift_bound(self) -> float:
        return float(max(np.max(np.abs(drift)) for _, _, drift in self.epochs))


@dataclass(frozen=True)
class Dirichlet:
    """Homogeneous Dirichlet wall: boundary trace pinned to zero."""


@dataclass(frozen=True)
class Robin:
    """Diffusive boundary flux proportional to the trace: D grad(u).nu + alpha u = 0."""

    alpha: float

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"Robin coefficient must be >= 0, got {self.alpha}")


@dataclass(frozen=True)
class NoFluxWithDrift:
    """Total-flux-zero wall: both diffusive and advective face terms vanish."""


def _sides(dim: int) -> tuple[str, ...]:
    return ("x_lo", "x_hi") if dim == 1 else ("x_lo", "x_hi", "y_lo", "y_hi")


@dataclass
class BoundarySpec:
    """Per-species, per-side boundary conditions."""

    conditions: tuple[dict, ...]  # one {side: bc} mapping per species
    dim: int

    def __post_init__(self):
        sides = set(_sides(self.dim))
        for i, mapping in enumerate(self.conditions):
            if set(mapping) != sides:
                raise ValueError(
                    f"species {i}: boundary sides {sorted(mapping)} != {sorted(sides)}"
                )
            for bc in mapping.values():
                if not isinstance(bc, (Dirichlet, Robin, NoFluxWithDrift)):
                    raise TypeError(f"unsupported boundary condition {bc!r}")

    @classmethod
    def uniform(cls, m: int, dim: int, bc) -> "BoundarySpec":
        return cls(tuple({s: bc for s in _sides(dim)} for _ in range(m)), dim)

    def for_species(self, i: int) -> dict:
        return self.conditions[i]


def face_diffusivity(d_left: float, d_right: float, h_left: float, h_right: float) -> float:
    """Distance-weighted harmonic mean of two adjacent cell diffusivities."""
    if d_left <= 0 or d_right <= 0 or h_left <= 0 or h_right <= 0:
        raise ValueError("face diffusivity requires positive diffusivities and widths")
    return (h_left + h_right) * d_left * d_right / (h_right * d_left + h_left * d_right)


def _interior_faces(grid: StructuredGrid, axis: int):
    """Left/right flat cell indices, face areas and adjacent widths along an axis."""
    shape = grid.shape
    if grid.dim == 1:
        n = shape[0]
        left = np.arange(n - 1)
        right = left + 1
        area = np.ones(n - 1)
        return left, right, area, grid.widths[0][:-1], grid.widths[0][1:]
    nx, ny = shape
    if axis == 0:
        ix, iy = np.meshgrid(np.arange(nx - 1), np.arange(ny), indexing="ij")
        left = np.ravel_multi_index((ix.ravel(), iy.ravel()), shape)
        right = np.ravel_multi_index((ix.ravel() + 1, iy.ravel()), shape)
        area = grid.widths[1][iy.ravel()]
        h_left = grid.widths[0][ix.ravel()]
        h_right = grid.widths[0][ix.ravel() + 1]
    else:
        ix, iy = np.meshgrid(np.arange(nx), np.arange(ny - 1), indexing="ij")
        left = np.ravel_multi_index((ix.ravel(), iy.ravel()), shape)
        right = np.ravel_multi_index((ix.ravel(), iy.ravel() + 1), shape)
        area = grid.widths[0][ix.ravel()]
        h_left = grid.widths[1][iy.ravel()]
        h_right = grid.widths[1][iy.ravel() + 1]
    return left, right, area, h_left, h_right


def _boundary_faces(grid: StructuredGrid, side: str):
    """Flat cell indices, face areas and cell widths on one boundary side."""
    shape = grid.shape
    axis = 0 if side.startswith("x") else 1
    last = shape[axis] - 1
    pos = 0 if side.endswith("lo") else last
    if grid.dim == 1:
        cells = np.array([pos])
        area = np.ones(1)
        h = np.array([grid.widths[0][pos]])
        return axis, cells, area, h
    nx, ny = shape
    if axis == 0:
        iy = np.arange(ny)
        cells = np.ravel_multi_index((np.full(ny, pos), iy), shape)
        area = grid.widths[1][iy]
        h = np.full(ny, grid.widths[0][pos])
    else:
        ix = np.arange(nx)
        cells = np.ravel_multi_index((ix, np.full(nx, pos)), shape)
        area = grid.widths[0][ix]
        h = np.full(nx, grid.widths[1][pos])
    return axis, cells, area, h


def assemble_diffusion(grid: StructuredGrid, coeff: CoefficientField, bc: BoundarySpec,
                       species: int, t: float = 0.0) -> SparseOperator:
    """Two-point-flux operator for the negative diffusion divergence.

    Interior faces use distance-weighted harmonic means of the adjacent
    per-cell diffusivities, so 1D piecewise-constant interface problems are
    reproduced exactly at cell centers.  Dirichlet walls eliminate the
    ghost cell via a mirror value of zero, Robin walls add
    alpha * area / volume to the diagonal, total-flux-zero walls drop the
    face term.  The result is a weakly diagonally dominant M-matrix.
    """
    diff, _ = coeff.at_time(t)
    d = diff[species]  # (dim, ncells)
    vol = grid.cell_volumes
    rows, cols, vals = [], [], []
    for axis in range(grid.dim):
        left, right, area, h_left, h_right = _interior_faces(grid, axis)
        d_left = d[axis, left]
        d_right = d[axis, right]
        d_face = (h_left + h_right) * d_left * d_right / (h_right * d_left + h_left * d_right)
        trans = d_face * area / ((h_left + h_right) / 2.0)
        for r, c, s in ((left, left, 1.0), (left, right, -1.0),
                        (right, right, 1.0), (right, left, -1.0)):
            rows.append(r)
            cols.append(c)
            vals.append(s * trans / vol[r])
    side_bcs = bc.for_species(species)
    for side in _sides(grid.dim):
        condition = side_bcs[side]
        axis, cells, area, h = _boundary_faces(grid, side)
        if isinstance(condition, Dirichlet):
            trans = 2.0 * d[axis, cells] * area / h
            rows.append(cells)
            cols.append(cells)
            vals.append(trans / vol[cells])
        elif isinstance(condition, Robin):
            rows.append(cells)
            cols.append(cells)
            vals.append(condition.alpha * area / vol[cells])
        # total-flux-zero: no face contribution
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.coo_matrix((vals, (rows, cols)), shape=(grid.ncells, grid.ncells)).tocsr()


def assemble_advection(grid: StructuredGrid, coeff: CoefficientField, bc: BoundarySpec,
                       species: int, t: float = 0.0) -> SparseOperator:
    """First-order upwind operator for the drift divergence.

    Face drift is the average of the two adjacent cell values; the upwind
    cell supplies the transported value.  Dirichlet and Robin walls admit
    outflow against a zero exterior state; total-flux-zero walls cancel
    the advective face term entirely, which makes the volume-weighted
    column sums vanish (discrete conservation).
    """
    _, drift = coeff.at_time(t)
    b = drift[species]  # (dim, ncells)
    vol = grid.cell_volumes
    rows, cols, vals = [], [], []
    for axis in range(grid.dim):
        left, right, area, _, _ = _interior_faces(grid, axis)
        b_face = 0.5 * (b[axis, left] + b[axis, right])
        pos = np.maximum(b_face, 0.0) * area
        neg = np.minimum(b_face, 0.0) * area
        for r, c, s in ((left, left, pos), (right, left, -pos),
                        (left, right, neg), (right, right, -neg)):
            rows.append(r)
            cols.append(c)
            vals.append(s / vol[r])
    side_bcs = bc.for_species(species)
    for side in _sides(grid.dim):
        condition = side_bcs[side]
        if isinstance(condition, NoFluxWithDrift):
            continue
        axis, cells, area, _ = _boundary_faces(grid, side)
        sign = -1.0 if side.endswith("lo") else 1.0
        outward = sign * b[axis, cells]
        outflow = np.maximum(outward, 0.0) * area
        rows.append(cells)
        cols.append(cells)
        vals.append(outflow / vol[cells])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.coo_matrix((vals, (rows, cols)), shape=(grid.ncells, grid.ncells)).tocsr()


def discrete_norm(fld, grid: StructuredGrid, p) -> float:
    """(sum |u|^p vol)^(1/p), or the max norm for p = inf."""
    values = _field_values(fld)
    if values.size != grid.ncells:
        raise ValueError(f"field has {values.size} values for {grid.ncells} cells")
    if p == np.inf or p == "inf":
        return float(np.max(np.abs(values))) if values.size else 0.0
    p = float(p)
    if p < 1:
        raise ValueError(f"norm order must be >= 1 or inf, got {p}")
    return float(np.sum(np.abs(values) ** p * grid.cell_volumes) ** (1.0 / p))
