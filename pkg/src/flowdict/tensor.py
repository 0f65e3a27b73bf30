"""Tensor images, tensor atoms and the objectives evaluated on them.

A tensor image stores an ``M x P`` array whose column ``p`` is the
row-major vectorization of the ``s x s`` patch at grid position ``p``.
Grid positions are linearized row-major: ``p = r * grid_cols + c``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GeometryError(ValueError):
    """Raised when array shapes or grid metadata are inconsistent."""


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid:
    """Patch-grid geometry shared by tensor images and atoms."""

    rows: int
    cols: int
    patch_size: int
    stride: int = 1
    source_dims: tuple[int, int] | None = None

    def __post_init__(self):
        for name in ("rows", "cols", "patch_size", "stride"):
            if int(getattr(self, name)) < 1:
                raise GeometryError(f"{name} must be a positive integer")

    @property
    def n_positions(self) -> int:
        return self.rows * self.cols

    @property
    def dim(self) -> int:
        return self.patch_size * self.patch_size

    @classmethod
    def for_image(cls, height, width, patch_size, stride=1):
        if patch_size < 1 or stride < 1:
            raise GeometryError("patch_size and stride must be positive")
        if patch_size > height or patch_size > width:
            raise GeometryError(
                f"patch size {patch_size} exceeds image size {height}x{width}")
        return cls(rows=(height - patch_size) // stride + 1,
                   cols=(width - patch_size) // stride + 1,
                   patch_size=patch_size, stride=stride,
                   source_dims=(height, width))

    def compatible(self, other: "Grid") -> bool:
        return (self.rows, self.cols, self.patch_size) == (
            other.rows, other.cols, other.patch_size)

    def position(self, r: int, c: int) -> int:
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise GeometryError(f"grid position ({r}, {c}) out of range")
        return r * self.cols + c

    def coords(self, p: int) -> tuple[int, int]:
        if not 0 <= p < self.n_positions:
            raise GeometryError(f"grid position {p} out of range")
        return divmod(int(p), self.cols)

    def window(self, p: int, window_side: int) -> np.ndarray:
        """Sorted absolute indices in the clipped window centered at ``p``."""
        if window_side < 1 or window_side % 2 == 0:
            raise GeometryError("window side must be an odd positive integer")
        r, c = self.coords(p)
        h = window_side // 2
        rr = np.arange(max(r - h, 0), min(r + h, self.rows - 1) + 1)
        cc = np.arange(max(c - h, 0), min(c + h, self.cols - 1) + 1)
        return (rr[:, None] * self.cols + cc[None, :]).ravel()


def _check_matrix(data, grid):
    if data.ndim != 2 or data.shape != (grid.dim, grid.n_positions):
        raise GeometryError(
            f"expected array of shape {(grid.dim, grid.n_positions)}, "
            f"got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("tensor data must be finite")


@dataclass(frozen=True)
class TensorImage:
    data: np.ndarray
    grid: Grid

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        _check_matrix(self.data, self.grid)

    @property
    def shape(self):
        return self.data.shape

    def patch(self, p: int) -> np.ndarray:
        """Return the ``s x s`` patch stored in column ``p``."""
        s = self.grid.patch_size
        return self.data[:, p].reshape(s, s)


@dataclass(frozen=True)
class TensorAtom:
    """One dictionary element; unit Frobenius norm is enforced on creation."""

    data: np.ndarray
    grid: Grid

    def __post_init__(self):
        data = _frozen(self.data)
        _check_matrix(data, self.grid)
        norm = np.linalg.norm(data)
        if norm == 0.0:
            raise ValueError("tensor atom cannot be identically zero")
        if abs(norm - 1.0) > 1e-12:
            data = _frozen(data / norm)
        object.__setattr__(self, "data", data)


@dataclass(frozen=True, eq=False)
class Dictionary:
    """``N`` tensor atoms stored as one ``N x M x P`` array."""

    data: np.ndarray
    grid: Grid
    class_hint: np.ndarray | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3 or data.shape[0] < 1:
            raise GeometryError("dictionary data must be a nonempty N x M x P array")
        if data.shape[1:] != (self.grid.dim, self.grid.n_positions):
            raise GeometryError(
                f"atom shape {data.shape[1:]} does not match grid "
                f"{(self.grid.dim, self.grid.n_positions)}")
        if not np.all(np.isfinite(data)):
            raise ValueError("dictionary entries must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.class_hint is not None:
            hint = _frozen(self.class_hint, dtype=np.int64)
            if hint.shape != (data.shape[0],):
                raise GeometryError("class_hint must have one label per atom")
            object.__setattr__(self, "class_hint", hint)

    @classmethod
    def from_atoms(cls, atoms, class_hint=None):
        atoms = list(atoms)
        if not atoms:
            raise GeometryError("a dictionary needs at least one atom")
        grid = atoms[0].grid
        if any(not a.grid.compatible(grid) for a in atoms):
            raise GeometryError("all atoms must share grid metadata")
        return cls(np.stack([a.data for a in atoms]), grid, class_hint)

    @property
    def n_atoms(self) -> int:
        return self.data.shape[0]

    @property
    def atoms(self) -> list[TensorAtom]:
        return [TensorAtom(d, self.grid) for d in self.data]

    def norms(self) -> np.ndarray:
        return np.sqrt(np.einsum("nmp,nmp->n", self.data, self.data))


@dataclass(frozen=True)
class WindowView:
    columns: np.ndarray
    absolute_indices: np.ndarray
    center: int
    window_side: int


@dataclass(frozen=True, eq=False)
class FlowField:
    """Selected subatom index ``q(n, p)`` for every atom and grid position."""

    selected: np.ndarray
    grid: Grid
    window_side: int = field(default=1)

    def __post_init__(self):
        sel = _frozen(self.selected, dtype=np.int64)
        if sel.ndim != 2 or sel.shape[1] != self.grid.n_positions:
            raise GeometryError("flow must be an N x P index array")
        if sel.size and (sel.min() < 0 or sel.max() >= self.grid.n_positions):
            raise GeometryError("flow index outside the grid")
        object.__setattr__(self, "selected", sel)

    def displacement(self) -> tuple[np.ndarray, np.ndarray]:
        """Row and column displacement of every selection, each ``N x P``."""
        p = np.arange(self.grid.n_positions)
        dr = self.selected // self.grid.cols - p // self.grid.cols
        dc = self.selected % self.grid.cols - p % self.grid.cols
        return dr, dc

    def is_feasible(self) -> bool:
        dr, dc = self.displacement()
        h = self.window_side // 2
        return bool(np.all(np.abs(dr) <= h) and np.all(np.abs(dc) <= h))


def identity_flow(n_atoms: int, grid: Grid) -> FlowField:
    sel = np.broadcast_to(np.arange(grid.n_positions), (n_atoms, grid.n_positions))
    return FlowField(sel, grid, 1)


def tensorize(image, patch_size: int, stride: int = 1) -> TensorImage:
    """Re-represent an ``H x W`` image as a grid of vectorized patches."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise GeometryError("expected a 2-D grayscale image")
    grid = Grid.for_image(image.shape[0], image.shape[1], patch_size, stride)
    win = sliding_window_view(image, (patch_size, patch_size))[::stride, ::stride]
    win = win[:grid.rows, :grid.cols]
    return TensorImage(win.reshape(grid.n_positions, grid.dim).T, grid)


def window_view(atom: TensorAtom, p: int, window_side: int) -> WindowView:
    idx = atom.grid.window(p, window_side)
    return WindowView(atom.data[:, idx], idx, int(p), window_side)


def aligned_subatom(atom: TensorAtom, flow: FlowField, n: int, p: int) -> np.ndarray:
    if not atom.grid.compatible(flow.grid):
        raise GeometryError("flow grid does not match the atom grid")
    return atom.data[:, flow.selected[n, p]]


def effective_columns(dictionary: Dictionary, flow: FlowField) -> np.ndarray:
    """Aligned subatoms gathered into an ``N x P x M`` array."""
    if not dictionary.grid.compatible(flow.grid):
        raise GeometryError("flow grid does not match the dictionary grid")
    if flow.selected.shape[0] != dictionary.n_atoms:
        raise GeometryError("flow has a different number of atoms")
    n = np.arange(dictionary.n_atoms)[:, None]
    return dictionary.data[n, :, flow.selected]


def eval_l1_objective(dictionary, flow, alpha, x, lam) -> float:
    """Data fit over all positions plus ``lam * ||alpha||_1``."""
    alpha = np.asarray(getattr(alpha, "alpha", alpha), dtype=np.float64)
    if alpha.shape != (dictionary.n_atoms,):
        raise GeometryError("alpha length does not match the dictionary")
    if not dictionary.grid.compatible(x.grid):
        raise GeometryError("image grid does not match the dictionary grid")
    eff = effective_columns(dictionary, flow)
    recon = np.einsum("n,npm->mp", alpha, eff)
    fit = 0.5 * float(np.sum((recon - x.data) ** 2))
    return fit + float(lam) * float(np.sum(np.abs(alpha)))


def eval_joint_objective(dictionary, flow, alpha, x, lam) -> float:
    """Score an arbitrary feasible (code, flow) pair on the joint problem.

    The joint problem shares the data-fit term with the aligned L1 problem,
    so the arithmetic is the same; the flow is additionally required to be
    feasible for its window.
    """
    if not flow.is_feasible():
        raise GeometryError("flow selects a subatom outside its window")
    return eval_l1_objective(dictionary, flow, alpha, x, lam)
