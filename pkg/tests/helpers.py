"""Shared fixtures-in-code: tiny meshes, finite differences, brute force."""

from __future__ import annotations

import itertools

import numpy as np

from dentalmesh.mesh_io import TriMesh


def grid_mesh(nx: int, ny: int, spacing: float = 1.0,
              height=None, seed: int | None = None) -> TriMesh:
    """Triangulated height field on an (nx x ny) vertex grid.

    height may be None (flat), a callable (x, y) -> z, or an (nx, ny) array.
    A seed adds small vertex jitter so dihedral angles are non-degenerate.
    """
    xs = np.arange(nx, dtype=np.float64) * spacing
    ys = np.arange(ny, dtype=np.float64) * spacing
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    if height is None:
        gz = np.zeros_like(gx)
    elif callable(height):
        gz = np.asarray(height(gx, gy), dtype=np.float64)
    else:
        gz = np.asarray(height, dtype=np.float64)
    if seed is not None:
        gz = gz + np.random.default_rng(seed).normal(0.0, 0.01 * spacing, gz.shape)
    vertices = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    idx = np.arange(nx * ny).reshape(nx, ny)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    v01 = idx[:-1, 1:].ravel()
    cells = np.concatenate([
        np.stack([v00, v10, v11], axis=1),
        np.stack([v00, v11, v01], axis=1),
    ])
    return TriMesh(vertices, cells)


def sphere_mesh(stacks: int = 32, sectors: int = 48, radius: float = 5.0) -> TriMesh:
    """Closed UV sphere; smooth and curvature-uniform, good for area checks."""
    verts = [(0.0, 0.0, radius), (0.0, 0.0, -radius)]
    for i in range(1, stacks):
        phi = np.pi * i / stacks
        for j in range(sectors):
            theta = 2.0 * np.pi * j / sectors
            verts.append((radius * np.sin(phi) * np.cos(theta),
                          radius * np.sin(phi) * np.sin(theta),
                          radius * np.cos(phi)))

    def ring(i, j):
        return 2 + (i - 1) * sectors + (j % sectors)

    cells = []
    for j in range(sectors):
        cells.append((0, ring(1, j), ring(1, j + 1)))
        cells.append((1, ring(stacks - 1, j + 1), ring(stacks - 1, j)))
    for i in range(1, stacks - 1):
        for j in range(sectors):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            cells.append((a, c, b))
            cells.append((b, c, d))
    return TriMesh(np.asarray(verts, dtype=np.float64), np.asarray(cells))


def bump_scene(n: int = 12, seed: int = 0):
    """Small labeled landscape: two round mounds on a plane.

    Returns (mesh, labels, landmarks). Mounds take tooth ids 3 and 10 (the
    canine schema, three landmark names each); the flat remainder is
    gingiva. Landmark positions sit on the mound surfaces: the apex plus
    two opposing flank points.
    """
    centers = {3: (n * 0.3, n * 0.35), 10: (n * 0.65, n * 0.7)}
    radius = n * 0.16
    height = n * 0.22

    def z(x, y):
        out = np.zeros_like(x)
        for cx, cy in centers.values():
            d2 = (x - cx) ** 2 + (y - cy) ** 2
            out = out + height * np.exp(-d2 / (2.0 * (radius / 1.5) ** 2))
        return out

    mesh = grid_mesh(n, n, height=z, seed=seed)
    bary = mesh.cell_barycenters
    labels = np.zeros(mesh.num_cells, dtype=np.int64)
    for tooth, (cx, cy) in centers.items():
        inside = (bary[:, 0] - cx) ** 2 + (bary[:, 1] - cy) ** 2 < radius**2
        labels[inside] = tooth

    def surface_point(cx, cy, dx, dy):
        x, y = cx + dx, cy + dy
        return np.array([x, y, float(z(np.array(x), np.array(y)))])

    landmarks = {}
    for tooth, (cx, cy) in centers.items():
        landmarks[(tooth, "CCT")] = surface_point(cx, cy, 0.0, 0.0)
        landmarks[(tooth, "MCP")] = surface_point(cx, cy, -radius, 0.0)
        landmarks[(tooth, "DCP")] = surface_point(cx, cy, radius, 0.0)
    return mesh, labels, landmarks


def numeric_grad(f, array: np.ndarray, coords, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f() at the given flat coordinates."""
    flat = array.ravel()
    out = np.zeros(len(coords))
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        out[j] = (hi - lo) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - n| scaled by max(1, |a|, |n|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))


def sample_coords(rng: np.random.Generator, size: int, count: int):
    if size <= count:
        return list(range(size))
    return sorted(int(i) for i in rng.choice(size, size=count, replace=False))


def exhaustive_min_energy(model, num_labels: int) -> float:
    """Brute-force minimum of the labeling energy; feasible for <= 16 cells."""
    from dentalmesh.postprocess import labeling_energy

    n = model.probs.shape[0]
    best = np.inf
    for assignment in itertools.product(range(num_labels), repeat=n):
        energy = labeling_energy(model, np.array(assignment, dtype=np.int64))
        if energy < best:
            best = energy
    return float(best)


def svm_dual_objective(kernel: np.ndarray, y: np.ndarray,
                       alpha: np.ndarray) -> float:
    q = kernel * np.outer(y, y)
    return float(alpha.sum() - 0.5 * alpha @ q @ alpha)


def recover_alpha(svm, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-point dual variables, matching support vectors back by row."""
    alpha = np.zeros(x.shape[0])
    for sv, coef in zip(svm.support_vectors, svm.dual_coef):
        matches = np.where((x == sv).all(axis=1))[0]
        assert matches.size == 1, "training rows must be unique"
        i = matches[0]
        alpha[i] = coef * y[i]
    return alpha
