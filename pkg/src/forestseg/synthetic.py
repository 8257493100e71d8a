"""Synthetic forest plots with known semantic and instance labels.

Trees are vertical cylinder stems topped by ellipsoid crowns, planted on a
jittered grid above a gently sloped terrain sheet. Every point carries its
ground-truth class and tree id, which makes these plots the oracle for
end-to-end segmentation and optimizer experiments: the construction is the
answer key.
"""

from __future__ import annotations

import numpy as np

from .core import UNASSIGNED, LabeledCloud, SemanticLabel


def _terrain_height(x, y, slope=0.03):
    return slope * x + 0.015 * y


def _sample_cylinder(rng, center_xy, radius, z0, z1, n):
    theta = rng.random(n) * 2 * np.pi
    z = z0 + rng.random(n) * (z1 - z0)
    r = radius * (1.0 + 0.05 * rng.standard_normal(n))
    return np.column_stack([
        center_xy[0] + r * np.cos(theta),
        center_xy[1] + r * np.sin(theta),
        z,
    ])


def _sample_ellipsoid(rng, center, semi_axes, n):
    # rejection-free: uniform direction scaled by cube-root radius
    direction = rng.standard_normal((n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.random(n) ** (1.0 / 3.0)
    return center + direction * radius[:, None] * semi_axes


def generate_plot(n_trees: int, seed: int = 0, spacing: float = 4.5,
                  stem_density: float = 450.0, crown_points: int = 900,
                  terrain_pitch: float = 0.35, n_cwd: int = 0) -> LabeledCloud:
    """One plot of ``n_trees`` synthetic trees with ground-truth labels.

    ``spacing`` is the planting-grid pitch; with the default crown radii
    (<= 1.2 m) a pitch of 4.5 m leaves at least ~2 m of clear air between
    crowns. ``stem_density`` is points per meter over the lower stem, chosen
    so the default seeding slice comfortably clears the density-clustering
    minimum. Instance ids are 0..n_trees-1; terrain and deadwood points stay
    unassigned.
    """
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n_trees)))
    cells = [(i, j) for i in range(side) for j in range(side)]
    rng.shuffle(cells)
    cells = cells[:n_trees]

    jitter = 0.15 * spacing
    chunks, semantics, instances = [], [], []

    for tree_id, (ci, cj) in enumerate(cells):
        cx = ci * spacing + spacing / 2 + rng.uniform(-jitter, jitter)
        cy = cj * spacing + spacing / 2 + rng.uniform(-jitter, jitter)
        ground = _terrain_height(cx, cy)
        height = rng.uniform(7.0, 12.0)
        stem_radius = rng.uniform(0.10, 0.18)

        lower_n = int(stem_density * min(3.0, height))
        upper_n = int(0.25 * stem_density * max(0.0, height - 3.0))
        stem = np.vstack([
            _sample_cylinder(rng, (cx, cy), stem_radius, ground, ground + min(3.0, height), lower_n),
            _sample_cylinder(rng, (cx, cy), stem_radius * 0.8, ground + 3.0, ground + height, upper_n)
            if upper_n > 0 else np.empty((0, 3)),
        ])
        chunks.append(stem)
        semantics.append(np.full(len(stem), SemanticLabel.STEM, dtype=np.int64))
        instances.append(np.full(len(stem), tree_id, dtype=np.int64))

        crown_center = np.array([cx, cy, ground + 0.68 * height])
        semi = np.array([rng.uniform(0.8, 1.2), rng.uniform(0.8, 1.2), 0.34 * height])
        crown = _sample_ellipsoid(rng, crown_center, semi, crown_points)
        chunks.append(crown)
        semantics.append(np.full(len(crown), SemanticLabel.VEGETATION, dtype=np.int64))
        instances.append(np.full(len(crown), tree_id, dtype=np.int64))

    extent = side * spacing
    ticks = np.arange(0.0, extent + terrain_pitch, terrain_pitch)
    gx, gy = np.meshgrid(ticks, ticks)
    gx = gx.ravel() + rng.uniform(-0.05, 0.05, gx.size)
    gy = gy.ravel() + rng.uniform(-0.05, 0.05, gy.size)
    gz = _terrain_height(gx, gy) + rng.uniform(0.0, 0.03, gx.size)
    terrain = np.column_stack([gx, gy, gz])
    chunks.append(terrain)
    semantics.append(np.full(len(terrain), SemanticLabel.TERRAIN, dtype=np.int64))
    instances.append(np.full(len(terrain), UNASSIGNED, dtype=np.int64))

    for _ in range(n_cwd):
        x0, y0 = rng.uniform(0.3 * extent, 0.7 * extent, 2)
        angle = rng.random() * np.pi
        t = rng.random(120) * rng.uniform(1.5, 3.0)
        log = np.column_stack([
            x0 + t * np.cos(angle) + rng.normal(0, 0.03, len(t)),
            y0 + t * np.sin(angle) + rng.normal(0, 0.03, len(t)),
            _terrain_height(x0 + t * np.cos(angle), y0 + t * np.sin(angle)) + 0.1,
        ])
        chunks.append(log)
        semantics.append(np.full(len(log), SemanticLabel.CWD, dtype=np.int64))
        instances.append(np.full(len(log), UNASSIGNED, dtype=np.int64))

    return LabeledCloud(
        np.vstack(chunks),
        semantic=np.concatenate(semantics),
        instance=np.concatenate(instances),
    )


def generate_dataset(n_plots: int, trees_per_plot, seed: int = 0, **kwargs) -> dict[str, LabeledCloud]:
    """A named set of plots; ``trees_per_plot`` may be an int or a sequence."""
    if isinstance(trees_per_plot, int):
        trees_per_plot = [trees_per_plot] * n_plots
    if len(trees_per_plot) != n_plots:
        raise ValueError("trees_per_plot length must match n_plots")
    return {
        f"plot_{i:02d}": generate_plot(trees_per_plot[i], seed=seed * 1000 + i, **kwargs)
        for i in range(n_plots)
    }
