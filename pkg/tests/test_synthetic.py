import numpy as np
import pytest

from forestseg.core import UNASSIGNED, SemanticLabel
from forestseg.synthetic import generate_dataset, generate_plot


def test_labels_complete_and_consistent():
    cloud = generate_plot(6, seed=3)
    assert cloud.semantic is not None and cloud.instance is not None
    trees = np.unique(cloud.instance[cloud.instance >= 0])
    assert trees.tolist() == list(range(6))
    # terrain never belongs to a tree
    assert np.all(cloud.instance[cloud.semantic == SemanticLabel.TERRAIN] == UNASSIGNED)
    # every tree contributes both stem and vegetation points
    for t in trees:
        sem = cloud.semantic[cloud.instance == t]
        assert (sem == SemanticLabel.STEM).any()
        assert (sem == SemanticLabel.VEGETATION).any()


def test_deterministic():
    a = generate_plot(4, seed=9)
    b = generate_plot(4, seed=9)
    assert np.array_equal(a.xyz, b.xyz)
    assert np.array_equal(a.instance, b.instance)


def test_stem_separation_respects_spacing():
    cloud = generate_plot(9, seed=1, spacing=5.0)
    centers = []
    for t in range(9):
        stem = (cloud.instance == t) & (cloud.semantic == SemanticLabel.STEM)
        centers.append(cloud.xyz[stem, :2].mean(axis=0))
    centers = np.array(centers)
    dists = np.linalg.norm(centers[:, None] - centers[None, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    # jitter is 15% of spacing per tree, so centers stay at least 0.7 * spacing apart
    assert dists.min() >= 0.7 * 5.0


def test_cwd_option():
    cloud = generate_plot(3, seed=2, n_cwd=2)
    cwd = cloud.semantic == SemanticLabel.CWD
    assert cwd.any()
    assert np.all(cloud.instance[cwd] == UNASSIGNED)


def test_dataset_naming_and_sizes():
    plots = generate_dataset(3, [4, 5, 6], seed=8)
    assert list(plots) == ["plot_00", "plot_01", "plot_02"]
    counts = [len(np.unique(c.instance[c.instance >= 0])) for c in plots.values()]
    assert counts == [4, 5, 6]
    with pytest.raises(ValueError, match="length"):
        generate_dataset(2, [1, 2, 3])
