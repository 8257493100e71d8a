import numpy as np
import pytest

from forestseg.cloudio import CloudFormatError, read_cloud, read_dataset, write_cloud
from forestseg.core import UNASSIGNED, LabeledCloud, SemanticLabel


def make_cloud(rng, n=50, with_labels=True):
    xyz = rng.random((n, 3)) * 20 - 5
    if not with_labels:
        return LabeledCloud(xyz)
    sem = rng.integers(0, 4, n)
    inst = rng.integers(-1, 5, n)
    return LabeledCloud(xyz, semantic=sem, instance=inst)


class TestRoundTrip:
    def test_lossless_at_declared_precision(self, rng, tmp_path):
        cloud = make_cloud(rng)
        path = tmp_path / "cloud.txt"
        write_cloud(cloud, path)
        back = read_cloud(path)
        assert np.array_equal(back.xyz, np.round(cloud.xyz, 6))
        assert np.array_equal(back.semantic, cloud.semantic)
        assert np.array_equal(back.instance, cloud.instance)

    def test_second_round_trip_exact(self, rng, tmp_path):
        cloud = make_cloud(rng)
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        write_cloud(cloud, p1)
        write_cloud(read_cloud(p1), p2)
        assert p1.read_text() == p2.read_text()

    def test_coordinates_only(self, rng, tmp_path):
        cloud = make_cloud(rng, with_labels=False)
        path = tmp_path / "bare.txt"
        write_cloud(cloud, path)
        back = read_cloud(path)
        assert back.semantic is None and back.instance is None

    def test_unassigned_marker(self, tmp_path):
        cloud = LabeledCloud(np.zeros((2, 3)), instance=np.array([UNASSIGNED, 3]))
        path = tmp_path / "c.txt"
        write_cloud(cloud, path)
        text = path.read_text()
        assert " -" in text.splitlines()[1]
        assert np.array_equal(read_cloud(path).instance, [UNASSIGNED, 3])


class TestParsingErrors:
    def write(self, tmp_path, text):
        path = tmp_path / "bad.txt"
        path.write_text(text)
        return path

    def test_missing_header(self, tmp_path):
        path = self.write(tmp_path, "1 2 3\n")
        with pytest.raises(CloudFormatError, match="line 1"):
            read_cloud(path)

    def test_malformed_line_reports_number(self, tmp_path):
        path = self.write(tmp_path, "# forestseg v1 columns: x y z\n1 2 3\n1 oops 3\n")
        with pytest.raises(CloudFormatError, match="line 3"):
            read_cloud(path)

    def test_wrong_field_count(self, tmp_path):
        path = self.write(tmp_path, "# forestseg v1 columns: x y z sem\n1 2 3\n")
        with pytest.raises(CloudFormatError, match="line 2"):
            read_cloud(path)

    def test_unknown_semantic_name(self, tmp_path):
        path = self.write(tmp_path, "# forestseg v1 columns: x y z sem\n1 2 3 rock\n")
        with pytest.raises(CloudFormatError, match="rock"):
            read_cloud(path)

    def test_negative_instance(self, tmp_path):
        path = self.write(tmp_path, "# forestseg v1 columns: x y z inst\n1 2 3 -4\n")
        with pytest.raises(CloudFormatError, match="negative instance"):
            read_cloud(path)

    def test_empty_file(self, tmp_path):
        path = self.write(tmp_path, "# forestseg v1 columns: x y z\n")
        with pytest.raises(CloudFormatError, match="no points"):
            read_cloud(path)


class TestDataset:
    def test_reads_sorted_plots(self, rng, tmp_path):
        for name in ("b_plot", "a_plot"):
            write_cloud(make_cloud(rng, 10), tmp_path / f"{name}.txt")
        plots = read_dataset(tmp_path)
        assert list(plots) == ["a_plot", "b_plot"]

    def test_empty_directory(self, tmp_path):
        with pytest.raises(CloudFormatError, match="no plot files"):
            read_dataset(tmp_path)


def test_semantic_names_cover_the_four_classes(tmp_path, rng):
    cloud = LabeledCloud(np.zeros((4, 3)),
                         semantic=np.array([0, 1, 2, 3]))
    path = tmp_path / "classes.txt"
    write_cloud(cloud, path)
    body = path.read_text().splitlines()[1:]
    names = [line.split()[3] for line in body]
    assert names == ["terrain", "vegetation", "cwd", "stem"]
    assert np.array_equal(read_cloud(path).semantic,
                          [SemanticLabel.TERRAIN, SemanticLabel.VEGETATION,
                           SemanticLabel.CWD, SemanticLabel.STEM])
