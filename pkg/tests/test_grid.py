import numpy as np
import pytest

from ecrflab import grid
from ecrflab.errors import ParameterError, ShapeError


class TestNormalizeImage:
    def test_scales_to_unit_range(self):
        raw = np.array([[[0, 128, 255]]], dtype=np.uint8)
        out = grid.normalize_image(raw)
        np.testing.assert_allclose(out, [[[0.0, 128 / 255, 1.0]]])

    def test_rejects_non_rgb(self):
        with pytest.raises(ShapeError):
            grid.normalize_image(np.zeros((4, 4)))
        with pytest.raises(ShapeError):
            grid.normalize_image(np.zeros((0, 4, 3)))


class TestPositionEmbedding:
    def test_shape_and_norm(self):
        emb = grid.position_embedding(5, 7, 16)
        assert emb.shape == (5, 7, 16)
        # each (sin, cos) pair contributes exactly 1 to the squared norm
        np.testing.assert_allclose((emb**2).sum(axis=2), np.full((5, 7), 8.0))

    def test_first_cell_values(self):
        emb = grid.position_embedding(3, 3, 8)
        # at (0, 0) every sin channel is 0 and every cos channel is 1
        np.testing.assert_allclose(emb[0, 0, 0::2], 0.0)
        np.testing.assert_allclose(emb[0, 0, 1::2], 1.0)

    def test_row_and_column_halves(self):
        emb = grid.position_embedding(4, 6, 8)
        # first half depends only on the row, second half only on the column
        for col in range(6):
            np.testing.assert_array_equal(emb[:, col, :4], emb[:, 0, :4])
        for row in range(4):
            np.testing.assert_array_equal(emb[row, :, 4:], emb[0, :, 4:])

    def test_known_frequency_values(self):
        emb = grid.position_embedding(4, 4, 8)
        # two pairs per half: frequencies 1 and 10000**(-1/2)
        f1 = 10000.0 ** (-0.5)
        np.testing.assert_allclose(emb[2, 0, 0], np.sin(2.0))
        np.testing.assert_allclose(emb[2, 0, 1], np.cos(2.0))
        np.testing.assert_allclose(emb[2, 0, 2], np.sin(2.0 * f1))
        np.testing.assert_allclose(emb[0, 3, 4], np.sin(3.0))

    @pytest.mark.parametrize("dim", [0, 2, 3, 5, 6, 7, 9, 10])
    def test_rejects_dims_not_multiple_of_four(self, dim):
        with pytest.raises(ParameterError):
            grid.position_embedding(4, 4, dim)

    def test_rejects_empty_grid(self):
        with pytest.raises(ParameterError):
            grid.position_embedding(0, 4, 8)


class TestDownsampleLabels:
    def test_majority_vote(self):
        labels = np.array(
            [
                [1, 1, 2, 2],
                [1, 0, 2, 0],
                [3, 3, 0, 0],
                [3, 0, 0, 0],
            ]
        )
        out = grid.downsample_labels(labels, 2)
        np.testing.assert_array_equal(out, [[1, 2], [3, 0]])

    def test_tie_breaks_toward_smaller_id(self):
        labels = np.array([[2, 2], [5, 5]])
        assert grid.downsample_labels(labels, 2)[0, 0] == 2

    def test_uneven_padding_never_wins(self):
        labels = np.array([[7, 7, 7], [7, 7, 7], [4, 4, 4]])
        out = grid.downsample_labels(labels, 2)
        # bottom-right block is 1 real pixel + 3 padding: real label wins
        np.testing.assert_array_equal(out, [[7, 7], [4, 4]])

    def test_identity_for_stride_one(self):
        labels = np.arange(12).reshape(3, 4)
        np.testing.assert_array_equal(grid.downsample_labels(labels, 1), labels)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ShapeError):
            grid.downsample_labels(np.zeros((2, 2, 2), dtype=int), 2)
        with pytest.raises(ParameterError):
            grid.downsample_labels(np.zeros((4, 4), dtype=int), 0)


class TestPngRoundTrip:
    def test_image_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        image = rng.uniform(size=(9, 11, 3))
        path = tmp_path / "img.png"
        grid.save_image_png(path, image)
        loaded = grid.load_image_png(path)
        assert loaded.shape == image.shape
        # 8-bit quantization bounds the round-trip error
        assert np.abs(loaded - image).max() <= 0.5 / 255 + 1e-12

    def test_labels_round_trip(self, tmp_path):
        labels = np.arange(20).reshape(4, 5) % 6
        path = tmp_path / "lab.png"
        grid.save_labels_png(path, labels)
        np.testing.assert_array_equal(grid.load_labels_png(path), labels)

    def test_labels_out_of_range(self, tmp_path):
        with pytest.raises(ShapeError):
            grid.save_labels_png(tmp_path / "bad.png", np.array([[300]]))
