"""Tests for image inputs."""
import numpy as np
import pytest
import torch

from src.exceptions import ConfigurationError, StoreError
from src.images import (
    COLOR_WORDS, QUADRANTS, caption_shots, color_field, cue_texture, cued_field, image_digest,
    load_images, load_png, quadrant_mask, save_png, synthetic_images
)


class TestSyntheticImages:
    """Seeded procedural color fields."""

    def test_deterministic(self):
        a = synthetic_images(3, 4)
        b = synthetic_images(3, 4)
        assert [i.name for i in a] == [i.name for i in b]
        assert all(torch.equal(x.pixels, y.pixels) for x, y in zip(a, b))

    def test_shape_and_range(self):
        for image in synthetic_images(0, 3, size=16):
            assert image.pixels.shape == (16, 16, 3)
            assert float(image.pixels.min()) >= 0.0 and float(image.pixels.max()) <= 1.0

    def test_caption_shots(self):
        shots = caption_shots(5, 2, size=8, dtype=torch.float64)
        assert len(shots) == 2
        assert all(text in COLOR_WORDS for _, text in shots)
        again = caption_shots(5, 2, size=8, dtype=torch.float64)
        assert all(torch.equal(a[0], b[0]) for a, b in zip(shots, again))

    def test_digest_tracks_content(self):
        image = synthetic_images(0, 1)[0].pixels
        assert image_digest(image) == image_digest(image.clone())
        changed = image.clone()
        changed[0, 0, 0] = 1 - changed[0, 0, 0]
        assert image_digest(image) != image_digest(changed)


class TestLoadImages:
    """Image source resolution."""

    def test_synthetic_source(self):
        images = load_images("synthetic:1:2", size=8)
        assert len(images) == 2 and images[0].pixels.shape == (8, 8, 3)

    @pytest.mark.parametrize("source", ["synthetic:1", "synthetic:a:2", "synthetic:1:0"])
    def test_bad_synthetic_source(self, source):
        with pytest.raises(ConfigurationError):
            load_images(source)

    def test_glob_without_matches(self, tmp_path):
        with pytest.raises(ConfigurationError, match="No images match"):
            load_images(str(tmp_path / "*.png"))

    def test_png_round_trip_is_eight_bit(self, tmp_path):
        """Writing and reading quantizes to multiples of 1/255."""
        image = synthetic_images(0, 1, size=8, dtype=torch.float64)[0].pixels
        save_png(image, tmp_path / "a.png")
        loaded = load_images(str(tmp_path / "*.png"), size=8, dtype=torch.float64)[0].pixels
        assert float((loaded - image).abs().max()) <= 0.5 / 255 + 1e-12
        torch.testing.assert_close(loaded * 255, (loaded * 255).round(), rtol=0, atol=1e-9)

    def test_unreadable_png(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"not a png")
        with pytest.raises(StoreError):
            load_png(path)


class TestResponseCues:
    """Quadrant-localized response textures of the pretraining task."""

    def test_quadrants_partition_the_image(self):
        masks = [quadrant_mask(q, 8) for q in range(QUADRANTS)]
        assert (np.sum(masks, axis=0) == 1).all()
        assert masks[0][0, 0] and masks[3][7, 7]

    def test_invalid_quadrant(self):
        with pytest.raises(ConfigurationError, match="Quadrant"):
            quadrant_mask(QUADRANTS, 8)

    def test_textures_are_fixed_signs(self):
        texture = cue_texture(2, 8)
        assert set(np.unique(texture)) == {-1.0, 1.0}
        assert np.array_equal(texture, cue_texture(2, 8))
        assert not np.array_equal(texture, cue_texture(3, 8))

    def test_cue_only_touches_its_quadrant(self):
        """Same noise stream: the cued image differs from the plain one only in the cue quadrant."""
        plain = color_field("purple", np.random.default_rng(4), size=16, dtype=torch.float64)
        cued = cued_field("purple", {1: (0, 0.05)}, np.random.default_rng(4), size=16, dtype=torch.float64)
        diff = (cued - plain).numpy()
        outside = ~quadrant_mask(1, 16)
        assert np.abs(diff[outside]).max() == 0.0
        assert np.abs(diff).max() <= 0.05 + 1e-12
        assert float((diff * cue_texture(0, 16)).sum()) > 0.0
