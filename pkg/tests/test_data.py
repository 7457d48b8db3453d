import numpy as np
import pytest

from tadfkd.data import Dataset, make_blobs, make_dataset, make_grid_patterns, rng_stream, sample_latent
from tadfkd.distill import train_teacher
from tadfkd.errors import InvalidSpec


def least_squares_accuracy(x, y, classes):
    design = np.hstack([x, np.ones((len(x), 1))])
    coef, *_ = np.linalg.lstsq(design, np.eye(classes)[y], rcond=None)
    return float(np.mean((design @ coef).argmax(axis=1) == y))


class TestBlobs:
    def test_sizes(self):
        ds = make_blobs(2, 10, 2, 0.0, 0)
        assert ds.x.shape == (20, 2)
        assert len(ds.train_idx) == 16 and len(ds.test_idx) == 4
        assert set(ds.train_idx).isdisjoint(ds.test_idx)

    def test_deterministic(self):
        a, b = make_blobs(3, 8, 4, 0.2, 5), make_blobs(3, 8, 4, 0.2, 5)
        assert a.x.tobytes() == b.x.tobytes()
        assert a.train_idx.tobytes() == b.train_idx.tobytes()
        assert make_blobs(3, 8, 4, 0.2, 6).x.tobytes() != a.x.tobytes()

    def test_zero_spread_is_linearly_separable(self):
        ds = make_blobs(3, 30, 4, 0.0, 1)
        assert least_squares_accuracy(ds.x, ds.y, 3) == 1.0

    def test_bounded(self):
        ds = make_blobs(3, 50, 4, 2.0, 1)
        assert np.all(np.abs(ds.x) <= 1.0)

    def test_invalid(self):
        with pytest.raises(InvalidSpec):
            make_blobs(1, 10, 2, 0.1, 0)


class TestGridPatterns:
    def test_zero_noise_samples_equal_templates(self):
        ds = make_grid_patterns(4, 5, (3, 3), 0.0, 0)
        for c in range(4):
            rows = ds.x[ds.y == c]
            assert np.all(rows == rows[0])
            assert set(np.unique(rows[0])) <= {-0.8, 0.8}

    def test_templates_distinct(self):
        ds = make_grid_patterns(8, 1, (2, 2), 0.0, 3)
        assert len({row.tobytes() for row in ds.x}) == 8

    def test_too_many_classes(self):
        with pytest.raises(InvalidSpec):
            make_grid_patterns(17, 1, (2, 2), 0.0, 0)

    def test_teacher_learns_low_noise(self):
        ds = make_grid_patterns(4, 60, (8, 8), 0.1, 0)
        (snap,) = train_teacher(ds, 5, hidden=(32, 16), seed=0)
        assert snap.test_accuracy > 0.95


class TestLatent:
    def test_moments(self):
        z = sample_latent(rng_stream(0, "noise/latent"), 100_000, 1)
        assert abs(z.mean()) < 0.02
        assert abs(z.var() - 1.0) < 0.05

    def test_streams_are_keyed(self):
        a = sample_latent(rng_stream(0, "a"), 4, 3)
        assert a.tobytes() == sample_latent(rng_stream(0, "a"), 4, 3).tobytes()
        assert a.tobytes() != sample_latent(rng_stream(0, "b"), 4, 3).tobytes()
        assert a.tobytes() != sample_latent(rng_stream(1, "a"), 4, 3).tobytes()

    def test_invalid_shape(self):
        with pytest.raises(ValueError):
            sample_latent(rng_stream(0, "a"), 0, 3)


def test_cache_round_trip(tmp_path):
    ds = make_dataset({"kind": "grid", "classes": 3, "per_class": 4, "grid": [3, 3], "noise": 0.3, "seed": 2})
    ds.save(tmp_path / "ds.json")
    back = Dataset.load(tmp_path / "ds.json")
    assert back.x.tobytes() == ds.x.tobytes()
    assert back.y.tolist() == ds.y.tolist()
    assert back.grid == (3, 3)
    assert back.to_json() == ds.to_json()


def test_unknown_kind():
    with pytest.raises(InvalidSpec):
        make_dataset({"kind": "moons"})
