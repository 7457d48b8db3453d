"""Synthetic desk-scale datasets and keyed random streams.

Random numbers come from numpy's Philox counter-based bit generator. A stream
is identified by ``(seed, name)``, so data, initialization and latent noise
never share draws and do not depend on evaluation order. Normal variates use
numpy's ziggurat sampler (``Generator.standard_normal``).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidSpec


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator keyed by ``seed`` and a stream name."""
    key = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return np.random.Generator(np.random.Philox(key))


def sample_latent(rng: np.random.Generator, batch: int, d_z: int) -> np.ndarray:
    if batch < 1 or d_z < 1:
        raise ValueError("batch and d_z must be >= 1")
    return rng.standard_normal((batch, d_z))


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    classes: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    grid: Optional[tuple] = None
    spec: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[self.train_idx], self.y[self.train_idx]

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[self.test_idx], self.y[self.test_idx]

    def eval_view(self) -> "EvalView":
        x, y = self.test
        return EvalView(x.copy(), y.copy(), self.classes, self.grid)

    def to_json(self) -> str:
        doc = {
            "spec": self.spec,
            "seed": self.spec.get("seed"),
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "grid": list(self.grid) if self.grid else None,
            "split": {"train": self.train_idx.tolist(), "test": self.test_idx.tolist()},
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        doc = json.loads(text)
        grid = tuple(doc["grid"]) if doc["grid"] else None
        return cls(
            np.asarray(doc["x"], dtype=np.float64),
            np.asarray(doc["y"], dtype=np.int64),
            int(doc["spec"]["classes"]),
            np.asarray(doc["split"]["train"], dtype=np.int64),
            np.asarray(doc["split"]["test"], dtype=np.int64),
            grid,
            doc["spec"],
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class EvalView:
    """Held-out labelled data; the only real data the distillation loop sees."""

    x: np.ndarray
    y: np.ndarray
    classes: int
    grid: Optional[tuple] = None


def _split(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_train = int(round(0.8 * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def make_blobs(classes: int, per_class: int, d: int, spread: float, seed: int) -> Dataset:
    if classes < 2 or d < 2 or per_class < 1 or spread < 0:
        raise InvalidSpec("make_blobs needs classes >= 2, d >= 2, per_class >= 1, spread >= 0")
    rng = rng_stream(seed, "data/blobs")
    centers = rng.uniform(-0.8, 0.8, size=(classes, d))
    y = np.repeat(np.arange(classes), per_class)
    x = np.clip(centers[y] + spread * rng.standard_normal((y.size, d)), -1.0, 1.0)
    train_idx, test_idx = _split(y.size, rng_stream(seed, "data/split"))
    spec = {"kind": "blobs", "classes": classes, "per_class": per_class, "d": d, "spread": spread, "seed": seed}
    return Dataset(x, y, classes, train_idx, test_idx, None, spec)


def make_grid_patterns(classes: int, per_class: int, grid: tuple, noise: float, seed: int) -> Dataset:
    h, w = grid
    if classes < 2 or h < 2 or w < 2 or per_class < 1 or noise < 0:
        raise InvalidSpec("make_grid_patterns needs classes >= 2, H, W >= 2, per_class >= 1, noise >= 0")
    if classes > 2 ** (h * w):
        raise InvalidSpec("more classes than distinct binary patterns on this grid")
    rng = rng_stream(seed, "data/templates")
    templates: list[np.ndarray] = []
    while len(templates) < classes:
        t = rng.integers(0, 2, size=h * w)
        if any(np.array_equal(t, u) for u in templates):
            continue
        templates.append(t)
    templates_pm = np.stack(templates).astype(np.float64) * 1.6 - 0.8
    y = np.repeat(np.arange(classes), per_class)
    pixel_rng = rng_stream(seed, "data/noise")
    x = np.clip(templates_pm[y] + noise * pixel_rng.standard_normal((y.size, h * w)), -1.0, 1.0)
    train_idx, test_idx = _split(y.size, rng_stream(seed, "data/split"))
    spec = {
        "kind": "grid",
        "classes": classes,
        "per_class": per_class,
        "grid": [h, w],
        "noise": noise,
        "seed": seed,
    }
    return Dataset(x, y, classes, train_idx, test_idx, (h, w), spec)


def make_dataset(spec: dict) -> Dataset:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "blobs":
            return make_blobs(spec["classes"], spec["per_class"], spec["d"], spec["spread"], spec["seed"])
        if kind == "grid":
            return make_grid_patterns(spec["classes"], spec["per_class"], tuple(spec["grid"]), spec["noise"], spec["seed"])
    except KeyError as exc:
        raise InvalidSpec(f"dataset spec is missing {exc}") from None
    raise InvalidSpec(f"unknown dataset kind {kind!r}")
