"""Dense + batch-norm feedforward networks for teacher, student and generator.

Three forward modes:

* ``train``   - normalize with batch statistics and update running stats.
* ``eval``    - normalize with running stats; nothing is mutated.
* ``observe`` - same outputs as ``eval``, but also return the batch mean and
  (biased) variance seen at every BN input, as graph tensors so a loss on
  them can be backpropagated to the input batch.
"""

from __future__ import annotations

import copy
import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .errors import BatchTooSmall, ChecksumMismatch, SchemaVersionMismatch, ShapeMismatch

SCHEMA_VERSION = 1
MODES = ("train", "eval", "observe")


class DenseLayer:
    kind = "dense"

    def __init__(self, d_in: int, d_out: int, rng: Optional[np.random.Generator] = None):
        self.d_in, self.d_out = d_in, d_out
        if rng is None:
            self.weight = np.zeros((d_out, d_in))
        else:
            bound = np.sqrt(6.0 / (d_in + d_out))
            self.weight = rng.uniform(-bound, bound, size=(d_out, d_in))
        self.bias = np.zeros(d_out)

    def spec(self):
        return {"type": "dense", "in": self.d_in, "out": self.d_out}

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: Tensor, p) -> Tensor:
        if x.shape[1] != self.d_in:
            raise ShapeMismatch(f"dense layer expects width {self.d_in}, got {x.shape[1]}")
        return ad.add(ad.matmul(x, ad.transpose(p["weight"])), p["bias"])


class BatchNormLayer:
    kind = "bn"

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def spec(self):
        return {"type": "bn", "dim": self.dim, "momentum": self.momentum, "eps": self.eps}

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x: Tensor, p, mode: str):
        obs = None
        if mode in ("train", "observe"):
            if x.shape[0] < 2:
                raise BatchTooSmall(f"{mode} mode needs batch >= 2, got {x.shape[0]}")
            mu = ad.mean(x, 0)
            centered = ad.sub(x, mu)
            var = ad.mean(ad.square(centered), 0)
        if mode == "train":
            m = self.momentum
            self.running_mean[:] = (1 - m) * self.running_mean + m * mu.data
            self.running_var[:] = (1 - m) * self.running_var + m * var.data
            xhat = ad.div(centered, ad.sqrt(ad.add(var, self.eps)))
        else:
            if mode == "observe":
                obs = (mu, var)
            den = np.sqrt(self.running_var + self.eps)
            xhat = ad.div(ad.sub(x, self.running_mean), den)
        return ad.add(ad.mul(xhat, p["gamma"]), p["beta"]), obs


_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


class Activation:
    def __init__(self, name: str):
        if name not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {name!r}")
        self.kind = name

    def spec(self):
        return {"type": self.kind}

    def params(self):
        return {}


@dataclass
class BnObservation:
    """Per-BN-layer batch mean and variance, in network order."""

    means: list
    variances: list

    def __len__(self):
        return len(self.means)


class Network:
    def __init__(self, layers, kind: str = "classifier"):
        if kind not in ("classifier", "generator"):
            raise ValueError(f"unknown network kind {kind!r}")
        self.layers = list(layers)
        self.kind = kind
        width = None
        for layer in self.layers:
            if isinstance(layer, DenseLayer):
                if width is not None and layer.d_in != width:
                    raise ShapeMismatch(f"layer width {layer.d_in} does not follow {width}")
                width = layer.d_out
            elif isinstance(layer, BatchNormLayer):
                if width is not None and layer.dim != width:
                    raise ShapeMismatch(f"bn width {layer.dim} does not follow {width}")
        if kind == "generator" and self.layers[-1].kind != "tanh":
            raise ValueError("generator must end in tanh")

    @property
    def d_in(self) -> int:
        return next(l for l in self.layers if isinstance(l, DenseLayer)).d_in

    @property
    def d_out(self) -> int:
        return [l for l in self.layers if isinstance(l, DenseLayer)][-1].d_out

    @property
    def bn_layers(self) -> list[BatchNormLayer]:
        return [l for l in self.layers if isinstance(l, BatchNormLayer)]

    def params(self) -> dict[str, np.ndarray]:
        """Parameter arrays keyed ``"<layer index>.<name>"``; arrays are live references."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"{i}.{name}"] = arr
        return out

    def bind(self, graph: Graph, trainable: bool = True) -> dict[str, Tensor]:
        make = graph.param if trainable else graph.const
        return {k: make(v, k) if trainable else make(v) for k, v in self.params().items()}

    def forward(self, x, mode: str = "eval", params: Optional[dict] = None, graph: Optional[Graph] = None):
        """Run the network; returns ``(output, observation or None)``.

        ``x`` may be a Tensor or an array (wrapped as a constant in ``graph``
        or a fresh graph). Without ``params`` the network's own arrays are
        bound as constants.
        """
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if not isinstance(x, Tensor):
            x = (graph or Graph()).const(x)
        if x.data.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeMismatch(f"expected input width {self.d_in}, got shape {x.shape}")
        if params is None:
            params = self.bind(x.graph, trainable=False)
        means, variances = [], []
        h = x
        for i, layer in enumerate(self.layers):
            p = {name: params[f"{i}.{name}"] for name in layer.params()}
            if isinstance(layer, DenseLayer):
                h = layer.forward(h, p)
            elif isinstance(layer, BatchNormLayer):
                h, obs = layer.forward(h, p, mode)
                if obs is not None:
                    means.append(obs[0])
                    variances.append(obs[1])
            else:
                h = _ACTIVATIONS[layer.kind](h)
        return h, (BnObservation(means, variances) if mode == "observe" else None)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode outputs as a plain array."""
        return self.forward(np.asarray(x, dtype=np.float64), "eval")[0].data

    def penultimate(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode input to the final dense layer."""
        last = max(i for i, l in enumerate(self.layers) if isinstance(l, DenseLayer))
        trimmed = Network.__new__(Network)
        trimmed.layers, trimmed.kind = self.layers[:last], "classifier"
        return trimmed.forward(np.asarray(x, dtype=np.float64), "eval")[0].data

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def layer_spec(self) -> list[dict]:
        return [l.spec() for l in self.layers]

    def checksum(self) -> int:
        return zlib.crc32(_canonical(_payload(self)).encode())


def make_classifier(d_in: int, hidden, classes: int, rng: np.random.Generator) -> Network:
    layers, width = [], d_in
    for h in hidden:
        layers += [DenseLayer(width, h, rng), BatchNormLayer(h), Activation("relu")]
        width = h
    layers.append(DenseLayer(width, classes, rng))
    return Network(layers, "classifier")


def make_generator(d_z: int, hidden, d_x: int, rng: np.random.Generator) -> Network:
    layers, width = [], d_z
    for h in hidden:
        layers += [DenseLayer(width, h, rng), BatchNormLayer(h), Activation("relu")]
        width = h
    layers += [DenseLayer(width, d_x, rng), Activation("tanh")]
    return Network(layers, "generator")


def generator_forward(gen: Network, z, mode: str = "train", params=None, graph=None) -> Tensor:
    """Synthesize a batch from latent vectors; outputs lie in (-1, 1)."""
    if gen.kind != "generator":
        raise ValueError("generator_forward needs a generator network")
    return gen.forward(z, mode, params=params, graph=graph)[0]


def classifier_forward(net: Network, x, mode: str = "eval", params=None, graph=None):
    return net.forward(x, mode, params=params, graph=graph)


# ---------------------------------------------------------------------------
# checkpoints


def _canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _payload(net: Network, meta: Optional[dict] = None) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": net.kind,
        "layer_spec": net.layer_spec(),
        "params": [arr.tolist() for arr in net.params().values()],
        "bn_running": [{"mean": l.running_mean.tolist(), "var": l.running_var.tolist()} for l in net.bn_layers],
    }
    if meta:
        doc["meta"] = meta
    return doc


def dumps_network(net: Network, meta: Optional[dict] = None) -> str:
    doc = _payload(net, meta)
    doc["crc32"] = zlib.crc32(_canonical(doc).encode())
    return _canonical(doc) + "\n"


def save_network(net: Network, path: Union[str, Path], meta: Optional[dict] = None) -> None:
    Path(path).write_text(dumps_network(net, meta))


def loads_network(text: str) -> tuple[Network, dict]:
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"expected schema_version {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")
    stored = doc.pop("crc32", None)
    if stored != zlib.crc32(_canonical(doc).encode()):
        raise ChecksumMismatch("checkpoint checksum does not match its contents")
    layers = []
    for s in doc["layer_spec"]:
        if s["type"] == "dense":
            layers.append(DenseLayer(s["in"], s["out"]))
        elif s["type"] == "bn":
            layers.append(BatchNormLayer(s["dim"], s["momentum"], s["eps"]))
        else:
            layers.append(Activation(s["type"]))
    net = Network(layers, doc["kind"])
    arrays = list(net.params().values())
    if len(arrays) != len(doc["params"]):
        raise ShapeMismatch("parameter count does not match layer spec")
    for arr, value in zip(arrays, doc["params"]):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != arr.shape:
            raise ShapeMismatch(f"stored parameter shape {value.shape} != {arr.shape}")
        arr[...] = value
    for layer, run in zip(net.bn_layers, doc["bn_running"]):
        layer.running_mean[:] = run["mean"]
        layer.running_var[:] = run["var"]
    return net, doc.get("meta", {})


def load_network(path: Union[str, Path]) -> Network:
    return loads_network(Path(path).read_text())[0]


def load_network_with_meta(path: Union[str, Path]) -> tuple[Network, dict]:
    return loads_network(Path(path).read_text())
