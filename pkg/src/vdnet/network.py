"""Sequential models, momentum SGD, classifier training and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "relu", "maxpool", "gap", "dense", "flatten")
CHECKPOINT_MAGIC = b"VDN1"
CHECKPOINT_VERSION = 1


class ModelShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    """Checkpoint file is corrupt or truncated."""


class CheckpointVersionError(CheckpointError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``params`` carries the geometry for its kind.

    conv: ``out_channels``, ``kernel``, ``stride`` (1), ``padding`` (0).
    maxpool: ``window``, ``stride`` (= window).
    dense: ``units``.
    """

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def get(self, key, default=None):
        return self.params.get(key, default)

    def to_json(self) -> dict:
        return {"kind": self.kind, **dict(self.params)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "LayerSpec":
        obj = dict(obj)
        return cls(obj.pop("kind"), obj)


def conv(out_channels: int, kernel: int = 3, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec("conv", {"out_channels": out_channels, "kernel": kernel,
                              "stride": stride, "padding": padding})


def maxpool(window: int = 2, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool", {"window": window, "stride": stride or window})


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", {"units": units})


def relu() -> LayerSpec:
    return LayerSpec("relu")


def gap() -> LayerSpec:
    return LayerSpec("gap")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def _out_extent(n: int, k: int, s: int, p: int, where: str) -> int:
    if k > n + 2 * p or (n + 2 * p - k) % s:
        raise ModelShapeError(f"{where}: extent {n}, window {k}, stride {s}, padding {p}")
    return (n + 2 * p - k) // s + 1


def infer_shapes(input_shape: tuple[int, ...], layers: Iterable[LayerSpec]) -> list[tuple[int, ...]]:
    """Output shape of every layer for a single (unbatched) input."""
    shape = tuple(input_shape)
    shapes = []
    for i, layer in enumerate(layers):
        where = f"layer {i} ({layer.kind})"
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ModelShapeError(f"{where}: needs [c,h,w] input, got {shape}")
            k, s, p = layer.get("kernel"), layer.get("stride", 1), layer.get("padding", 0)
            shape = (layer.get("out_channels"), _out_extent(shape[1], k, s, p, where),
                     _out_extent(shape[2], k, s, p, where))
        elif layer.kind == "maxpool":
            if len(shape) != 3:
                raise ModelShapeError(f"{where}: needs [c,h,w] input, got {shape}")
            w, s = layer.get("window"), layer.get("stride", layer.get("window"))
            shape = (shape[0], _out_extent(shape[1], w, s, 0, where), _out_extent(shape[2], w, s, 0, where))
        elif layer.kind == "gap":
            if len(shape) != 3:
                raise ModelShapeError(f"{where}: needs [c,h,w] input, got {shape}")
            shape = (shape[0],)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise ModelShapeError(f"{where}: needs a vector input, got {shape}")
            shape = (layer.get("units"),)
        shapes.append(shape)
    return shapes


class Model:
    """A sequential stack of layers with named parameters.

    Parameters are named ``"<index>.weight"`` / ``"<index>.bias"`` after the
    layer that owns them. Models whose spatial axes are consumed by ``gap``
    before any ``flatten``/``dense`` layer accept inputs of any spatial size
    with the declared channel count.
    """

    def __init__(self, layers: list[LayerSpec], input_shape: tuple[int, ...],
                 params: dict[str, Tensor], class_names: list[str] | None = None,
                 metadata: dict | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.params = dict(params)
        self.class_names = list(class_names or [])
        self.metadata = dict(metadata or {})
        self.shapes = infer_shapes(self.input_shape, self.layers)
        expected = self.param_shapes()
        if set(expected) != set(self.params):
            raise ModelShapeError(
                f"parameters {sorted(self.params)} do not match layers {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ModelShapeError(f"parameter {name}: {self.params[name].shape} != {shape}")

    @classmethod
    def build(cls, input_shape, layers, class_names=None, seed: int = 0,
              metadata: dict | None = None) -> "Model":
        """He-normal weights, zero biases, drawn from ``numpy.random.default_rng(seed)``."""
        layers = list(layers)
        rng = np.random.default_rng(seed)
        shapes = _param_shapes(tuple(input_shape), layers)
        params = {}
        for name, shape in shapes.items():
            if name.endswith(".bias"):
                params[name] = Tensor(np.zeros(shape), requires_grad=True)
            else:
                fan_in = int(np.prod(shape[1:]))
                params[name] = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), shape),
                                      requires_grad=True)
        return cls(layers, input_shape, params, class_names, metadata)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return _param_shapes(self.input_shape, self.layers)

    @property
    def fully_convolutional(self) -> bool:
        for layer in self.layers:
            if layer.kind in ("flatten", "dense"):
                return False
            if layer.kind == "gap":
                return True
        return True

    def conv_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == "conv"]

    def last_conv_activation_index(self) -> int:
        """Index of the last conv layer, or of the relu directly after it."""
        convs = self.conv_indices()
        if not convs:
            raise ModelShapeError("model has no convolutional layer")
        i = convs[-1]
        if i + 1 < len(self.layers) and self.layers[i + 1].kind == "relu":
            return i + 1
        return i

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> "Model":
        params = {k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()}
        return Model(self.layers, self.input_shape, params, self.class_names, self.metadata)


def _param_shapes(input_shape, layers) -> dict[str, tuple[int, ...]]:
    shapes = {}
    prev = tuple(input_shape)
    for i, (layer, out) in enumerate(zip(layers, infer_shapes(input_shape, layers))):
        if layer.kind == "conv":
            k = layer.get("kernel")
            shapes[f"{i}.weight"] = (layer.get("out_channels"), prev[0], k, k)
            shapes[f"{i}.bias"] = (layer.get("out_channels"),)
        elif layer.kind == "dense":
            shapes[f"{i}.weight"] = (layer.get("units"), prev[0])
            shapes[f"{i}.bias"] = (layer.get("units"),)
        prev = out
    return shapes


def _check_input(model: Model, x: Tensor) -> None:
    want = model.input_shape
    got = x.shape if x.ndim == len(want) else x.shape[1:]
    if x.ndim not in (len(want), len(want) + 1):
        raise ModelShapeError(f"input {x.shape} does not match declared {want}")
    if model.fully_convolutional and len(want) == 3:
        if got[0] != want[0]:
            raise ModelShapeError(f"input channels {got[0]} != declared {want[0]}")
    elif got != want:
        raise ModelShapeError(f"input {got} does not match declared {want}")


def forward(model: Model, x: Tensor, capture: Iterable[int] = (), stop_after: int | None = None,
            params: Mapping[str, Tensor] | None = None) -> tuple[Tensor, dict[int, Tensor]]:
    """Run the stack on ``x`` (single sample or batch).

    Returns the final output and ``{layer index: activation}`` for each index in
    ``capture``. ``stop_after`` truncates the pass after that layer.
    """
    _check_input(model, x)
    params = model.params if params is None else params
    capture = set(capture)
    batched = x.ndim == len(model.input_shape) + 1
    captured: dict[int, Tensor] = {}
    last = len(model.layers) - 1 if stop_after is None else stop_after
    h = x
    for i, layer in enumerate(model.layers[: last + 1]):
        try:
            h = _apply(layer, i, h, params, batched)
        except (T.ShapeError, T.GeometryError) as exc:
            raise ModelShapeError(f"layer {i} ({layer.kind}): {exc}") from exc
        if i in capture:
            captured[i] = h
    return h, captured


def _apply(layer: LayerSpec, i: int, h: Tensor, params, batched: bool) -> Tensor:
    kind = layer.kind
    if kind == "conv":
        return T.conv2d(h, params[f"{i}.weight"], params[f"{i}.bias"],
                        stride=layer.get("stride", 1), padding=layer.get("padding", 0))
    if kind == "relu":
        return T.relu(h)
    if kind == "maxpool":
        return T.maxpool2d(h, layer.get("window"), layer.get("stride", layer.get("window")))
    if kind == "gap":
        return T.spatial_mean(h)
    if kind == "flatten":
        return T.reshape(h, (h.shape[0], -1) if batched else (-1,))
    if kind == "dense":
        return T.dense(h, params[f"{i}.weight"], params[f"{i}.bias"])
    raise AssertionError(kind)


# ---------------------------------------------------------------- optimiser


@dataclass
class SgdMomentumState:
    learning_rate: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(state: SgdMomentumState, params: Mapping[str, Tensor],
             grads: Mapping[str, np.ndarray]) -> tuple[dict[str, Tensor], SgdMomentumState]:
    """Classical momentum: ``v <- mu*v - lr*g``; ``p <- p + v``."""
    if set(params) != set(grads):
        raise KeyError(f"parameter keys {sorted(params)} != gradient keys {sorted(grads)}")
    lr, mu = state.learning_rate, state.momentum
    velocity, new_params = {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros(p.shape)
        v = mu * v - lr * g
        velocity[name] = v
        new_params[name] = Tensor(p.data + v, requires_grad=True)
    return new_params, SgdMomentumState(lr, mu, velocity)


# ---------------------------------------------------------------- training


@dataclass
class Schedule:
    """Epoch-based schedule with stepwise learning-rate decay."""

    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.1
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        steps = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.learning_rate * self.decay_factor ** steps

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "momentum": self.momentum,
                "decay_epochs": list(self.decay_epochs), "decay_factor": self.decay_factor,
                "seed": self.seed}


@dataclass
class TrainingReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    batches_per_epoch: int = 0
    extra: dict[str, list[float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"epoch_loss": self.epoch_loss, "epoch_accuracy": self.epoch_accuracy,
                "batches_per_epoch": self.batches_per_epoch, **self.extra}


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def param_grads(model_params: Mapping[str, Tensor], grads: T.GradientMap) -> dict[str, np.ndarray]:
    return {name: (grads.array(p) if p in grads else np.zeros(p.shape))
            for name, p in model_params.items()}


def predict(model: Model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Class predictions for a stack of inputs."""
    out = []
    for i in range(0, len(images), batch_size):
        logits, _ = forward(model, Tensor(images[i:i + batch_size]))
        out.append(logits.data.argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(model, images) == np.asarray(labels)))


def train_classifier(model: Model, images: np.ndarray, labels: np.ndarray,
                     schedule: Schedule) -> TrainingReport:
    """Minimise mean softmax cross-entropy with momentum SGD.

    ``model.params`` is replaced after every step. Shuffling uses
    ``default_rng(schedule.seed)`` so identical inputs give identical runs.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(schedule.seed)
    state = SgdMomentumState(schedule.learning_rate, schedule.momentum)
    report = TrainingReport(batches_per_epoch=math.ceil(len(images) / schedule.batch_size))
    for epoch in range(schedule.epochs):
        state.learning_rate = schedule.lr_at(epoch)
        total, correct = 0.0, 0
        for idx in batches(len(images), schedule.batch_size, rng):
            logits, _ = forward(model, Tensor(images[idx]))
            loss = T.mean_all(T.cross_entropy_rows(logits, labels[idx]))
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"loss became {loss.item()} in epoch {epoch}")
            grads = T.backward(loss)
            model.params, state = sgd_step(state, model.params, param_grads(model.params, grads))
            total += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        report.epoch_loss.append(total / len(images))
        report.epoch_accuracy.append(correct / len(images))
        logger.info("epoch %d loss %.4f acc %.3f", epoch, report.epoch_loss[-1], report.epoch_accuracy[-1])
    return report


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: Model, path, state: SgdMomentumState | None = None) -> None:
    """Write ``VDN1 | u32 header length | JSON header | float64 LE payload``."""
    names = list(model.params)
    header = {
        "version": CHECKPOINT_VERSION,
        "input_shape": list(model.input_shape),
        "layers": [layer.to_json() for layer in model.layers],
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "class_names": model.class_names,
        "metadata": model.metadata,
    }
    arrays = [model.params[n].data for n in names]
    if state is not None:
        header["optimizer"] = {"learning_rate": state.learning_rate, "momentum": state.momentum,
                               "velocity": [n for n in names if n in state.velocity]}
        arrays += [state.velocity[n] for n in header["optimizer"]["velocity"]]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob + payload)


def _read_checkpoint(path) -> tuple[dict, list[np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if 8 + hlen > len(raw):
        raise CheckpointError(f"{path}: header truncated")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {header.get('version')}, expected {CHECKPOINT_VERSION}")
    shapes = [tuple(p["shape"]) for p in header["params"]]
    opt = header.get("optimizer")
    if opt:
        by_name = {p["name"]: tuple(p["shape"]) for p in header["params"]}
        shapes += [by_name[n] for n in opt["velocity"]]
    need = sum(int(np.prod(s)) for s in shapes) * 8
    payload = raw[8 + hlen:]
    if len(payload) != need:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    arrays, offset = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(s).astype(np.float64))
        offset += n * 8
    return header, arrays


def load_checkpoint(path) -> Model:
    header, arrays = _read_checkpoint(path)
    names = [p["name"] for p in header["params"]]
    params = {n: Tensor(a, requires_grad=True) for n, a in zip(names, arrays)}
    layers = [LayerSpec.from_json(obj) for obj in header["layers"]]
    return Model(layers, tuple(header["input_shape"]), params, header["class_names"], header["metadata"])


def load_optimizer_state(path) -> SgdMomentumState | None:
    header, arrays = _read_checkpoint(path)
    opt = header.get("optimizer")
    if not opt:
        return None
    vel = arrays[len(header["params"]):]
    return SgdMomentumState(opt["learning_rate"], opt["momentum"], dict(zip(opt["velocity"], vel)))
