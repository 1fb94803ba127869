"""Hybrid 3D->1D network, the plain 3D-CNN baseline, training and inference."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import statistics
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from crophybrid import tensor
from crophybrid.features import CHANNEL_ORDER
from crophybrid.nn import parallel
from crophybrid.nn.gradcheck import GradReport, grad_check
from crophybrid.nn.layers import (
    BatchNorm,
    Conv1d,
    Conv3d,
    ConvNd,
    Dense,
    Flatten,
    Layer,
    ReLU,
    Squeeze,
    Standardize,
    softmax,
    softmax_xent,
)
from crophybrid.nn.optim import AdamState, adam_step
from crophybrid.tensor import ShapeError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CHKP"
KINDS = ("hybrid", "baseline3d")


class ArchitectureError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class ConvBlock:
    filters: int
    kernel: list[int]
    padding: list[str]
    batch_norm: bool = True


@dataclass
class ArchitectureConfig:
    kind: str = "hybrid"
    input_shape: list[int] = field(default_factory=lambda: [7, 7, 9, 13])
    conv3d: list[ConvBlock] = field(default_factory=list)
    conv1d: list[ConvBlock] = field(default_factory=list)
    dense: list[int] = field(default_factory=list)
    classes: int = 10

    def __post_init__(self):
        self.conv3d = [b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.conv3d]
        self.conv1d = [b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.conv1d]
        self.input_shape = list(self.input_shape)
        if self.kind not in KINDS:
            raise ArchitectureError(f"unknown architecture kind {self.kind!r}")
        if self.classes < 2:
            raise ArchitectureError("need at least two classes")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ArchitectureConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_hybrid(classes: int = 10, input_shape=(7, 7, 9, 13)) -> ArchitectureConfig:
    """Three valid-spatial / same-temporal 3D blocks take 7x7 down to 1x1,
    then two 1D blocks over the 9 months and a 128-wide dense layer."""
    sp = ["valid", "valid", "same"]
    return ArchitectureConfig(
        kind="hybrid",
        input_shape=list(input_shape),
        conv3d=[ConvBlock(f, [3, 3, 3], sp) for f in (32, 64, 64)],
        conv1d=[ConvBlock(f, [3], ["same"]) for f in (128, 128)],
        dense=[128],
        classes=classes,
    )


def default_baseline(classes: int = 10, input_shape=(7, 7, 9, 13)) -> ArchitectureConfig:
    """Two 3D blocks with 64 and 128 filters, flattened into a dense head."""
    return ArchitectureConfig(
        kind="baseline3d",
        input_shape=list(input_shape),
        conv3d=[ConvBlock(f, [3, 3, 3], ["valid"] * 3) for f in (64, 128)],
        dense=[32],
        classes=classes,
    )


def micro_hybrid(classes: int = 2) -> ArchitectureConfig:
    """Smallest hybrid that still exercises every layer type (for gradient checks)."""
    return ArchitectureConfig(
        kind="hybrid",
        input_shape=[3, 3, 3, 2],
        conv3d=[ConvBlock(2, [3, 3, 3], ["valid", "valid", "same"])],
        conv1d=[ConvBlock(2, [3], ["same"])],
        dense=[3],
        classes=classes,
    )


def micro_baseline(classes: int = 2) -> ArchitectureConfig:
    return ArchitectureConfig(
        kind="baseline3d",
        input_shape=[5, 5, 4, 2],
        conv3d=[ConvBlock(2, [3, 3, 3], ["valid"] * 3), ConvBlock(2, [3, 3, 1], ["same", "valid", "same"])],
        dense=[3],
        classes=classes,
    )


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))


class Model:
    """An ordered list of layers plus optimizer state and training history."""

    def __init__(self, config: ArchitectureConfig, layers: list[Layer], seed: int = 0):
        self.config = config
        self.layers = layers
        self.seed = seed
        self.adam = AdamState()
        self.history: list[dict] = []
        self.epoch = 0
        self.normalized = False
        self.best_epoch: int | None = None
        self.meta: dict = {}  # extra checkpoint header entries (class names, provenance)
        self.shapes = self._shape_chain()
        if isinstance(layers[1], ConvNd):
            layers[1].input_grad = False

    def _shape_chain(self) -> list[tuple[int, ...]]:
        shape = tuple(self.config.input_shape)
        shapes = [shape]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    @property
    def dtype(self):
        return self.layers[0].buffers["mean"].dtype

    def astype(self, dtype) -> "Model":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def forward(self, x, train=False):
        x = np.asarray(x)
        if x.shape[1:] != tuple(self.config.input_shape):
            raise ShapeError(f"model expects input (N, {', '.join(map(str, self.config.input_shape))}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad, input_grad=False):
        first = self.layers[1]
        saved = getattr(first, "input_grad", None)
        if saved is not None and input_grad:
            first.input_grad = True
        try:
            for layer in reversed(self.layers):
                grad = layer.backward(grad)
                if grad is None:
                    break
        finally:
            if saved is not None:
                first.input_grad = saved
        return grad

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{i}.{layer.name}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{i}.{layer.name}.{k}": layer.grads[k] for i, layer in enumerate(self.layers) for k in layer.params}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{i}.{layer.name}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.buffers.items()}

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, for snapshot/restore."""
        return {k: v.copy() for k, v in {**self.parameters(), **self.buffers()}.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for k in store:
                    store[k] = state[f"{i}.{layer.name}.{k}"].astype(store[k].dtype).copy()

    def fit_normalization(self, x: np.ndarray) -> None:
        self.layers[0].fit(x)
        self.normalized = True

    def layer_table(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [
            (layer.describe(), shape, sum(p.size for p in layer.params.values()))
            for layer, shape in zip(self.layers, self.shapes[1:])
        ]

    # -- checkpoints -------------------------------------------------------

    def to_bytes(self, extra: dict | None = None) -> bytes:
        params = self.parameters()
        buffers = self.buffers()
        header = {
            "format": 1,
            "architecture": self.config.to_dict(),
            "seed": self.seed,
            "epoch": self.epoch,
            "best_epoch": self.best_epoch,
            "normalized": self.normalized,
            "channel_order": list(CHANNEL_ORDER),
            "blocks": [{"name": k, "kind": "param"} for k in params] + [{"name": k, "kind": "buffer"} for k in buffers],
        }
        header.update({**self.meta, **(extra or {})})
        raw = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        for v in list(params.values()) + list(buffers.values()):
            tensor.write_tensor(buf, v)
        return buf.getvalue()

    def save(self, path, extra: dict | None = None) -> None:
        Path(path).write_bytes(self.to_bytes(extra))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Model":
        fh = io.BytesIO(raw)
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise tensor.FormatError("not a model checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        model = build_model(ArchitectureConfig.from_dict(header["architecture"]), seed=header["seed"])
        state = {b["name"]: tensor.read_tensor(fh).numpy() for b in header["blocks"]}
        model.load_state(state)
        model.epoch = header["epoch"]
        model.normalized = header["normalized"]
        model.best_epoch = header.get("best_epoch")
        core = ("format", "architecture", "seed", "epoch", "best_epoch", "normalized", "channel_order", "blocks")
        model.meta = {k: v for k, v in header.items() if k not in core}
        return model

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_bytes(Path(path).read_bytes())


def _conv_layers(blocks, cls, c_in, rng, dtype):
    layers = []
    for b in blocks:
        kernel = b.kernel[0] if cls is Conv1d else b.kernel
        padding = b.padding[0] if cls is Conv1d else b.padding
        layers.append(cls(c_in, b.filters, kernel, padding, rng=rng, dtype=dtype))
        if b.batch_norm:
            layers.append(BatchNorm(b.filters, dtype=dtype))
        layers.append(ReLU())
        c_in = b.filters
    return layers


def _head(in_features, widths, classes, rng, dtype):
    layers = []
    for w in widths:
        layers += [Dense(in_features, w, rng=rng, dtype=dtype), ReLU()]
        in_features = w
    layers.append(Dense(in_features, classes, rng=rng, dtype=dtype))
    return layers


def _trace(layers, shape):
    for layer in layers:
        shape = layer.output_shape(shape)
    return shape


def build_hybrid(cfg: ArchitectureConfig, seed: int = 0, dtype=np.float32) -> Model:
    """3D blocks, squeeze of the 1x1 spatial axes, 1D blocks, dense head."""
    rng = np.random.default_rng(seed)
    c = cfg.input_shape[-1]
    layers: list[Layer] = [Standardize(c, dtype=dtype)]
    layers += _conv_layers(cfg.conv3d, Conv3d, c, rng, dtype)
    shape = _trace(layers, tuple(cfg.input_shape))
    h, w = shape[0], shape[1]
    if (h, w) != (1, 1):
        bad = h if h != 1 else w
        raise ArchitectureError(
            f"spatial extent after the 3D blocks is {h}x{w}; squeeze needs 1x1 (offending extent {bad})"
        )
    layers.append(Squeeze((0, 1)))
    layers += _conv_layers(cfg.conv1d, Conv1d, shape[-1], rng, dtype)
    layers.append(Flatten())
    shape = _trace(layers, tuple(cfg.input_shape))
    layers += _head(shape[0], cfg.dense, cfg.classes, rng, dtype)
    return Model(cfg, layers, seed)


def build_3d_baseline(cfg: ArchitectureConfig, seed: int = 0, dtype=np.float32) -> Model:
    if cfg.conv1d:
        raise ArchitectureError("the 3D baseline has no 1D blocks")
    rng = np.random.default_rng(seed)
    c = cfg.input_shape[-1]
    layers: list[Layer] = [Standardize(c, dtype=dtype)]
    layers += _conv_layers(cfg.conv3d, Conv3d, c, rng, dtype)
    layers.append(Flatten())
    shape = _trace(layers, tuple(cfg.input_shape))
    layers += _head(shape[0], cfg.dense, cfg.classes, rng, dtype)
    return Model(cfg, layers, seed)


def build_model(cfg: ArchitectureConfig, seed: int = 0, dtype=np.float32) -> Model:
    if cfg.kind == "hybrid":
        return build_hybrid(cfg, seed, dtype)
    return build_3d_baseline(cfg, seed, dtype)


def count_params(model: Model) -> int:
    """Trainable parameter count (BatchNorm running statistics excluded)."""
    return sum(p.size for p in model.parameters().values())


def count_buffers(model: Model) -> int:
    return sum(b.size for b in model.buffers().values())


# -- training and inference ----------------------------------------------


def train(model: Model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
          val: tuple[np.ndarray, np.ndarray] | None = None) -> list[dict]:
    """Mini-batch Adam training; keeps the best-validation weights when ``val`` is given.

    The input standardization is fitted on ``x`` the first time a model is
    trained. Returns (and appends to ``model.history``) one record per
    epoch with mean loss and accuracies.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    n = len(x)
    if n == 0:
        raise TrainingError("empty training set")
    if len(y) != n:
        raise TrainingError(f"{n} patches but {len(y)} labels")
    if not model.normalized:
        model.fit_normalization(x)
    model.adam.lr = cfg.learning_rate
    rng = np.random.default_rng(cfg.seed)
    best_acc, best_state, best_epoch = -1.0, None, None
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            logits = model.forward(x[idx], train=True)
            loss, grad = softmax_xent(logits, y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            model.backward(grad)
            adam_step(model.parameters(), model.gradients(), model.adam)
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == y[idx]))
        model.epoch += 1
        rec = {"epoch": model.epoch, "loss": loss_sum / n, "train_acc": correct / n, "val_acc": None}
        if val is not None:
            _, pred = predict(model, val[0])
            rec["val_acc"] = float(np.mean(pred == np.asarray(val[1])))
            if rec["val_acc"] > best_acc:
                best_acc, best_state, best_epoch = rec["val_acc"], model.state(), model.epoch
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %s", rec["epoch"], rec["loss"], rec["train_acc"], rec["val_acc"])
        history.append(rec)
    if best_state is not None:
        model.load_state(best_state)
        model.best_epoch = best_epoch
    model.history += history
    return history


def predict(model: Model, x: np.ndarray, block: int = parallel.CHUNK) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and argmax labels in inference mode.

    The network always sees blocks of exactly ``block`` samples (the tail is
    padded by repetition) so a sample's output is bit-identical whatever
    batch it arrives in.
    """
    x = np.asarray(x)
    n = len(x)
    probs = np.empty((n, model.config.classes), dtype=np.float64)
    for start in range(0, n, block):
        xb = x[start:start + block]
        m = len(xb)
        if m < block:
            xb = np.concatenate([xb, np.repeat(xb[-1:], block - m, axis=0)])
        p = softmax(model.forward(xb, train=False).astype(np.float64))
        probs[start:start + m] = p[:m]
    return probs, np.argmax(probs, axis=1)


@dataclass
class BenchReport:
    model: str
    params: int
    batch: int
    mean_ms: float
    median_ms: float
    std_ms: float

    def row(self) -> str:
        return f"{self.model:<14} {self.params:>12,} {self.mean_ms:>10.3f} {self.median_ms:>10.3f} {self.std_ms:>9.3f}"


def benchmark_inference(model: Model, batch: np.ndarray, name: str = "model",
                        warmup: int = 10, iters: int = 30) -> BenchReport:
    """Per-sample inference latency in milliseconds (report only)."""
    batch = np.asarray(batch)
    for _ in range(warmup):
        model.forward(batch)
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter()
        model.forward(batch)
        samples.append((time.perf_counter() - t0) * 1e3 / len(batch))
    return BenchReport(
        model=name,
        params=count_params(model),
        batch=len(batch),
        mean_ms=statistics.fmean(samples),
        median_ms=statistics.median(samples),
        std_ms=statistics.pstdev(samples),
    )


def bench_table(reports: list[BenchReport]) -> str:
    head = f"{'Classifier':<14} {'Parameters':>12} {'mean ms':>10} {'median ms':>10} {'std ms':>9}"
    return "\n".join([head, "-" * len(head)] + [r.row() for r in reports])


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_acc", "val_acc"])
        for rec in history:
            w.writerow([rec["epoch"], repr(rec["loss"]), repr(rec["train_acc"]),
                        "" if rec["val_acc"] is None else repr(rec["val_acc"])])


def gradient_suite(seed: int = 0, tolerance: float = 1e-4) -> dict[str, GradReport]:
    """Finite-difference checks of every layer type plus the micro hybrid and baseline."""
    rng = np.random.default_rng(seed)
    std = Standardize(3)
    std.fit(rng.normal(2.0, 3.0, size=(20, 3)))
    cases = {
        "conv3d": (Conv3d(2, 3, rng=rng), rng.standard_normal((2, 4, 4, 3, 2))),
        "conv3d_same": (Conv3d(2, 2, kernel=(3, 1, 3), padding=("same", "same", "valid"), rng=rng),
                        rng.standard_normal((2, 3, 3, 4, 2))),
        "conv1d": (Conv1d(3, 4, rng=rng), rng.standard_normal((2, 5, 3))),
        "batchnorm": (BatchNorm(3), rng.standard_normal((4, 2, 3))),
        "dense": (Dense(5, 3, rng=rng), rng.standard_normal((4, 5))),
        "relu": (ReLU(), rng.standard_normal((4, 6))),
        "squeeze": (Squeeze((0, 1)), rng.standard_normal((2, 1, 1, 3, 2))),
        "flatten": (Flatten(), rng.standard_normal((2, 3, 2))),
        "standardize": (std, rng.standard_normal((4, 3))),
    }
    reports = {name: grad_check(layer, x, tolerance=tolerance, seed=seed) for name, (layer, x) in cases.items()}
    for name, cfg in (("micro_hybrid", micro_hybrid()), ("micro_baseline", micro_baseline())):
        m = build_model(cfg, seed=seed, dtype=np.float64)
        # zero biases put all-inactive samples exactly on a ReLU kink
        for key, p in m.parameters().items():
            if key.endswith((".bias", ".beta")):
                p[:] = rng.normal(0.0, 0.1, p.shape)
        x = rng.standard_normal((4, *cfg.input_shape))
        m.fit_normalization(x)
        reports[name] = grad_check(m, x, labels=np.arange(4) % cfg.classes, tolerance=tolerance, seed=seed)
    return reports
