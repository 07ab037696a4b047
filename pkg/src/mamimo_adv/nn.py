"""Feedforward regression models mapping user positions to per-cell powers.

Two fully connected architectures (elu hidden stack, linear output) predict
the K optimal powers of one cell from the raw positions of all users, in
meters. The 6-unit output stage is a fixed linear layer that copies the K
powers and appends their sum; only the preceding dense stack is trainable,
which makes the trainable parameter counts 6981 (model1) and 202373 (model2).
Labels are trained in units of p_max (so targets live in [0, 1]) and
denormalized at prediction time.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .scenario import NetworkConfig, STREAM_MODEL_INIT

MODEL_FILE_MAGIC = b"MMNN"
MODEL_FILE_SCHEMA_VERSION = 1

HIDDEN_SIZES = {
    "model1": (64, 32, 32, 32, 5),
    "model2": (512, 256, 128, 128, 5),
}
EXPECTED_PARAM_COUNT = {"model1": 6981, "model2": 202373}


class ModelFileError(RuntimeError):
    """Raised for corrupt or incompatible model files."""


def elu(z):
    return np.where(z >= 0, z, np.expm1(np.minimum(z, 0.0)))


def elu_grad_from_output(out):
    # elu is monotone with elu(0) = 0, so out >= 0 iff z >= 0; elu'(0) = 1.
    return np.where(out >= 0, 1.0, out + 1.0)


@dataclass
class Layer:
    w: np.ndarray                # (out_dim, in_dim)
    b: np.ndarray                # (out_dim,)
    activation: str = "elu"     # "elu" | "linear"
    trainable: bool = True

    @property
    def in_dim(self):
        return self.w.shape[1]

    @property
    def out_dim(self):
        return self.w.shape[0]


@dataclass
class MlpModel:
    layers: list
    model_id: str = "custom"
    precoder: str = ""
    seed: int = 0
    config_hash: str = ""
    output_scale: float = 1.0    # mW per unit of raw output
    input_scale: float = 1.0     # typical input magnitude, meters
    cell: int = -1

    @property
    def input_dim(self):
        return self.layers[0].in_dim if self.layers else 0

    @property
    def output_dim(self):
        return self.layers[-1].out_dim if self.layers else 0

    def forward(self, x):
        """Raw (normalized) outputs for x of shape (in,) or (N, in)."""
        a = np.asarray(x, dtype=float)
        if a.shape[-1] != self.input_dim and self.layers:
            raise ValueError(f"input dim {a.shape[-1]} != {self.input_dim}")
        for layer in self.layers:
            a = a @ layer.w.T + layer.b
            if layer.activation == "elu":
                a = elu(a)
        return a

    def forward_cached(self, x):
        """Forward pass keeping every layer's activation for backprop."""
        acts = [np.atleast_2d(np.asarray(x, dtype=float))]
        for layer in self.layers:
            z = acts[-1] @ layer.w.T + layer.b
            acts.append(elu(z) if layer.activation == "elu" else z)
        return acts

    def input_gradient(self, x, out_weights=None):
        """Exact gradient of sum(out_weights * output) with respect to x.

        Defaults to the attack loss: the sum of the first K (power) outputs.
        Shape follows x: (in,) or (N, in).
        """
        single = np.asarray(x).ndim == 1
        acts = self.forward_cached(x)
        n = acts[0].shape[0]
        if out_weights is None:
            out_weights = np.zeros(self.output_dim)
            out_weights[:max(self.output_dim - 1, 1)] = 1.0
        dy = np.broadcast_to(np.asarray(out_weights, dtype=float), (n, self.output_dim)).copy()
        for layer, out in zip(reversed(self.layers), reversed(acts[1:])):
            dz = dy * elu_grad_from_output(out) if layer.activation == "elu" else dy
            dy = dz @ layer.w
        return dy[0] if single else dy

    def predict_powers(self, x):
        """Denormalized power predictions in mW, shape (..., K+1)."""
        return self.output_scale * self.forward(x)


def param_count(model: MlpModel) -> int:
    """Trainable parameters: sum of in*out + out over trainable layers."""
    return sum(l.in_dim * l.out_dim + l.out_dim for l in model.layers if l.trainable)


def layer_param_counts(model: MlpModel) -> list:
    """Per-layer in*out + out, all layers including frozen ones."""
    return [l.in_dim * l.out_dim + l.out_dim for l in model.layers]


def _sum_append_layer(k: int) -> Layer:
    w = np.vstack([np.eye(k), np.ones((1, k))])
    return Layer(w=w, b=np.zeros(k + 1), activation="linear", trainable=False)


DEFAULT_INPUT_SCALE = 25.0


def build_model(model_id: str, config: NetworkConfig, seed: int = 0,
                cell: int = -1, precoder: str = "",
                input_scale: float = DEFAULT_INPUT_SCALE) -> MlpModel:
    """Construct an untrained model1/model2 instance with Glorot-style init.

    First-layer weights start at Glorot scaled by the coverage half-extent so
    raw-meter inputs give O(1) preactivations. input_scale (meters) is the
    length scale the first layer trains on: its Adam weight steps are
    learning_rate/input_scale, so smaller values let the layer develop the
    sharp sub-coverage structure the allocation labels contain.
    """
    if model_id not in HIDDEN_SIZES:
        raise ValueError(f"unknown model_id {model_id!r}")
    rng = np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(STREAM_MODEL_INIT, max(cell, 0))))
    dims = (config.input_dim,) + HIDDEN_SIZES[model_id]
    init_scale = config.cell_side_m * max(config.grid_rows, config.grid_cols) / 2.0
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        std = np.sqrt(2.0 / (fan_in + fan_out))
        if i == 0:
            std /= init_scale
        layers.append(Layer(w=rng.normal(0.0, std, (fan_out, fan_in)),
                            b=np.zeros(fan_out), activation="elu"))
    layers.append(_sum_append_layer(dims[-1]))
    model = MlpModel(layers=layers, model_id=model_id, precoder=precoder, seed=seed,
                     output_scale=config.p_max_dl_mw, input_scale=input_scale,
                     cell=cell)
    count = param_count(model)
    if count != EXPECTED_PARAM_COUNT[model_id]:
        raise AssertionError(
            f"{model_id} has {count} trainable parameters, expected "
            f"{EXPECTED_PARAM_COUNT[model_id]}")
    return model


@dataclass
class TrainHyper:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 12
    val_fraction: float = 0.1
    lr_decay: float = 0.5        # reduce-on-plateau factor
    min_lr: float = 1e-6


@dataclass
class TrainReport:
    epochs: int
    final_train_mse: float
    final_val_mse: float
    best_val_mse: float
    seed: int
    wall_time_s: float


def _adam_state(model):
    return [{"mw": np.zeros_like(l.w), "vw": np.zeros_like(l.w),
             "mb": np.zeros_like(l.b), "vb": np.zeros_like(l.b)}
            if l.trainable else None for l in model.layers]


def _batch_grads(model, acts, dy):
    """Parameter gradients from the cached forward pass; dy seeds the output."""
    grads = [None] * len(model.layers)
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        out = acts[li + 1]
        dz = dy * elu_grad_from_output(out) if layer.activation == "elu" else dy
        if layer.trainable:
            grads[li] = (dz.T @ acts[li], dz.sum(axis=0))
        dy = dz @ layer.w
    return grads


def train(model: MlpModel, dataset, cell: int, hyper: TrainHyper | None = None,
          seed: int = 0):
    """Train one cell's model on normalized labels with Adam and early stopping.

    Returns (model, TrainReport). Deterministic for a given seed. Diverging
    (NaN) losses abort with a diagnostic.
    """
    hyper = hyper or TrainHyper()
    t0 = time.perf_counter()
    x = np.asarray(dataset.inputs, dtype=float)
    y = np.asarray(dataset.labels[:, cell, :], dtype=float) / model.output_scale
    n = x.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4, cell)))
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * hyper.val_fraction)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    xv, yv = x[val_idx], y[val_idx]
    xt, yt = x[train_idx], y[train_idx]

    def mse(inputs, targets):
        d = model.forward(inputs) - targets
        return float(np.mean(d * d))

    adam = _adam_state(model)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    best_val = mse(xv, yv)
    best_weights = [(l.w.copy(), l.b.copy()) for l in model.layers]
    sig_val = best_val            # last significant improvement, for plateau logic
    bad_epochs = 0
    epochs_run = 0
    train_mse = mse(xt, yt)
    lr = hyper.learning_rate
    decay_wait = max(3, hyper.patience // 3)

    for epoch in range(hyper.max_epochs):
        order = rng.permutation(len(xt))
        sq_sum = 0.0
        for start in range(0, len(xt), hyper.batch_size):
            bi = order[start:start + hyper.batch_size]
            xb, yb = xt[bi], yt[bi]
            acts = model.forward_cached(xb)
            diff = acts[-1] - yb
            sq_sum += float(np.sum(diff * diff))
            dy = 2.0 * diff / diff.size
            grads = _batch_grads(model, acts, dy)
            step += 1
            bc1 = 1.0 - beta1 ** step
            bc2 = 1.0 - beta2 ** step
            for li, (layer, g, st) in enumerate(zip(model.layers, grads, adam)):
                if g is None:
                    continue
                # Adam steps are gradient-scale free, so shrinking the first
                # layer's weight step by input_scale is exactly equivalent to
                # training on inputs divided by input_scale (raw meters stay
                # the model interface).
                lr_w = lr / (model.input_scale if li == 0 else 1.0)
                gw, gb = g
                st["mw"] = beta1 * st["mw"] + (1 - beta1) * gw
                st["vw"] = beta2 * st["vw"] + (1 - beta2) * gw * gw
                st["mb"] = beta1 * st["mb"] + (1 - beta1) * gb
                st["vb"] = beta2 * st["vb"] + (1 - beta2) * gb * gb
                layer.w -= lr_w * (st["mw"] / bc1) / (np.sqrt(st["vw"] / bc2) + eps)
                layer.b -= lr * (st["mb"] / bc1) / (np.sqrt(st["vb"] / bc2) + eps)
        train_mse = sq_sum / (len(xt) * y.shape[1])
        if not np.isfinite(train_mse):
            raise RuntimeError(
                f"training diverged (non-finite loss) at epoch {epoch} for cell {cell}; "
                f"lower the learning rate or check the dataset scaling")
        epochs_run = epoch + 1
        val_mse = mse(xv, yv)
        if val_mse < best_val:
            best_val = val_mse
            best_weights = [(l.w.copy(), l.b.copy()) for l in model.layers]
        if val_mse < sig_val * (1.0 - 1e-3):
            sig_val = val_mse
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs % decay_wait == 0:
                lr = max(lr * hyper.lr_decay, hyper.min_lr)
            if bad_epochs > hyper.patience:
                break

    for layer, (w, b) in zip(model.layers, best_weights):
        layer.w, layer.b = w, b
    report = TrainReport(epochs=epochs_run, final_train_mse=train_mse,
                         final_val_mse=mse(xv, yv), best_val_mse=best_val,
                         seed=seed, wall_time_s=time.perf_counter() - t0)
    return model, report


def estimate_lipschitz(model: MlpModel, xs, delta: float = 1e-3,
                       rng: np.random.Generator | None = None) -> float:
    """Empirical local Lipschitz constant of forward() around the given inputs."""
    rng = rng or np.random.default_rng(0)
    xs = np.atleast_2d(xs)
    direction = rng.standard_normal(xs.shape)
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    dy = model.forward(xs + delta * direction) - model.forward(xs)
    return float(np.max(np.linalg.norm(dy, axis=1) / delta))


def save_model(model: MlpModel, path) -> None:
    """Binary model file: magic, JSON header, float64 LE weights (W then b per layer)."""
    header = {
        "schema_version": MODEL_FILE_SCHEMA_VERSION,
        "model_id": model.model_id,
        "layer_spec": [[l.in_dim, l.out_dim, l.activation, l.trainable]
                       for l in model.layers],
        "precoder": model.precoder,
        "seed": model.seed,
        "config_hash": model.config_hash,
        "output_scale": model.output_scale,
        "input_scale": model.input_scale,
        "cell": model.cell,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_FILE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for layer in model.layers:
            fh.write(layer.w.astype("<f8").tobytes())
            fh.write(layer.b.astype("<f8").tobytes())


def load_model(path) -> MlpModel:
    with open(path, "rb") as fh:
        if fh.read(4) != MODEL_FILE_MAGIC:
            raise ModelFileError(f"{path}: not a model file")
        raw_len = fh.read(4)
        if len(raw_len) < 4:
            raise ModelFileError(f"{path}: truncated header")
        (hlen,) = struct.unpack("<I", raw_len)
        head = fh.read(hlen)
        if len(head) < hlen:
            raise ModelFileError(f"{path}: truncated header")
        header = json.loads(head.decode())
        if header.get("schema_version") != MODEL_FILE_SCHEMA_VERSION:
            raise ModelFileError(
                f"{path}: unsupported schema_version {header.get('schema_version')}")
        payload = np.frombuffer(fh.read(), dtype="<f8")
    need = sum(i * o + o for i, o, _, _ in header["layer_spec"])
    if payload.size != need:
        raise ModelFileError(f"{path}: truncated or oversized payload")
    layers = []
    pos = 0
    for in_dim, out_dim, act, trainable in header["layer_spec"]:
        w = payload[pos:pos + in_dim * out_dim].reshape(out_dim, in_dim).copy()
        pos += in_dim * out_dim
        b = payload[pos:pos + out_dim].copy()
        pos += out_dim
        layers.append(Layer(w=w, b=b, activation=act, trainable=trainable))
    return MlpModel(layers=layers, model_id=header["model_id"],
                    precoder=header["precoder"], seed=header["seed"],
                    config_hash=header["config_hash"],
                    output_scale=header["output_scale"],
                    input_scale=header.get("input_scale", 1.0),
                    cell=header.get("cell", -1))
