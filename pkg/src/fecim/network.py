"""Quantization-aware training and inference for small dense networks.

Weights are trained with a straight-through estimator: the forward pass
uses codebook-quantized weights (2 or 4 levels), gradients update
real-valued shadow weights.  Hidden activations are hard-clipped to
[0, 1] so that inference maps directly onto crossbar read currents
(activations double as read-event weights).  Biases stay digital.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

CODEBOOKS = {
    2: np.array([-1.0, 1.0]),
    4: np.array([-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0]),
}

NETWORK_FILE_VERSION = 1


class TrainingError(RuntimeError):
    """Loss went non-finite; carries the epoch log for post-mortem."""

    def __init__(self, msg, epoch_log=None):
        super().__init__(msg)
        self.epoch_log = epoch_log or []


def quantize(w: np.ndarray, levels: int) -> np.ndarray:
    """Nearest-codebook quantization of clipped shadow weights (idempotent)."""
    wc = np.clip(w, -1.0, 1.0)
    if levels == 2:
        return np.where(wc >= 0.0, 1.0, -1.0)
    if levels == 4:
        book = CODEBOOKS[4]
        edges = (book[:-1] + book[1:]) / 2.0  # -2/3, 0, +2/3
        return book[np.digitize(wc, edges)]
    raise ValueError("levels must be 2 or 4")


def hard_clip(z: np.ndarray) -> np.ndarray:
    """Saturating-ReLU hidden activation for multi-level nets: clip(z, 0, 1).

    The [0,1] range reads out of a crossbar column and feeds the next
    tile's activation inputs directly.
    """
    return np.clip(z, 0.0, 1.0)


def binary_step(z: np.ndarray) -> np.ndarray:
    """Binary hidden activation: a current comparator against the digital
    threshold folded into the bias.  Deployed forward for binary nets;
    training backpropagates through its hard-tanh-style surrogate."""
    return (z > 0.0).astype(float)


def hidden_activation(z: np.ndarray, levels: int) -> np.ndarray:
    return binary_step(z) if levels == 2 else hard_clip(z)


def activation_ste_gate(z: np.ndarray, levels: int) -> np.ndarray:
    """Straight-through gate of the hidden activation.

    Binary nets use the hard-sigmoid window around the comparator
    threshold; multi-level nets use the exact clip gradient.
    """
    if levels == 2:
        return (np.abs(z) <= 0.5).astype(float)
    return ((z > 0.0) & (z < 1.0)).astype(float)


@dataclass
class Hyperparams:
    epochs: int = 40
    batch_size: int = 100
    lr: float = 0.03
    momentum: float = 0.9
    lr_decay: float = 0.5
    lr_decay_every: int = 15
    val_fraction: float = 1.0 / 12.0
    alpha_gain: float = 2.0  # per-layer weight scale = alpha_gain / sqrt(fan_in)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)


@dataclass
class QuantizedNetwork:
    """Dense network with codebook-quantized weights and digital biases."""

    sizes: list
    levels: int
    weights: list = field(default_factory=list)  # shadow (real-valued)
    biases: list = field(default_factory=list)
    alphas: list = field(default_factory=list)  # per-layer digital scale
    epoch_log: list = field(default_factory=list)

    @classmethod
    def initialize(cls, sizes, levels, seed: int, alpha_gain: float = 2.0):
        rng = np.random.default_rng(seed)
        net = cls(sizes=list(sizes), levels=levels)
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            net.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)) / limit)
            net.biases.append(np.zeros(fan_out))
            net.alphas.append(alpha_gain / np.sqrt(fan_in))
        return net

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def quantized_weights(self) -> list:
        return [quantize(w, self.levels) for w in self.weights]

    def forward(self, x: np.ndarray, return_hidden: bool = False):
        """Ideal-backend forward pass on flattened [0,1] inputs."""
        a = x
        hidden = []
        for l in range(self.n_layers):
            z = a @ (self.alphas[l] * quantize(self.weights[l], self.levels)) + self.biases[l]
            if l < self.n_layers - 1:
                a = hidden_activation(z, self.levels)
                hidden.append(a)
            else:
                a = z
        return (a, hidden) if return_hidden else a

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == y) * 100.0)

    def save(self, path: str):
        payload = {
            "version": np.array(NETWORK_FILE_VERSION),
            "sizes": np.array(self.sizes),
            "levels": np.array(self.levels),
            "alphas": np.array(self.alphas),
        }
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            payload[f"w{i}"] = w
            payload[f"b{i}"] = b
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        np.savez_compressed(path, **payload)

    @classmethod
    def load(cls, path: str) -> "QuantizedNetwork":
        with np.load(path) as data:
            version = int(data["version"])
            if version != NETWORK_FILE_VERSION:
                raise ValueError(f"unsupported network file version {version}")
            sizes = [int(s) for s in data["sizes"]]
            net = cls(sizes=sizes, levels=int(data["levels"]))
            net.alphas = [float(a) for a in data["alphas"]]
            for i in range(len(sizes) - 1):
                net.weights.append(data[f"w{i}"])
                net.biases.append(data[f"b{i}"])
        return net


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(net: QuantizedNetwork, x: np.ndarray, y: np.ndarray):
    """Cross-entropy loss and gradients.

    Returns (loss, grads) where grads["wq"][l] is the gradient w.r.t. the
    quantized weights (the smooth part of the network; this is what a
    finite-difference check with frozen quantization must reproduce),
    grads["w"][l] the straight-through shadow gradient, grads["b"][l]
    the bias gradient.
    """
    n = len(x)
    zs, acts = [], [x]
    a = x
    wq = net.quantized_weights()
    for l in range(net.n_layers):
        z = a @ (net.alphas[l] * wq[l]) + net.biases[l]
        zs.append(z)
        if l < net.n_layers - 1:
            a = hidden_activation(z, net.levels)
            acts.append(a)
    probs = _softmax(zs[-1])
    loss = float(-np.mean(np.log(probs[np.arange(n), y] + 1e-300)))

    grads = {"wq": [None] * net.n_layers, "w": [None] * net.n_layers, "b": [None] * net.n_layers}
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    for l in range(net.n_layers - 1, -1, -1):
        grads["wq"][l] = acts[l].T @ delta * net.alphas[l]
        grads["b"][l] = delta.sum(axis=0)
        if l > 0:
            da = delta @ (net.alphas[l] * wq[l]).T
            delta = da * activation_ste_gate(zs[l - 1], net.levels)
        # straight-through: pass grad to shadow weights inside the clip region
        grads["w"][l] = grads["wq"][l] * (np.abs(net.weights[l]) <= 1.0)
    return loss, grads


class CrossbarBackend:
    """A QuantizedNetwork mapped onto programmed crossbar tiles.

    Layer outputs are column currents decoded through each tile's frozen
    write-time calibration, scaled by the layer's digital alpha, plus
    the digital bias.  Hidden activations are the same hard clip as the
    ideal backend, so they feed the next tile directly as [0,1] inputs.
    """

    def __init__(self, layers, alphas, biases, levels=4, stats=None):
        self.layers = layers
        self.alphas = list(alphas)
        self.biases = [np.asarray(b) for b in biases]
        self.levels = levels
        self.stats = stats or []

    def forward(self, x: np.ndarray, flags=None) -> np.ndarray:
        a = x
        last = len(self.layers) - 1
        for l, layer in enumerate(self.layers):
            z = layer.weight_units(a, flags) * self.alphas[l] + self.biases[l]
            a = hidden_activation(z, self.levels) if l < last else z
        return a

    def predict(self, x: np.ndarray, flags=None) -> np.ndarray:
        return np.argmax(self.forward(x, flags), axis=-1)

    def accuracy(self, x: np.ndarray, y: np.ndarray, flags=None) -> float:
        return float(np.mean(self.predict(x, flags) == y) * 100.0)

    def set_temperature(self, temp: float):
        for layer in self.layers:
            layer.set_temperature(temp)

    def set_read_voltage(self, vg: float, recalibrate: bool = True):
        for layer in self.layers:
            layer.set_read_voltage(vg, recalibrate)

    @property
    def noise_draws(self) -> int:
        return sum(layer.noise_draws for layer in self.layers)

    @property
    def convergence_rate(self) -> float:
        devices = sum(s.n_devices for s in self.stats)
        converged = sum(s.n_converged for s in self.stats)
        return converged / devices if devices else 1.0


def map_network(
    net: QuantizedNetwork,
    params,
    prog_cfg,
    vg_read: float,
    mapping=None,
    seed: int = 0,
    **map_kw,
) -> CrossbarBackend:
    """Program every layer of a trained network into crossbar tiles."""
    from . import crossbar as xb

    if mapping is None:
        mapping = xb.binary_mapping() if net.levels == 2 else xb.mlc4_mapping()
    layers, stats = [], []
    idx = 0
    for l, wq in enumerate(net.quantized_weights()):
        layer, st, idx = xb.map_layer(
            wq,
            mapping,
            params,
            prog_cfg,
            vg_read,
            device_index_start=idx,
            seed=seed * 1000 + l,
            **map_kw,
        )
        layers.append(layer)
        stats.append(st)
    return CrossbarBackend(layers, net.alphas, net.biases, levels=net.levels, stats=stats)


def infer(net: QuantizedNetwork, x: np.ndarray, y: np.ndarray, backend="ideal", flags=None) -> float:
    """Test-set accuracy (%) under the chosen backend.

    backend: "ideal" for exact quantized arithmetic, or a CrossbarBackend
    returned by map_network.
    """
    if backend == "ideal":
        return net.accuracy(x, y)
    return backend.accuracy(x, y, flags)


def train_qat(
    train_x: np.ndarray,
    train_y: np.ndarray,
    topology,
    levels: int,
    hp: Hyperparams,
    seed: int,
) -> QuantizedNetwork:
    """SGD-with-momentum QAT; returns the best-validation-epoch network.

    Deterministic for a fixed seed (init, shuffling, and batch order all
    come from one PCG64 stream).
    """
    rng = np.random.default_rng(seed)
    net = QuantizedNetwork.initialize(topology, levels, seed=rng.integers(2**63), alpha_gain=hp.alpha_gain)
    if hp.epochs == 0:
        return net

    n_val = max(1, int(len(train_x) * hp.val_fraction))
    perm = rng.permutation(len(train_x))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    vx, vy = train_x[val_idx], train_y[val_idx]
    tx, ty = train_x[tr_idx], train_y[tr_idx]

    vel_w = [np.zeros_like(w) for w in net.weights]
    vel_b = [np.zeros_like(b) for b in net.biases]
    best_val, best_state = -1.0, None
    lr = hp.lr

    for epoch in range(hp.epochs):
        if epoch > 0 and epoch % hp.lr_decay_every == 0:
            lr *= hp.lr_decay
        order = rng.permutation(len(tx))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(tx) - hp.batch_size + 1, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            loss, grads = loss_and_grads(net, tx[idx], ty[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", net.epoch_log)
            epoch_loss += loss
            n_batches += 1
            for l in range(net.n_layers):
                vel_w[l] = hp.momentum * vel_w[l] - lr * grads["w"][l]
                vel_b[l] = hp.momentum * vel_b[l] - lr * grads["b"][l]
                net.weights[l] = np.clip(net.weights[l] + vel_w[l], -1.0, 1.0)
                net.biases[l] = net.biases[l] + vel_b[l]
        val_acc = net.accuracy(vx, vy)
        net.epoch_log.append({"epoch": epoch, "loss": epoch_loss / max(1, n_batches), "val_acc": val_acc})
        if val_acc > best_val:
            best_val = val_acc
            best_state = ([w.copy() for w in net.weights], [b.copy() for b in net.biases])

    net.weights, net.biases = best_state
    return net
