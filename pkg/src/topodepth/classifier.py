"""Small from-scratch CNN that names the topological node an RGB image was taken at."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import rng
from .cvae import DTYPE, to_batch
from .errors import NonFiniteLoss, ShapeMismatch


@dataclass
class ClassifierConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    steps: int = 1500
    rng_seed: int = 0
    channels: tuple[int, ...] = (16, 32, 32)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")


class TopoClassifier(nn.Module):
    def __init__(self, height: int, width: int, num_nodes: int, channels=(16, 32, 32)):
        super().__init__()
        if height % 8 or width % 8:
            raise ShapeMismatch(f"raster sides must be multiples of 8, got {height}x{width}")
        self.hparams = {"height": height, "width": width, "num_nodes": num_nodes, "channels": list(channels)}
        self.height, self.width, self.num_nodes = height, width, num_nodes
        widths = (3,) + tuple(channels)
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 4, stride=2, padding=1) for a, b in zip(widths, widths[1:]))
        self.head = nn.Linear(widths[-1] * (height // 8) * (width // 8), num_nodes)
        self.to(DTYPE)

    @classmethod
    def from_hparams(cls, hp: dict) -> "TopoClassifier":
        return cls(**hp)

    def forward(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != (3, self.height, self.width):
            raise ShapeMismatch(f"expected (B, 3, {self.height}, {self.width}), got {tuple(x.shape)}")
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.head(x.flatten(1))


def init_weights(model: nn.Module, seed: int) -> None:
    gen = rng.stream(seed, "classifier-init")
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in, _ = nn.init._calculate_fan_in_and_fan_out(p)
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.from_numpy(gen.uniform(-bound, bound, size=tuple(p.shape))))


@torch.no_grad()
def classify(model: TopoClassifier, rgb: np.ndarray) -> np.ndarray:
    """Logits for a batch (B, H, W, 3) or a single image (H, W, 3)."""
    rgb = np.asarray(rgb)
    single = rgb.ndim == 3
    logits = model(to_batch(rgb[None] if single else rgb)).numpy()
    return logits[0] if single else logits


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties resolve to the lowest index."""
    return np.argmax(logits, axis=-1)


def cross_entropy(model: TopoClassifier, x, labels):
    return F.cross_entropy(model(x), labels)


def train_classifier(model: TopoClassifier, rgb: np.ndarray, labels, config: ClassifierConfig, start_step: int = 0,
                     optimizer=None, on_step=None):
    """Minimise cross-entropy with Adam over seeded random minibatches.

    ``on_step(step, loss)`` is called after every step (logging and
    checkpoint hooks). Returns the optimizer and the per-step loss log.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_nodes):
        raise ValueError(f"labels must lie in [0, {model.num_nodes}), got range [{labels.min()}, {labels.max()}]")
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    x_all = to_batch(rgb)
    y_all = torch.from_numpy(labels)
    n = len(labels)
    history = []
    for step in range(start_step, config.steps):
        gen = rng.stream(config.rng_seed, f"classifier-batch/{step}")
        idx = gen.permutation(n) if config.batch_size >= n else gen.choice(n, config.batch_size, replace=False)
        idx = torch.from_numpy(idx)
        optimizer.zero_grad(set_to_none=True)
        loss = cross_entropy(model, x_all[idx], y_all[idx])
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLoss(f"classifier loss became {value} at step {step}")
        loss.backward()
        optimizer.step()
        history.append({"step": step, "loss": value})
        if on_step is not None:
            on_step(step, value)
    return optimizer, history
