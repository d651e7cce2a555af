"""Paired conditional VAE with a shared latent space.

Two encoders (RGB, depth) map into one Gaussian latent space; two decoders
reconstruct RGB and depth from ``[z | one-hot node]``. Training sums the two
within-domain and two cross-domain VAE losses. At test time an RGB image
goes through the RGB encoder and comes out of the depth decoder.

All math runs in float64.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import rng
from .errors import EmptyBatch, NonFiniteLoss, ShapeMismatch
from .preprocess import NormalizationSpec, denormalize_depth
from .topomap import one_hot

DTYPE = torch.float64
DOMAINS = ("rgb", "dep")
IN_CHANNELS = {"rgb": 3, "dep": 1}


@dataclass
class TrainConfig:
    latent_dim: int = 32
    kl_weight: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    steps: int = 2000
    rng_seed: int = 0
    kl_dedup: bool = False
    shared_trunk: bool = False
    channels: tuple[int, ...] = (16, 32, 64)
    conditioned: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.kl_weight < 0:
            raise ValueError(f"kl_weight must be >= 0, got {self.kl_weight}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if len(self.channels) != 3:
            raise ValueError("channels must list three encoder widths")


@dataclass
class LossRecord:
    l_rgb_rgb: float
    l_dep_dep: float
    l_rgb_dep: float
    l_dep_rgb: float
    kl_rgb: float
    kl_dep: float
    total: float
    step: int = 0
    kl_weight: float = 1.0
    kl_dedup: bool = False

    def additive_total(self) -> float:
        """What ``total`` must equal: the four terms, less one copy of each KL under dedup."""
        s = self.l_rgb_rgb + self.l_dep_dep + self.l_rgb_dep + self.l_dep_rgb
        if self.kl_dedup:
            s -= self.kl_weight * (self.kl_rgb + self.kl_dep)
        return s

    def as_dict(self) -> dict:
        return asdict(self)


def _norm(channels: int, spatial: int) -> nn.Module:
    # instance norm is undefined on a 1x1 map
    return nn.InstanceNorm2d(channels, affine=True) if spatial > 1 else nn.Identity()


class ResBlock(nn.Module):
    def __init__(self, channels: int, spatial: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _norm(channels, spatial)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels, spatial)

    def forward(self, x):
        y = F.leaky_relu(self.norm1(self.conv1(x)), 0.2)
        return F.leaky_relu(x + self.norm2(self.conv2(y)), 0.2)


class DownBlock(nn.Module):
    def __init__(self, cin: int, cout: int, spatial_out: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 4, stride=2, padding=1)
        self.norm = _norm(cout, spatial_out)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class UpBlock(nn.Module):
    def __init__(self, cin: int, cout: int, spatial_out: int, last: bool = False):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)
        self.norm = nn.Identity() if last else _norm(cout, spatial_out)
        self.last = last

    def forward(self, x):
        y = self.norm(self.deconv(x))
        return torch.sigmoid(y) if self.last else F.leaky_relu(y, 0.2)


class Encoder(nn.Module):
    def __init__(self, in_ch: int, height: int, width: int, channels, latent_dim: int):
        super().__init__()
        widths = (in_ch,) + tuple(channels)
        blocks = []
        h, w = height, width
        for cin, cout in zip(widths, widths[1:]):
            h, w = h // 2, w // 2
            blocks.append(DownBlock(cin, cout, min(h, w)))
        self.down = nn.ModuleList(blocks)
        self.res = ResBlock(widths[-1], min(h, w))
        flat = widths[-1] * h * w
        self.mu = nn.Linear(flat, latent_dim)
        self.logvar = nn.Linear(flat, latent_dim)

    def forward(self, x):
        for block in self.down:
            x = block(x)
        x = self.res(x).flatten(1)
        return self.mu(x), self.logvar(x)


class Decoder(nn.Module):
    def __init__(self, out_ch: int, height: int, width: int, channels, latent_dim: int, num_nodes: int):
        super().__init__()
        self.input_width = latent_dim + num_nodes
        self.c0 = channels[-1]
        self.h0, self.w0 = height // 8, width // 8
        self.fc = nn.Linear(self.input_width, self.c0 * self.h0 * self.w0)
        self.res = ResBlock(self.c0, min(self.h0, self.w0))
        widths = tuple(reversed(channels)) + (out_ch,)
        blocks = []
        h, w = self.h0, self.w0
        for i, (cin, cout) in enumerate(zip(widths, widths[1:])):
            h, w = h * 2, w * 2
            blocks.append(UpBlock(cin, cout, min(h, w), last=i == len(widths) - 2))
        self.up = nn.ModuleList(blocks)

    def forward(self, zc):
        if zc.shape[-1] != self.input_width:
            raise ShapeMismatch(f"decoder expects {self.input_width} inputs, got {zc.shape[-1]}")
        x = F.leaky_relu(self.fc(zc), 0.2).view(-1, self.c0, self.h0, self.w0)
        x = self.res(x)
        for block in self.up:
            x = block(x)
        return x


class PairedCVAE(nn.Module):
    """E_rgb, E_dep, G_rgb, G_dep sharing one latent space, decoders conditioned on a node one-hot."""

    def __init__(
        self,
        height: int,
        width: int,
        num_nodes: int,
        latent_dim: int = 32,
        channels=(16, 32, 64),
        shared_trunk: bool = False,
        conditioned: bool = True,
    ):
        super().__init__()
        if height % 8 or width % 8:
            raise ShapeMismatch(f"raster sides must be multiples of 8, got {height}x{width}")
        if num_nodes < 1:
            raise ValueError("num_nodes must be >= 1")
        self.hparams = {
            "height": height,
            "width": width,
            "num_nodes": num_nodes,
            "latent_dim": latent_dim,
            "channels": list(channels),
            "shared_trunk": shared_trunk,
            "conditioned": conditioned,
        }
        self.height, self.width = height, width
        self.num_nodes, self.latent_dim = num_nodes, latent_dim
        self.conditioned = conditioned
        self.enc = nn.ModuleDict({d: Encoder(IN_CHANNELS[d], height, width, channels, latent_dim) for d in DOMAINS})
        self.dec = nn.ModuleDict(
            {d: Decoder(IN_CHANNELS[d], height, width, channels, latent_dim, num_nodes) for d in DOMAINS}
        )
        if shared_trunk:
            self.enc["dep"].down[-1] = self.enc["rgb"].down[-1]
        self.to(DTYPE)

    @classmethod
    def from_hparams(cls, hp: dict) -> "PairedCVAE":
        return cls(**hp)

    def check_raster(self, domain: str, x: torch.Tensor) -> None:
        want = (IN_CHANNELS[domain], self.height, self.width)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise ShapeMismatch(f"{domain} batch must be (B, {want[0]}, {want[1]}, {want[2]}), got {tuple(x.shape)}")

    def encode(self, domain: str, x: torch.Tensor):
        self.check_raster(domain, x)
        return self.enc[domain](x)

    def condition(self, z: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if labels.shape[-1] != self.num_nodes:
            raise ShapeMismatch(f"label has {labels.shape[-1]} entries, map has {self.num_nodes} nodes")
        if not self.conditioned:
            labels = torch.full_like(labels, 1.0 / self.num_nodes)
        return torch.cat([z, labels], dim=-1)

    def decode(self, domain: str, z: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return self.dec[domain](self.condition(z, labels))


def init_weights(model: nn.Module, seed: int) -> None:
    """Seeded uniform fan-in init from numpy so runs never depend on torch's global RNG."""
    gen = rng.stream(seed, "weight-init")
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if ".norm" in name:
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                fan_in, _ = nn.init._calculate_fan_in_and_fan_out(p)
                bound = 1.0 / math.sqrt(fan_in)
                if ".logvar." in name:
                    bound *= 0.1
                p.copy_(torch.from_numpy(gen.uniform(-bound, bound, size=tuple(p.shape))))


def to_batch(rgb: np.ndarray, dep: np.ndarray | None = None):
    """(B, H, W, 3) and (B, H, W) numpy rasters -> channel-first float64 tensors."""
    x_rgb = torch.as_tensor(np.ascontiguousarray(np.moveaxis(np.asarray(rgb), -1, 1)), dtype=DTYPE)
    if dep is None:
        return x_rgb
    x_dep = torch.as_tensor(np.asarray(dep)[:, None], dtype=DTYPE)
    return x_rgb, x_dep


def sample_latent(mean, log_variance, eps):
    """Reparameterised draw: mean + exp(log_variance / 2) * eps."""
    return mean + torch.exp(0.5 * log_variance) * eps


def kl_term(mean, log_variance):
    """KL(N(mean, exp(log_variance)) || N(0, I)) summed over the last axis."""
    return 0.5 * torch.sum(torch.exp(log_variance) + mean**2 - 1.0 - log_variance, dim=-1)


def recon_loss(x, x_hat):
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"reconstruction shape {tuple(x_hat.shape)} != target {tuple(x.shape)}")
    return torch.mean((x - x_hat) ** 2)


def cvae_loss(model: PairedCVAE, x_rgb, x_dep, labels, eps_rgb, eps_dep, beta: float = 1.0, kl_dedup: bool = False):
    """Joint within/cross-domain VAE objective.

    Each encoder is sampled once per example; the same ``z`` feeds both
    decoders. Returns ``(total, LossRecord)`` with ``total`` still attached
    to the graph.
    """
    if x_rgb.shape[0] == 0:
        raise EmptyBatch("cvae_loss needs at least one example")
    if not (x_rgb.shape[0] == x_dep.shape[0] == labels.shape[0]):
        raise ShapeMismatch("rgb, depth and label batches are not aligned")
    mu_r, lv_r = model.encode("rgb", x_rgb)
    mu_d, lv_d = model.encode("dep", x_dep)
    z_r = sample_latent(mu_r, lv_r, eps_rgb)
    z_d = sample_latent(mu_d, lv_d, eps_dep)
    kl_r = kl_term(mu_r, lv_r).mean()
    kl_d = kl_term(mu_d, lv_d).mean()

    rec_rr = recon_loss(x_rgb, model.decode("rgb", z_r, labels))
    rec_dd = recon_loss(x_dep, model.decode("dep", z_d, labels))
    rec_rd = recon_loss(x_dep, model.decode("dep", z_r, labels))
    rec_dr = recon_loss(x_rgb, model.decode("rgb", z_d, labels))

    terms = (rec_rr + beta * kl_r, rec_dd + beta * kl_d, rec_rd + beta * kl_r, rec_dr + beta * kl_d)
    if kl_dedup:
        total = rec_rr + rec_dd + rec_rd + rec_dr + beta * (kl_r + kl_d)
    else:
        total = terms[0] + terms[1] + terms[2] + terms[3]
    record = LossRecord(
        *(t.item() for t in terms),
        kl_rgb=kl_r.item(),
        kl_dep=kl_d.item(),
        total=total.item(),
        kl_weight=beta,
        kl_dedup=kl_dedup,
    )
    return total, record


@torch.no_grad()
def ae_loss(model: PairedCVAE, x_rgb, x_dep, labels) -> dict[str, float]:
    """Plain autoencoder losses: the four L2 reconstructions through the encoder means."""
    mu_r, _ = model.encode("rgb", x_rgb)
    mu_d, _ = model.encode("dep", x_dep)
    return {
        "l_rgb_rgb": float(recon_loss(x_rgb, model.decode("rgb", mu_r, labels))),
        "l_dep_dep": float(recon_loss(x_dep, model.decode("dep", mu_d, labels))),
        "l_rgb_dep": float(recon_loss(x_dep, model.decode("dep", mu_r, labels))),
        "l_dep_rgb": float(recon_loss(x_rgb, model.decode("rgb", mu_d, labels))),
    }


def make_optimizer(model: nn.Module, learning_rate: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=learning_rate)


def draw_eps(seed: int, step: int, batch: int, latent_dim: int):
    gen = rng.stream(seed, f"eps/{step}")
    e = gen.standard_normal((2, batch, latent_dim))
    return torch.from_numpy(e[0]), torch.from_numpy(e[1])


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    gen = rng.stream(seed, f"batch/{step}")
    if batch_size >= n:
        return gen.permutation(n)
    return gen.choice(n, size=batch_size, replace=False)


def train_step(model: PairedCVAE, optimizer, batch, config: TrainConfig, eps, step: int = 0) -> LossRecord:
    """One Adam step on the joint loss. ``batch`` is (x_rgb, x_dep, labels)."""
    x_rgb, x_dep, labels = batch
    optimizer.zero_grad(set_to_none=True)
    total, record = cvae_loss(model, x_rgb, x_dep, labels, eps[0], eps[1], config.kl_weight, config.kl_dedup)
    if not math.isfinite(record.total):
        raise NonFiniteLoss(f"loss became {record.total} at step {step}")
    total.backward()
    optimizer.step()
    record.step = step
    return record


def labels_tensor(node_ids, num_nodes: int) -> torch.Tensor:
    return torch.as_tensor(np.stack([one_hot(int(k), num_nodes) for k in node_ids]), dtype=DTYPE)


@torch.no_grad()
def infer_depth_normalized(model: PairedCVAE, rgb: np.ndarray, node_ids) -> np.ndarray:
    """Batch RGB (B, H, W, 3) -> normalized depth (B, H, W) via the posterior mean."""
    x = to_batch(rgb)
    mu, _ = model.encode("rgb", x)
    out = model.decode("dep", mu, labels_tensor(node_ids, model.num_nodes))
    return out[:, 0].numpy()


def infer_depth(model: PairedCVAE, rgb: np.ndarray, node_id: int, spec: NormalizationSpec) -> np.ndarray:
    """Single RGB image (H, W, 3) -> depth map in meters."""
    norm = infer_depth_normalized(model, np.asarray(rgb)[None], [node_id])[0]
    return denormalize_depth(norm, spec)


@torch.no_grad()
def sample_node(model: PairedCVAE, node_id: int, gen: np.random.Generator, count: int = 1):
    """Decode prior draws z ~ N(0, I) with a node's one-hot through both decoders.

    Returns normalized rasters: RGB (count, H, W, 3) and depth (count, H, W).
    """
    z = torch.from_numpy(gen.standard_normal((count, model.latent_dim)))
    labels = labels_tensor([node_id] * count, model.num_nodes)
    rgb = model.decode("rgb", z, labels).permute(0, 2, 3, 1).numpy()
    dep = model.decode("dep", z, labels)[:, 0].numpy()
    return rgb, dep
