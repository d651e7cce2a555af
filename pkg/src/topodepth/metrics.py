"""Depth error metrics, threshold accuracies and topological localization accuracy."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import LengthMismatch, NoValidPixels

log = logging.getLogger(__name__)

ESTIMATE_FLOOR = 1e-6
DEPTH_KEYS = ("rmse", "log_rmse", "abs_rel", "sq_rel", "delta1", "delta2", "delta3")


@dataclass
class MetricsReport:
    mean_gt_depth: float
    rmse: float
    log_rmse: float
    abs_rel: float
    sq_rel: float
    delta1: float
    delta2: float
    delta3: float
    topo_accuracy: float
    topo_off_by_one: float
    pixel_count: int
    frame_count: int
    oracle_node: Optional[dict] = field(default=None)

    def as_dict(self) -> dict:
        return asdict(self)

    def to_kv(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            if isinstance(v, dict):
                lines += [f"oracle_node.{kk}={vv!r}" for kk, vv in v.items()]
            elif v is not None:
                lines.append(f"{k}={v!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def table_row(self, name: str = "desk") -> str:
        return (
            f"{name} | mean depth {self.mean_gt_depth:.3f} | RMSE {self.rmse:.3f} | log RMSE {self.log_rmse:.3f} | "
            f"Abs.Rel {self.abs_rel:.3f} | Sq.Rel {self.sq_rel:.3f} | d<1.25 {self.delta1:.3f} | "
            f"d<1.25^2 {self.delta2:.3f} | d<1.25^3 {self.delta3:.3f} | "
            f"topo acc {self.topo_accuracy:.4f} | off-by-one {self.topo_off_by_one:.4f}"
        )


def valid_mask(ground_truth: np.ndarray, mask=None) -> np.ndarray:
    g = np.asarray(ground_truth, dtype=np.float64)
    m = np.isfinite(g) & (g > 0)
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    return m


def _sums(estimated, ground_truth, mask=None) -> dict:
    """Per-pixel sums over valid pixels; means are taken by the caller so frames aggregate exactly."""
    e = np.asarray(estimated, dtype=np.float64)
    g = np.asarray(ground_truth, dtype=np.float64)
    if e.shape != g.shape:
        raise ValueError(f"estimate shape {e.shape} != ground-truth shape {g.shape}")
    m = valid_mask(g, mask)
    e, g = e[m], g[m]
    low = e < ESTIMATE_FLOOR
    if low.any():
        log.info("clamped %d non-positive depth estimates to %g", int(low.sum()), ESTIMATE_FLOOR)
        e = np.where(low, ESTIMATE_FLOOR, e)
    diff = e - g
    ratio = np.maximum(g / e, e / g)
    return {
        "n": int(e.size),
        "gt": float(np.sum(g)),
        "se": float(np.sum(diff**2)),
        "sle": float(np.sum((np.log(e) - np.log(g)) ** 2)),
        "ar": float(np.sum(np.abs(diff) / g)),
        "sr": float(np.sum(diff**2 / g)),
        "d1": int(np.sum(ratio < 1.25)),
        "d2": int(np.sum(ratio < 1.25**2)),
        "d3": int(np.sum(ratio < 1.25**3)),
    }


def _finish(s: dict) -> dict:
    n = s["n"]
    if n == 0:
        raise NoValidPixels("no valid ground-truth pixels")
    return {
        "mean_gt_depth": s["gt"] / n,
        "rmse": float(np.sqrt(s["se"] / n)),
        "log_rmse": float(np.sqrt(s["sle"] / n)),
        "abs_rel": s["ar"] / n,
        "sq_rel": s["sr"] / n,
        "delta1": s["d1"] / n,
        "delta2": s["d2"] / n,
        "delta3": s["d3"] / n,
        "pixel_count": n,
    }


def depth_metrics(estimated, ground_truth, mask=None) -> dict:
    """RMSE, log RMSE, abs/sq relative error and delta accuracies over valid pixels."""
    return _finish(_sums(estimated, ground_truth, mask))


class DepthAccumulator:
    """Pixel-pooled metrics over many frames, added in a fixed order."""

    def __init__(self):
        self.s = None

    def add(self, estimated, ground_truth, mask=None) -> None:
        part = _sums(estimated, ground_truth, mask)
        if self.s is None:
            self.s = part
        else:
            for k in self.s:
                self.s[k] += part[k]

    def result(self) -> dict:
        if self.s is None:
            raise NoValidPixels("no frames accumulated")
        return _finish(self.s)


def topo_metrics(predictions, truths, num_nodes: int, loop: bool = True) -> tuple[float, float]:
    """Exact accuracy and off-by-one accuracy (neighbours on the route count as correct)."""
    p = np.asarray(predictions, dtype=np.int64)
    t = np.asarray(truths, dtype=np.int64)
    if p.shape != t.shape:
        raise LengthMismatch(f"{p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise LengthMismatch("need at least one prediction")
    if p.min() < 0 or t.min() < 0 or p.max() >= num_nodes or t.max() >= num_nodes:
        raise ValueError(f"node ids must lie in [0, {num_nodes})")
    d = np.abs(p - t)
    if loop:
        d = np.minimum(d, num_nodes - d)
    return float(np.mean(d == 0)), float(np.mean(d <= 1))
