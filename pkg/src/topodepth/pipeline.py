"""Orchestration: data generation, splitting, training, evaluation and sampling."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from . import checkpoint, classifier, cvae, fileio, metrics, preprocess, rng, topomap, worldgen
from .errors import ConfigError, NodeTooSmall

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
TOPOMAP_NAME = "topomap.jsonl"
SCENE_NAME = "scene.json"
CVAE_CKPT = "cvae.ckpt"
CLASSIFIER_CKPT = "classifier.ckpt"


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    run_dir: str = "runs/default"
    scene: str = ""
    # data generation
    image_size: int = 32
    horizontal_fov_deg: float = 90.0
    node_spacing: float = 1.5
    laps: int = 9
    frame_spacing: float = 0.25
    lateral_offset_step: float = 0.5
    offset_variants: int = 3
    noise_std: float = 0.05
    camera_height: float = 1.0
    hole_rate: float = 0.0
    test_fraction: float = 0.1
    fill_tol: float = 1e-6
    fill_max_iters: int = 10000
    max_depth: float = 0.0  # 0 -> room diagonal recorded in the manifest
    # cvae
    latent_dim: int = 32
    kl_weight: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    steps: int = 3000
    kl_dedup: bool = False
    shared_trunk: bool = False
    conditioned: bool = True
    channels: str = "16,32,64"
    checkpoint_every: int = 500
    # classifier
    classifier_steps: int = 1500
    classifier_learning_rate: float = 1e-3
    classifier_batch_size: int = 32
    classifier_channels: str = "16,32,32"

    def validate(self) -> "RunConfig":
        problems = []
        if self.latent_dim < 1:
            problems.append(f"latent_dim must be >= 1 (got {self.latent_dim})")
        if self.kl_weight < 0:
            problems.append("kl_weight must be >= 0")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if self.image_size < 8 or self.image_size % 8:
            problems.append("image_size must be a positive multiple of 8")
        if not 0 < self.horizontal_fov_deg < 180:
            problems.append("horizontal_fov_deg must lie in (0, 180)")
        if self.node_spacing <= 0 or self.frame_spacing <= 0:
            problems.append("node_spacing and frame_spacing must be positive")
        if self.laps < 1:
            problems.append("laps must be >= 1")
        if not 0 <= self.hole_rate < 1:
            problems.append("hole_rate must lie in [0, 1)")
        if not 0 <= self.test_fraction < 1:
            problems.append("test_fraction must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0 or self.checkpoint_every < 1:
            problems.append("batch_size and checkpoint_every must be >= 1, steps >= 0")
        try:
            if len(self.channel_tuple) != 3 or len(self.classifier_channel_tuple) != 3:
                problems.append("channels and classifier_channels need three comma-separated widths")
        except ValueError:
            problems.append("channels must be comma-separated integers")
        if problems:
            raise ConfigError("invalid configuration: " + "; ".join(problems))
        return self

    @property
    def channel_tuple(self) -> tuple[int, ...]:
        return tuple(int(c) for c in str(self.channels).split(","))

    @property
    def classifier_channel_tuple(self) -> tuple[int, ...]:
        return tuple(int(c) for c in str(self.classifier_channels).split(","))

    def train_config(self) -> cvae.TrainConfig:
        return cvae.TrainConfig(
            latent_dim=self.latent_dim,
            kl_weight=self.kl_weight,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            steps=self.steps,
            rng_seed=self.seed,
            kl_dedup=self.kl_dedup,
            shared_trunk=self.shared_trunk,
            channels=self.channel_tuple,
            conditioned=self.conditioned,
        )

    def classifier_config(self) -> classifier.ClassifierConfig:
        return classifier.ClassifierConfig(
            learning_rate=self.classifier_learning_rate,
            batch_size=self.classifier_batch_size,
            steps=self.classifier_steps,
            rng_seed=self.seed,
            channels=self.classifier_channel_tuple,
        )

    def trajectory(self, waypoints=None) -> worldgen.TrajectoryParams:
        return worldgen.TrajectoryParams(
            waypoints=tuple(waypoints or worldgen.living_room_loop()),
            frame_spacing=self.frame_spacing,
            lateral_offset_step=self.lateral_offset_step,
            num_laps=self.laps,
            noise_std=self.noise_std,
            rng_seed=self.seed,
            offset_variants=self.offset_variants,
            camera_height=self.camera_height,
        )

    def intrinsics(self) -> worldgen.CameraIntrinsics:
        return worldgen.CameraIntrinsics(self.image_size, self.image_size, math.radians(self.horizontal_fov_deg))


def config_fields() -> list[dataclasses.Field]:
    return list(fields(RunConfig))


def _coerce(f: dataclasses.Field, value):
    kind = type(getattr(RunConfig(), f.name))
    if kind is bool:
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{f.name}: expected a boolean, got {value!r}")
        return bool(value)
    if kind is str and isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{f.name}: cannot interpret {value!r} as {kind.__name__}") from None


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the YAML key-value file, then explicit overrides. Unknown keys are errors."""
    values: dict = {}
    if path:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a key-value mapping")
        values.update(loaded)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name: f for f in config_fields()}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**{k: _coerce(known[k], v) for k, v in values.items()})
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=True)


# ---------------------------------------------------------------- data


def load_scene(cfg: RunConfig) -> worldgen.Scene:
    if cfg.scene:
        return worldgen.build_scene(json.loads(Path(cfg.scene).read_text()))
    return worldgen.build_scene(worldgen.living_room_config())


def build_reference_topomap(cfg: RunConfig) -> topomap.TopoMap:
    return topomap.build_topomap(worldgen.reference_trajectory(cfg.trajectory()), cfg.node_spacing)


def generate_data(cfg: RunConfig) -> fileio.DatasetManifest:
    data_dir = Path(cfg.data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    scene = load_scene(cfg)
    topo = build_reference_topomap(cfg)
    topomap.write_topomap(data_dir / TOPOMAP_NAME, topo)
    (data_dir / SCENE_NAME).write_text(json.dumps(scene.config, indent=2, sort_keys=True))
    manifest = worldgen.generate_dataset(
        scene, cfg.trajectory(), cfg.intrinsics(), topo, data_dir, hole_rate=cfg.hole_rate
    )
    log.info("generated %d frames over %d nodes in %s", len(manifest.frames), topo.num_nodes, data_dir)
    return manifest


def split_dataset(manifest: fileio.DatasetManifest, test_fraction: float = 0.1, rng_seed: int = 0):
    """Stratified per node: ceil(fraction * count) frames of each node go to test."""
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    by_node: dict[int, list[fileio.FrameRecord]] = {}
    for f in sorted(manifest.frames, key=lambda r: r.frame_id):
        by_node.setdefault(f.node_id, []).append(f)
    gen = rng.stream(rng_seed, "split-shuffle")
    for node in sorted(by_node):
        frames = by_node[node]
        if len(frames) < 2:
            raise NodeTooSmall(f"node {node} has {len(frames)} frame(s); need at least 2 to split")
        n_test = math.ceil(test_fraction * len(frames) - 1e-9)
        order = gen.permutation(len(frames))
        test_ids = {frames[i].frame_id for i in order[:n_test]}
        for f in frames:
            f.split = "test" if f.frame_id in test_ids else "train"
    return manifest


def load_arrays(manifest: fileio.DatasetManifest, split: str, cfg: RunConfig, fill: bool = True):
    """Load one split as normalized arrays: rgb (B,H,W,3), depth (B,H,W), nodes (B,), frames, raw depth."""
    frames = sorted(manifest.split(split), key=lambda r: r.frame_id)
    if not frames:
        raise ValueError(f"split {split!r} is empty; run `split` first")
    loader = fileio.FrameLoader(manifest, allowed={split})
    spec = normalization(manifest, cfg)
    rgb, dep, raw = [], [], []
    for f in frames:
        r, d = loader.load(f)
        raw.append(d)
        if fill:
            d = preprocess.fill_holes(d, cfg.fill_tol, cfg.fill_max_iters)
            d, _ = preprocess.normalize_depth(d, spec)
        rgb.append(r)
        dep.append(d)
    nodes = np.array([f.node_id for f in frames], dtype=np.int64)
    return np.stack(rgb), np.stack(dep), nodes, frames, np.stack(raw), loader


def normalization(manifest: fileio.DatasetManifest, cfg: RunConfig) -> preprocess.NormalizationSpec:
    return preprocess.NormalizationSpec(cfg.max_depth if cfg.max_depth > 0 else manifest.max_depth)


# ---------------------------------------------------------------- cvae training


def build_cvae(cfg: RunConfig, num_nodes: int) -> cvae.PairedCVAE:
    model = cvae.PairedCVAE(
        cfg.image_size,
        cfg.image_size,
        num_nodes,
        latent_dim=cfg.latent_dim,
        channels=cfg.channel_tuple,
        shared_trunk=cfg.shared_trunk,
        conditioned=cfg.conditioned,
    )
    cvae.init_weights(model, cfg.seed)
    return model


def save_cvae(path, model, optimizer, cfg: RunConfig, step: int, max_depth: float) -> None:
    checkpoint.save_checkpoint(
        path,
        {"cvae": checkpoint.module_arrays(model), "cvae_optim": checkpoint.optimizer_arrays(model, optimizer)},
        {"kind": "cvae", "hparams": model.hparams, "run": dataclasses.asdict(cfg), "step": step, "max_depth": max_depth},
    )


def load_cvae(path, learning_rate: Optional[float] = None):
    sections, meta = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "cvae" or "cvae" not in sections:
        raise ValueError(f"{path}: not a CVAE checkpoint")
    model = cvae.PairedCVAE.from_hparams(meta["hparams"])
    checkpoint.load_module_arrays(model, sections["cvae"])
    optimizer = cvae.make_optimizer(model, learning_rate or meta["run"]["learning_rate"])
    checkpoint.load_optimizer_arrays(model, optimizer, sections.get("cvae_optim", {}))
    return model, optimizer, meta


def _read_log(path: Path, before_step: int) -> list[dict]:
    if not path.exists():
        return []
    rows = [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]
    return [r for r in rows if r["step"] < before_step]


def _write_log(path: Path, rows: list[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def train_cvae_arrays(model, optimizer, rgb, dep, nodes, tcfg: cvae.TrainConfig, start_step: int = 0, on_step=None):
    """Minibatch loop over in-memory arrays. Batches and epsilon are derived from (seed, step) so resuming is exact."""
    x_rgb, x_dep = cvae.to_batch(rgb, dep)
    labels = cvae.labels_tensor(nodes, model.num_nodes)
    history = []
    for step in range(start_step, tcfg.steps):
        idx = torch.from_numpy(cvae.batch_indices(tcfg.rng_seed, step, len(nodes), tcfg.batch_size))
        eps = cvae.draw_eps(tcfg.rng_seed, step, len(idx), model.latent_dim)
        rec = cvae.train_step(model, optimizer, (x_rgb[idx], x_dep[idx], labels[idx]), tcfg, eps, step)
        history.append(rec.as_dict())
        if on_step is not None:
            on_step(step, rec)
    return history


def run_training(cfg: RunConfig, resume: bool = True):
    """Train the CVAE on the train split, checkpointing every ``checkpoint_every`` steps.

    Returns (model, loss history, frame loader); the loader's access log is
    what the split-leak audit inspects.
    """
    cfg.validate()
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved.yaml").write_text(dump_config(cfg))
    manifest = fileio.read_manifest(Path(cfg.data_dir) / MANIFEST_NAME)
    rgb, dep, nodes, _, _, loader = load_arrays(manifest, "train", cfg)
    tcfg = cfg.train_config()
    ckpt_path = run_dir / CVAE_CKPT
    log_path = run_dir / "cvae_metrics.jsonl"

    start = 0
    if resume and ckpt_path.exists():
        model, optimizer, meta = load_cvae(ckpt_path, cfg.learning_rate)
        start = int(meta["step"])
        log.info("resuming CVAE training from %s at step %d", ckpt_path, start)
    else:
        model = build_cvae(cfg, manifest.num_nodes)
        optimizer = cvae.make_optimizer(model, cfg.learning_rate)
    rows = _read_log(log_path, start)

    def on_step(step, rec):
        rows.append(rec.as_dict())
        done = step + 1
        if done % cfg.checkpoint_every == 0 or done == tcfg.steps:
            save_cvae(ckpt_path, model, optimizer, cfg, done, manifest.max_depth)
            _write_log(log_path, rows)
        if done % 100 == 0:
            log.info("cvae step %d total %.5f", done, rec.total)

    history = train_cvae_arrays(model, optimizer, rgb, dep, nodes, tcfg, start, on_step)
    if start >= tcfg.steps and not ckpt_path.exists():
        save_cvae(ckpt_path, model, optimizer, cfg, start, manifest.max_depth)
    return model, history, loader


# ---------------------------------------------------------------- classifier training


def save_classifier(path, model, optimizer, cfg: RunConfig, step: int) -> None:
    checkpoint.save_checkpoint(
        path,
        {"classifier": checkpoint.module_arrays(model), "classifier_optim": checkpoint.optimizer_arrays(model, optimizer)},
        {"kind": "classifier", "hparams": model.hparams, "run": dataclasses.asdict(cfg), "step": step},
    )


def load_classifier(path, learning_rate: Optional[float] = None):
    sections, meta = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "classifier" or "classifier" not in sections:
        raise ValueError(f"{path}: not a classifier checkpoint")
    model = classifier.TopoClassifier.from_hparams(meta["hparams"])
    checkpoint.load_module_arrays(model, sections["classifier"])
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate or meta["run"]["classifier_learning_rate"])
    checkpoint.load_optimizer_arrays(model, optimizer, sections.get("classifier_optim", {}))
    return model, optimizer, meta


def run_classifier_training(cfg: RunConfig, resume: bool = True):
    cfg.validate()
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = fileio.read_manifest(Path(cfg.data_dir) / MANIFEST_NAME)
    rgb, _, nodes, _, _, loader = load_arrays(manifest, "train", cfg, fill=False)
    ccfg = cfg.classifier_config()
    ckpt_path = run_dir / CLASSIFIER_CKPT
    start = 0
    if resume and ckpt_path.exists():
        model, optimizer, meta = load_classifier(ckpt_path, ccfg.learning_rate)
        start = int(meta["step"])
    else:
        model = classifier.TopoClassifier(cfg.image_size, cfg.image_size, manifest.num_nodes, ccfg.channels)
        classifier.init_weights(model, cfg.seed)
        optimizer = torch.optim.Adam(model.parameters(), lr=ccfg.learning_rate)

    def on_step(step, loss):
        done = step + 1
        if done % cfg.checkpoint_every == 0 or done == ccfg.steps:
            save_classifier(ckpt_path, model, optimizer, cfg, done)

    _, history = classifier.train_classifier(model, rgb, nodes, ccfg, start, optimizer, on_step)
    with open(run_dir / "classifier_metrics.jsonl", "a") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")
    return model, history, loader


# ---------------------------------------------------------------- evaluation and sampling


def evaluate_split(cvae_model, clf_model, manifest, topo: topomap.TopoMap, spec, cfg: RunConfig,
                   split: str = "test", oracle_node: bool = False) -> metrics.MetricsReport:
    """Classify each frame, infer depth conditioned on the predicted node and pool the metrics.

    Frames are processed in ascending frame id so the report is bit-stable.
    """
    rgb, _, truths, frames, raw_depth, _ = load_arrays(manifest, split, cfg, fill=False)
    logits = classifier.classify(clf_model, rgb)
    preds = classifier.predict(logits)
    acc, off1 = metrics.topo_metrics(preds, truths, topo.num_nodes, topo.loop)

    def depth_report(node_ids):
        est = spec.max_depth * cvae.infer_depth_normalized(cvae_model, rgb, node_ids)
        acc_ = metrics.DepthAccumulator()
        for e, g in zip(est, raw_depth):
            acc_.add(e, g)
        return acc_.result()

    d = depth_report(preds)
    oracle = None
    if oracle_node:
        o = depth_report(truths)
        oracle = {k: o[k] for k in metrics.DEPTH_KEYS}
    return metrics.MetricsReport(
        mean_gt_depth=d["mean_gt_depth"],
        rmse=d["rmse"],
        log_rmse=d["log_rmse"],
        abs_rel=d["abs_rel"],
        sq_rel=d["sq_rel"],
        delta1=d["delta1"],
        delta2=d["delta2"],
        delta3=d["delta3"],
        topo_accuracy=acc,
        topo_off_by_one=off1,
        pixel_count=d["pixel_count"],
        frame_count=len(frames),
        oracle_node=oracle,
    )


def node_depth_means(manifest, cfg: RunConfig, split: str = "train") -> dict[int, float]:
    _, _, nodes, _, raw, _ = load_arrays(manifest, split, cfg, fill=False)
    out = {}
    for k in sorted(set(nodes.tolist())):
        vals = raw[nodes == k]
        out[k] = float(np.nanmean(vals))
    return out


def sampled_depth_means(model, spec, num_nodes: int, seed: int, count: int = 16) -> dict[int, float]:
    out = {}
    for k in range(num_nodes):
        _, dep = cvae.sample_node(model, k, rng.stream(seed, f"sample/{k}"), count)
        out[k] = float(np.mean(dep) * spec.max_depth)
    return out


def write_samples(model, spec, node: int, count: int, out_dir, seed: int) -> list[tuple[Path, Path]]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rgb, dep = cvae.sample_node(model, node, rng.stream(seed, f"sample/{node}"), count)
    written = []
    for i in range(count):
        rp = out_dir / f"node{node:03d}_{i:03d}.ppm"
        dp = out_dir / f"node{node:03d}_{i:03d}.dep"
        fileio.write_ppm(rp, rgb[i])
        fileio.write_depth(dp, preprocess.denormalize_depth(dep[i], spec))
        written.append((rp, dp))
    return written
