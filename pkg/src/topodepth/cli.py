"""Command-line entry point.

Every subcommand takes ``--config <yaml>`` plus one flag per config field
(``--latent-dim 16``, ``--kl-dedup true``, ...); flags override the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import fileio, pipeline, preprocess, rng, topomap
from .errors import TopoDepthError

log = logging.getLogger("topodepth")


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help="YAML key-value config file")
    for f in pipeline.config_fields():
        flag = "--" + f.name.replace("_", "-")
        parent.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar=f.name.upper())
    parent.add_argument("-v", "--verbose", action="store_true")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog="topodepth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[parent], help="render a synthetic dataset and its topological map")

    p = sub.add_parser("build-topomap", parents=[parent], help="build the topological map of the reference route")
    p.add_argument("--out", help="output path (default: <data_dir>/topomap.jsonl)")

    p = sub.add_parser("fill-holes", parents=[parent], help="harmonic hole filling of a depth file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=10000)

    sub.add_parser("split", parents=[parent], help="stratified train/test split of the manifest")

    p = sub.add_parser("train-cvae", parents=[parent], help="train the paired conditional VAE")
    p.add_argument("--no-resume", action="store_true")

    p = sub.add_parser("train-classifier", parents=[parent], help="train the topological node classifier")
    p.add_argument("--no-resume", action="store_true")

    p = sub.add_parser("eval", parents=[parent], help="evaluate depth and localization on a split")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--oracle-node", action="store_true", help="also report depth conditioned on the true node")
    p.add_argument("--cvae-checkpoint")
    p.add_argument("--classifier-checkpoint")

    p = sub.add_parser("sample", parents=[parent], help="hallucinate RGB/depth pairs for a node")
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", help="output directory (default: <run_dir>/samples)")
    p.add_argument("--cvae-checkpoint")
    return parser


def _resolve_config(args) -> pipeline.RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    cfg = pipeline.load_config(args.config, overrides)
    log.info("resolved config:\n%s", pipeline.dump_config(cfg))
    return cfg


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def run(args) -> int:
    cfg = _resolve_config(args)
    data_dir, run_dir = Path(cfg.data_dir), Path(cfg.run_dir)
    manifest_path = data_dir / pipeline.MANIFEST_NAME

    if args.command == "gen-data":
        m = pipeline.generate_data(cfg)
        print(f"wrote {len(m.frames)} frames ({m.num_nodes} nodes) to {manifest_path}")
    elif args.command == "build-topomap":
        topo = pipeline.build_reference_topomap(cfg)
        out = Path(args.out) if args.out else data_dir / pipeline.TOPOMAP_NAME
        out.parent.mkdir(parents=True, exist_ok=True)
        topomap.write_topomap(out, topo)
        print(f"wrote {topo.num_nodes} nodes (spacing {topo.spacing} m, loop={topo.loop}) to {out}")
    elif args.command == "fill-holes":
        depth = fileio.read_depth(_require(Path(args.input), "depth file"))
        filled = preprocess.fill_holes(depth, args.tol, args.max_iters)
        fileio.write_depth(args.output, filled)
        print(f"filled {int((depth != depth).sum())} holes -> {args.output}")
    elif args.command == "split":
        m = fileio.read_manifest(_require(manifest_path, "manifest"))
        pipeline.split_dataset(m, cfg.test_fraction, cfg.seed)
        fileio.write_manifest(manifest_path, m)
        n_test = len(m.split("test"))
        print(f"split {len(m.frames)} frames: {len(m.frames) - n_test} train / {n_test} test")
    elif args.command == "train-cvae":
        _require(manifest_path, "manifest")
        _, history, _ = pipeline.run_training(cfg, resume=not args.no_resume)
        last = history[-1]["total"] if history else float("nan")
        print(f"trained CVAE to step {cfg.steps}; last loss {last:.6f}; checkpoint {run_dir / pipeline.CVAE_CKPT}")
    elif args.command == "train-classifier":
        _require(manifest_path, "manifest")
        _, history, _ = pipeline.run_classifier_training(cfg, resume=not args.no_resume)
        last = history[-1]["loss"] if history else float("nan")
        print(f"trained classifier to step {cfg.classifier_steps}; last loss {last:.6f}")
    elif args.command == "eval":
        cvae_path = _require(Path(args.cvae_checkpoint or run_dir / pipeline.CVAE_CKPT), "CVAE checkpoint")
        clf_path = _require(Path(args.classifier_checkpoint or run_dir / pipeline.CLASSIFIER_CKPT), "classifier checkpoint")
        m = fileio.read_manifest(_require(manifest_path, "manifest"))
        topo = topomap.read_topomap(_require(data_dir / pipeline.TOPOMAP_NAME, "topological map"))
        cvae_model, _, _ = pipeline.load_cvae(cvae_path)
        clf_model, _, _ = pipeline.load_classifier(clf_path)
        report = pipeline.evaluate_split(
            cvae_model, clf_model, m, topo, pipeline.normalization(m, cfg), cfg, args.split, args.oracle_node
        )
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / f"metrics_{args.split}.json").write_text(report.to_json())
        (run_dir / f"metrics_{args.split}.txt").write_text(report.to_kv())
        print(report.table_row(args.split))
        if report.oracle_node:
            print("oracle-node conditioning: " + json.dumps(report.oracle_node, sort_keys=True))
    elif args.command == "sample":
        cvae_path = _require(Path(args.cvae_checkpoint or run_dir / pipeline.CVAE_CKPT), "CVAE checkpoint")
        model, _, meta = pipeline.load_cvae(cvae_path)
        if not 0 <= args.node < model.num_nodes:
            raise TopoDepthError(f"--node must lie in [0, {model.num_nodes})")
        if args.count < 1:
            raise TopoDepthError("--count must be >= 1")
        spec = preprocess.NormalizationSpec(cfg.max_depth if cfg.max_depth > 0 else meta["max_depth"])
        out = Path(args.out) if args.out else run_dir / "samples"
        written = pipeline.write_samples(model, spec, args.node, args.count, out, cfg.seed)
        print(f"wrote {len(written)} RGB/depth pairs for node {args.node} to {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return run(args)
    except (TopoDepthError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"topodepth {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
