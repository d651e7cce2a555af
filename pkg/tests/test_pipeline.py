import json

import numpy as np
import pytest
import torch
import yaml

from topodepth import checkpoint, cli, fileio, pipeline
from topodepth.errors import ConfigError, NodeTooSmall, SplitLeak


def small_cfg(tmp_path, **kw):
    base = dict(
        data_dir=str(tmp_path / "data"),
        run_dir=str(tmp_path / "run"),
        image_size=8,
        laps=2,
        frame_spacing=0.5,
        channels="2,4,4",
        classifier_channels="2,4,4",
        latent_dim=4,
        batch_size=4,
        steps=6,
        checkpoint_every=3,
        classifier_steps=4,
        classifier_batch_size=4,
        kl_weight=1e-3,
        hole_rate=0.05,
        test_fraction=0.25,
    )
    base.update(kw)
    return pipeline.load_config(overrides=base)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = small_cfg(tmp)
    m = pipeline.generate_data(cfg)
    pipeline.split_dataset(m, cfg.test_fraction, cfg.seed)
    fileio.write_manifest(tmp / "data" / pipeline.MANIFEST_NAME, m)
    return tmp, cfg


def fake_manifest(counts):
    frames, fid = [], 0
    for node, c in enumerate(counts):
        for _ in range(c):
            frames.append(fileio.FrameRecord(fid, f"rgb/{fid}.ppm", f"depth/{fid}.dep", 0, 0, 1, 0, 0, node))
            fid += 1
    return fileio.DatasetManifest("x", {"width": 8, "height": 8}, 5.0, len(counts), frames)


def test_split_ceil_per_node():
    m = pipeline.split_dataset(fake_manifest([10, 11, 2]), 0.1, 0)
    per_node = {}
    for f in m.frames:
        per_node.setdefault(f.node_id, []).append(f.split)
    assert per_node[0].count("test") == 1
    assert per_node[1].count("test") == 2  # ceil(1.1)
    assert per_node[2].count("test") == 1


def test_split_fraction_zero_is_all_train():
    m = pipeline.split_dataset(fake_manifest([4, 4]), 0.0, 0)
    assert all(f.split == "train" for f in m.frames)


def test_split_deterministic_and_seed_dependent():
    a = [f.split for f in pipeline.split_dataset(fake_manifest([30, 30]), 0.1, 5).frames]
    b = [f.split for f in pipeline.split_dataset(fake_manifest([30, 30]), 0.1, 5).frames]
    c = [f.split for f in pipeline.split_dataset(fake_manifest([30, 30]), 0.1, 6).frames]
    assert a == b and a != c


def test_split_node_too_small():
    with pytest.raises(NodeTooSmall):
        pipeline.split_dataset(fake_manifest([5, 1]), 0.1, 0)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="latent_dim"):
        pipeline.load_config(overrides={"latent_dim": 0})
    with pytest.raises(ConfigError, match="bogus"):
        pipeline.load_config(overrides={"bogus": 1})
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"latent_dim": 8, "kl_dedup": "yes", "channels": [4, 8, 8]}))
    cfg = pipeline.load_config(path, {"latent_dim": "16"})
    assert cfg.latent_dim == 16 and cfg.kl_dedup is True and cfg.channel_tuple == (4, 8, 8)


def test_invalid_config_touches_no_files(tmp_path):
    cfg = small_cfg(tmp_path)
    cfg.latent_dim = 0
    with pytest.raises(ConfigError):
        pipeline.run_training(cfg)
    assert not (tmp_path / "run").exists()


def test_config_dump_round_trip():
    cfg = pipeline.load_config(overrides={"seed": 7, "kl_weight": 0.25})
    assert pipeline.load_config(overrides=yaml.safe_load(pipeline.dump_config(cfg))) == cfg


def test_manifest_round_trip(dataset):
    tmp, _ = dataset
    path = tmp / "data" / pipeline.MANIFEST_NAME
    m = fileio.read_manifest(path)
    copy = tmp / "data" / "copy.jsonl"
    fileio.write_manifest(copy, m)
    m2 = fileio.read_manifest(copy)
    assert m2.frames == m.frames and m2.scene_hash == m.scene_hash and m2.max_depth == m.max_depth
    assert copy.read_bytes() == path.read_bytes()


def test_every_node_in_both_splits(dataset):
    tmp, _ = dataset
    m = fileio.read_manifest(tmp / "data" / pipeline.MANIFEST_NAME)
    assert {f.node_id for f in m.split("test")} == set(range(m.num_nodes))
    assert {f.node_id for f in m.split("train")} == set(range(m.num_nodes))


def test_training_reads_only_train_files(dataset):
    tmp, cfg = dataset
    cfg = small_cfg(tmp, run_dir=str(tmp / "audit"))
    _, _, loader = pipeline.run_training(cfg)
    m = fileio.read_manifest(tmp / "data" / pipeline.MANIFEST_NAME)
    test_files = {str(m.root / f.rgb_path) for f in m.split("test")} | {str(m.root / f.depth_path) for f in m.split("test")}
    accessed = {str(p) for p in loader.accessed}
    assert accessed and not accessed & test_files
    _, _, cl_loader = pipeline.run_classifier_training(cfg)
    assert not {str(p) for p in cl_loader.accessed} & test_files


def test_loader_refuses_test_frames(dataset):
    tmp, _ = dataset
    m = fileio.read_manifest(tmp / "data" / pipeline.MANIFEST_NAME)
    loader = fileio.FrameLoader(m, allowed={"train"})
    with pytest.raises(SplitLeak):
        loader.load(m.split("test")[0])


def same_checkpoint(a, b):
    """Arrays and config agree; only the run directory recorded in the header may differ."""
    sa, ca = checkpoint.load_checkpoint(a)
    sb, cb = checkpoint.load_checkpoint(b)
    ca["run"].pop("run_dir")
    cb["run"].pop("run_dir")
    assert ca == cb
    assert sa.keys() == sb.keys()
    for sec in sa:
        assert sa[sec].keys() == sb[sec].keys()
        assert all(np.array_equal(sa[sec][k], sb[sec][k]) for k in sa[sec])
    return True


def params(model):
    return [p.detach().clone() for p in model.state_dict().values()]


def test_resume_matches_uninterrupted_run(dataset):
    tmp, _ = dataset
    kw = dict(batch_size=16, checkpoint_every=10)
    full = small_cfg(tmp, run_dir=str(tmp / "full"), steps=40, **kw)
    m_full, h_full, _ = pipeline.run_training(full)

    pipeline.run_training(small_cfg(tmp, run_dir=str(tmp / "part"), steps=30, **kw))
    m_res, h_res, _ = pipeline.run_training(small_cfg(tmp, run_dir=str(tmp / "part"), steps=40, **kw))

    assert [r["step"] for r in h_res] == list(range(30, 40))
    # the first resumed loss stays within 10% of the last one logged before the interruption
    last_logged = h_full[29]["total"]
    assert abs(h_res[0]["total"] - last_logged) <= 0.1 * last_logged
    # and, since batches and noise are keyed by step, the whole resumed run is exact
    assert h_res == h_full[30:]
    assert all(torch.equal(a, b) for a, b in zip(params(m_full), params(m_res)))
    log_rows = [json.loads(x) for x in (tmp / "part" / "cvae_metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log_rows] == list(range(40))
    assert same_checkpoint(tmp / "full" / "cvae.ckpt", tmp / "part" / "cvae.ckpt")


def test_identical_runs_identical_checkpoints(dataset):
    tmp, _ = dataset
    for name in ("a", "b"):
        pipeline.run_training(small_cfg(tmp, run_dir=str(tmp / name)), resume=False)
    assert same_checkpoint(tmp / "a" / "cvae.ckpt", tmp / "b" / "cvae.ckpt")


# ---------------------------------------------------------------- CLI


def cli_args(tmp, *extra):
    return [
        "--data-dir", str(tmp / "data"), "--run-dir", str(tmp / "cli"), "--image-size", "8", "--laps", "2",
        "--frame-spacing", "0.5", "--channels", "2,4,4", "--classifier-channels", "2,4,4", "--latent-dim", "4",
        "--steps", "4", "--classifier-steps", "4", "--batch-size", "4", "--test-fraction", "0.25", *extra,
    ]


def test_cli_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-command"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_cli_eval_missing_checkpoint(tmp_path, capsys):
    missing = tmp_path / "nope" / "cvae.ckpt"
    code = cli.main(["eval", "--run-dir", str(tmp_path / "nope"), "--data-dir", str(tmp_path)])
    assert code != 0
    assert str(missing) in capsys.readouterr().err


def test_cli_bad_config_value(tmp_path, capsys):
    assert cli.main(["split", "--latent-dim", "0", "--data-dir", str(tmp_path)]) != 0
    assert "latent_dim" in capsys.readouterr().err


def test_cli_quickstart(tmp_path, capsys):
    assert cli.main(["gen-data", *cli_args(tmp_path)]) == 0
    assert cli.main(["split", *cli_args(tmp_path)]) == 0
    assert cli.main(["train-cvae", *cli_args(tmp_path)]) == 0
    assert cli.main(["train-classifier", *cli_args(tmp_path)]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--oracle-node", *cli_args(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "rmse" in out and "oracle-node" in out
    report = json.loads((tmp_path / "cli" / "metrics_test.json").read_text())
    assert 0 <= report["delta1"] <= 1 and report["frame_count"] > 0

    out_dir = tmp_path / "samples"
    assert cli.main(["sample", "--node", "3", "--count", "4", "--out", str(out_dir), *cli_args(tmp_path)]) == 0
    files = sorted(p.name for p in out_dir.iterdir())
    assert len([f for f in files if f.endswith(".ppm")]) == 4
    assert len([f for f in files if f.endswith(".dep")]) == 4
    assert all(f.startswith("node003_") for f in files)
    rgb = fileio.read_ppm(out_dir / files[1])
    assert rgb.shape == (8, 8, 3)

    assert cli.main(["sample", "--node", "99", *cli_args(tmp_path)]) != 0


def test_cli_fill_holes(tmp_path):
    d = np.full((4, 4), 3.0)
    d[1, 2] = np.nan
    fileio.write_depth(tmp_path / "in.dep", d)
    assert cli.main(["fill-holes", str(tmp_path / "in.dep"), str(tmp_path / "out.dep")]) == 0
    out = fileio.read_depth(tmp_path / "out.dep")
    assert not np.isnan(out).any() and abs(out[1, 2] - 3.0) < 1e-6


def test_cli_build_topomap(tmp_path):
    out = tmp_path / "map.jsonl"
    assert cli.main(["build-topomap", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 8  # header plus 8 nodes on the 12 m loop


def test_cli_logs_resolved_config(tmp_path, caplog):
    import logging

    with caplog.at_level(logging.INFO, logger="topodepth"):
        cli.main(["build-topomap", "--out", str(tmp_path / "m.jsonl"), "--seed", "11"])
    assert "seed: 11" in caplog.text
