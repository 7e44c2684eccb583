import json
import logging

import numpy as np
import pytest

from hpseg import heads, shardio, traincli
from hpseg.shardio import SyntheticSpec, generate_synthetic
from hpseg.traincli import PRESETS, TrainConfig, cli, evaluate, run_probes, train

logging.disable(logging.INFO)


def tiny_shards(num_images=12, seed=0, num_classes=3):
    spec = SyntheticSpec(num_classes=num_classes, feat_dim=8, grid_h=3, grid_w=3,
                         num_images=num_images, separation=5.0, noise=1.0, jitter=0.1, seed=seed)
    return generate_synthetic(spec)


def tiny_config(**overrides):
    base = dict(batch_size=4, embed_dim=6, pool_size=8, iterations=12,
                renewal_period=5, cluster_steps=60, linear_epochs=30,
                log_every=0, seed=0)
    base.update(overrides)
    return TrainConfig.from_sources(preset=None, overrides=base)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_preset_coco_defaults():
    cfg = TrainConfig.from_sources(preset="coco")
    assert cfg.tau == 0.8
    assert cfg.pool_size == 2048
    assert cfg.epochs == 3
    assert cfg.embed_dim == 512


def test_preset_table_values():
    assert PRESETS["cityscapes"]["tau"] == 0.6 and PRESETS["cityscapes"]["pool_size"] == 2048
    assert PRESETS["potsdam"]["tau"] == 0.4 and PRESETS["potsdam"]["pool_size"] == 1024


def test_spec_defaults_prepopulated():
    cfg = TrainConfig()
    assert cfg.rho == 2.0
    assert cfg.alpha == 0.05
    assert cfg.lr == 5e-4
    assert cfg.weight_decay == 0.1
    assert cfg.renewal_period == 100


def test_unknown_preset_and_keys_rejected():
    with pytest.raises(ValueError, match="unknown preset"):
        TrainConfig.from_sources(preset="imagenet")
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_sources(overrides={"learning_rate": 0.1})


def test_flag_overrides_beat_file_and_preset():
    cfg = TrainConfig.from_sources(preset="coco", file_values={"tau": 0.7},
                                   overrides={"tau": 0.3, "seed": None})
    assert cfg.tau == 0.3  # flags win; None overrides are ignored
    assert cfg.pool_size == 2048


# ---------------------------------------------------------------------------
# training loop behavior
# ---------------------------------------------------------------------------


def test_train_renewal_count_and_lambda_trace():
    shards = tiny_shards()
    res = train(tiny_config(), shards=shards)
    assert res.renewal_count == -(-12 // 5)  # ceil(T / period) = 3
    assert res.history[0].lam == 0.0
    assert res.history[6].lam == pytest.approx(0.5)
    assert len(res.history) == 12
    assert res.metric_rows[-1]["iteration"] == 12


def test_train_metrics_csv_deterministic(tmp_path):
    shards = tiny_shards()
    paths = []
    for run in range(2):
        out = tmp_path / f"metrics_{run}.csv"
        cfg = tiny_config(metrics_path=str(out), eval_every=6)
        train(cfg, shards=shards)
        paths.append(out)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_train_eval_cadence_rows(tmp_path):
    shards = tiny_shards()
    cfg = tiny_config(eval_every=6)
    res = train(cfg, shards=shards)
    assert [row["iteration"] for row in res.metric_rows] == [6, 12]


def test_resume_reproduces_uninterrupted_run(tmp_path):
    shards = tiny_shards()
    ck = tmp_path / "run.hpck"
    full = train(tiny_config(iterations=12, eval_every=6, checkpoint_path=str(ck),
                             checkpoint_every=6), shards=shards)
    mid = tmp_path / "run_it6.hpck"
    assert mid.exists()

    resumed = train(tiny_config(iterations=12, eval_every=6), shards=shards, resume=str(mid))

    for name, arr in full.params.blocks().items():
        np.testing.assert_array_equal(arr, resumed.params.blocks()[name])
    for name, arr in full.momentum_params.blocks().items():
        np.testing.assert_array_equal(arr, resumed.momentum_params.blocks()[name])
    assert resumed.metric_rows == full.metric_rows[-len(resumed.metric_rows):]


def test_checkpoint_round_trip_and_evaluate_matches_final_row(tmp_path):
    shards = tiny_shards()
    ck = tmp_path / "final.hpck"
    cfg = tiny_config(checkpoint_path=str(ck))
    res = train(cfg, shards=shards)
    row = evaluate(str(ck), shards, tiny_config())
    assert row == res.metric_rows[-1]


def test_evaluate_requires_labels(tmp_path):
    shards = tiny_shards()
    for s in shards:
        s.labels = None
    ck = tmp_path / "x.hpck"
    train(tiny_config(checkpoint_path=str(ck)), shards=tiny_shards())
    with pytest.raises(ValueError, match="unlabeled"):
        evaluate(str(ck), shards, tiny_config())


def test_trained_beats_random_init_probe():
    shards = tiny_shards(num_images=16)
    cfg = tiny_config(iterations=40, pool_size=16)
    res = train(cfg, shards=shards)
    init_params = heads.init_head_parameters(
        shards[0].feat_dim, cfg.embed_dim, traincli.RngStream(cfg.seed).child("init")
    )
    random_row = run_probes(shards, init_params, cfg, iteration=0)
    trained_row = res.metric_rows[-1]
    assert random_row["unsup_acc"] < trained_row["unsup_acc"]


def test_baseline_mode_runs_without_mining():
    shards = tiny_shards()
    res = train(tiny_config(baseline_self_contrastive=True), shards=shards)
    assert all(b.phi_ag == 0.0 and b.phi_sp == 0.0 for b in res.history)
    assert all(b.total > 0 for b in res.history)


def test_loss_prop_mode_runs():
    shards = tiny_shards()
    res = train(tiny_config(loss_prop=True, iterations=6), shards=shards)
    assert len(res.history) == 6
    assert res.history[-1].psi_ag != 0.0


def test_ablation_switches_zero_their_terms():
    shards = tiny_shards()
    res = train(tiny_config(ghp_ts=False, lhp=False, regularizer=False, iterations=4), shards=shards)
    for b in res.history:
        assert b.psi_ag == b.phi_sp == b.psi_sp == b.regularizer == 0.0


def test_train_needs_data():
    with pytest.raises(ValueError, match="data_dir"):
        train(tiny_config())


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def test_cli_synth_train_eval_inspect_round_trip(tmp_path, capsys):
    data = tmp_path / "data"
    rc = cli(["synth", "--out", str(data), "--classes", "3", "--images", "10",
              "--grid-h", "3", "--grid-w", "3", "--feat-dim", "8", "--seed", "1"])
    assert rc == 0
    assert len(list(data.glob("*.hpfs"))) == 10

    metrics = tmp_path / "metrics.csv"
    ck = tmp_path / "ck.hpck"
    rc = cli(["train", "--data", str(data), "--iterations", "8", "--batch-size", "4",
              "--embed-dim", "6", "--pool-size", "8", "--metrics", str(metrics),
              "--checkpoint", str(ck), "--seed", "0"])
    assert rc == 0
    assert metrics.exists() and ck.exists()
    header = metrics.read_text().splitlines()[0]
    assert header == "iteration,unsup_acc,unsup_miou,linear_acc,linear_miou"

    rc = cli(["eval", "--from", str(ck), "--data", str(data),
              "--batch-size", "4", "--embed-dim", "6", "--pool-size", "8"])
    assert rc == 0

    rc = cli(["inspect", str(sorted(data.glob('*.hpfs'))[0])])
    assert rc == 0
    out = capsys.readouterr().out
    assert "H=3 W=3 C=8" in out and "num_classes=3" in out


def test_cli_dump_config_resolves_preset(capsys):
    rc = cli(["train", "--preset", "coco", "--dump-config"])
    assert rc == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["tau"] == 0.8 and cfg["pool_size"] == 2048


def test_cli_config_file_with_flag_override(tmp_path, capsys):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"preset": "potsdam", "tau": 0.45}))
    rc = cli(["train", "--config", str(cfg_file), "--tau", "0.9", "--dump-config"])
    assert rc == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["tau"] == 0.9 and cfg["pool_size"] == 1024


def test_cli_unknown_subcommand_exit_1(capsys):
    assert cli(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_cli_unknown_flag_exit_1(capsys):
    assert cli(["train", "--bogus-flag"]) == 1


def test_cli_train_without_data_exit_1(capsys):
    assert cli(["train"]) == 1
    assert "needs --data" in capsys.readouterr().err


def test_cli_inspect_non_shard_exit_1(tmp_path, capsys):
    path = tmp_path / "junk.hpfs"
    path.write_bytes(b"not a shard at all")
    assert cli(["inspect", str(path)]) == 1


def test_cli_missing_file_exit_1(tmp_path):
    assert cli(["inspect", str(tmp_path / "absent.hpfs")]) == 1
