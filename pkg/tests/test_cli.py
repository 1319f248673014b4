"""End-to-end CLI runs on desk-scale configs."""

import csv
import json

from fedite.cli import main
from fedite.data import load_dataset

BASE_CONFIG = {
    "protocol": "federated",
    "dataset": {"synthetic": {"n": 80, "num_numerical": 3, "num_categorical": 1,
                              "num_treatments": 2, "noise_std": 0.2,
                              "propensity_sharpness": 0.5, "seed": 51}},
    "partition": {"sites": 2, "heterogeneity": 0.0},
    "model": {"embed_width": 8, "encoder_layers": 1, "self_heads": 2,
              "cross_heads": 2, "predictor_hidden": 8},
    "local": {"local_epochs": 1, "batch_size": 64, "learning_rate": 5e-3},
    "federation": {"rounds": 2, "patience": 5},
    "seeds": [0],
    "output_dir": "out",
}


def write_config(tmp_path, **overrides):
    config = json.loads(json.dumps(BASE_CONFIG))
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(config.get(key), dict):
            config[key].update(value)
        else:
            config[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# generate

def test_generate_writes_rows_and_schema(tmp_path):
    config = write_config(tmp_path, dataset={"synthetic": {"n": 100, "seed": 3,
                                                           "noise_std": 0.0}})
    out = tmp_path / "dataset"
    assert main(["generate", "--config", str(config), "--out", str(out)]) == 0
    rows = read_csv(out / "data.csv")
    assert len(rows) == 101  # header + 100 records
    records, schema = load_dataset(out / "data.csv", out / "schema.csv")
    assert len(records) == 100
    # sigma = 0: outcome column equals the assigned arm's potential outcome
    for r in records:
        assert r.outcome == r.potential_outcomes[r.treatment]


def test_generate_is_byte_deterministic(tmp_path):
    config = write_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["generate", "--config", str(config), "--out", str(out_a)]) == 0
    assert main(["generate", "--config", str(config), "--out", str(out_b)]) == 0
    assert (out_a / "data.csv").read_bytes() == (out_b / "data.csv").read_bytes()
    assert (out_a / "schema.csv").read_bytes() == (out_b / "schema.csv").read_bytes()


def test_generate_requires_synthetic_section(tmp_path):
    data = tmp_path / "d.csv"
    schema = tmp_path / "s.csv"
    config = write_config(tmp_path,
                          dataset={"files": {"data": str(data), "schema": str(schema)}})
    assert main(["generate", "--config", str(config), "--out", str(tmp_path / "x")]) == 2


# ---------------------------------------------------------------------------
# train

def test_train_federated_outputs(tmp_path):
    config = write_config(tmp_path, seeds=[0, 1], output_dir=str(tmp_path / "out"))
    assert main(["train", "--config", str(config), "--no-figures"]) == 0
    for seed in (0, 1):
        seed_dir = tmp_path / "out" / f"seed_{seed}"
        assert (seed_dir / "checkpoint.ckpt").exists()
        history = read_csv(seed_dir / "round_history.csv")
        assert history[0] == ["round", "site", "train_rmse_f", "val_rmse_f",
                              "aggregate_val_rmse_f", "stale_rounds"]
        assert 1 < len(history) <= 1 + 2 * 2  # <= rounds x sites
        trace = read_csv(seed_dir / "loss_trace.csv")
        assert trace[0] == ["round", "site", "epoch", "phase", "split", "loss"]
        metrics = json.loads((seed_dir / "metrics.json").read_text())
        assert {s["site_id"] for s in metrics["sites"]} == {0, 1}
        table = read_csv(seed_dir / "metrics.csv")
        assert table[0] == ["site", "treatment", "metric", "value"]
    summary = read_csv(tmp_path / "out" / "summary.csv")
    assert summary[0][0] == "seed"
    assert [row[0] for row in summary[1:]] == ["0", "1", "mean", "std"]


def test_train_renders_figures_by_default(tmp_path):
    config = write_config(tmp_path, output_dir=str(tmp_path / "out"))
    assert main(["train", "--config", str(config)]) == 0
    fig_dir = tmp_path / "out" / "seed_0" / "figures"
    assert (fig_dir / "round_history.png").exists()
    assert (fig_dir / "loss_trace.png").exists()


def test_train_local_protocol_writes_per_site_checkpoints(tmp_path):
    config = write_config(tmp_path, protocol="local", output_dir=str(tmp_path / "out"))
    assert main(["train", "--config", str(config), "--no-figures"]) == 0
    seed_dir = tmp_path / "out" / "seed_0"
    assert (seed_dir / "checkpoint_site0.ckpt").exists()
    assert (seed_dir / "checkpoint_site1.ckpt").exists()
    assert not (seed_dir / "checkpoint.ckpt").exists()


def test_train_centralized_protocol(tmp_path):
    config = write_config(tmp_path, protocol="centralized",
                          output_dir=str(tmp_path / "out"))
    assert main(["train", "--config", str(config), "--no-figures"]) == 0
    metrics = json.loads((tmp_path / "out" / "seed_0" / "metrics.json").read_text())
    assert len(metrics["sites"]) == 1


def test_train_is_byte_deterministic(tmp_path):
    config_a = write_config(tmp_path, output_dir=str(tmp_path / "a"))
    assert main(["train", "--config", str(config_a), "--no-figures"]) == 0
    config_b = write_config(tmp_path, output_dir=str(tmp_path / "b"))
    assert main(["train", "--config", str(config_b), "--no-figures"]) == 0
    for name in ("seed_0/checkpoint.ckpt", "seed_0/metrics.json", "seed_0/metrics.csv",
                 "seed_0/round_history.csv", "seed_0/loss_trace.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() \
            == (tmp_path / "b" / name).read_bytes(), name


def test_train_reports_failing_seed(tmp_path, capsys):
    config = write_config(tmp_path, local={"learning_rate": 1e200},
                          seeds=[0], output_dir=str(tmp_path / "out"))
    assert main(["train", "--config", str(config), "--no-figures"]) == 1
    assert "seed 0 failed" in capsys.readouterr().err


def test_train_rejects_unknown_config_keys(tmp_path):
    path = tmp_path / "config.json"
    bad = dict(BASE_CONFIG)
    bad["learning_rate"] = 1.0  # belongs under "local"
    path.write_text(json.dumps(bad))
    assert main(["train", "--config", str(path), "--no-figures"]) == 2


def test_train_rejects_two_dataset_sources(tmp_path):
    bad = json.loads(json.dumps(BASE_CONFIG))
    bad["dataset"]["files"] = {"data": "x", "schema": "y"}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(bad))
    assert main(["train", "--config", str(path), "--no-figures"]) == 2


def test_train_from_files_dataset(tmp_path):
    gen_config = write_config(tmp_path)
    data_dir = tmp_path / "dataset"
    assert main(["generate", "--config", str(gen_config), "--out", str(data_dir)]) == 0
    files_config = write_config(
        tmp_path,
        dataset={"files": {"data": str(data_dir / "data.csv"),
                           "schema": str(data_dir / "schema.csv")}},
        output_dir=str(tmp_path / "out"))
    # overwrite: write_config merged "files" next to "synthetic"; rebuild cleanly
    raw = json.loads(files_config.read_text())
    raw["dataset"] = {"files": {"data": str(data_dir / "data.csv"),
                                "schema": str(data_dir / "schema.csv")}}
    files_config.write_text(json.dumps(raw))
    assert main(["train", "--config", str(files_config), "--no-figures"]) == 0


# ---------------------------------------------------------------------------
# zero-shot

def zero_shot_config(tmp_path):
    twin = {
        "n": 150, "num_numerical": 3, "num_treatments": 3, "noise_std": 0.2,
        "propensity_sharpness": 0.0, "seed": 53,
        "linear_coefficients": [[0.5, 0.0, 0.2], [0.1, 0.4, -0.2], [0.1, 0.4, -0.2]],
        "interaction_terms": [[0, 1, 0.0], [0, 1, 0.0], [0, 1, 0.0]],
        "intercepts": [0.0, 0.6, 0.6],
    }
    descriptions = tmp_path / "descriptions.csv"
    rows = ["0,1.0,0.0,0.0", "1,0.0,1.0,0.0", "2,0.0,1.0,0.0"]  # arm 2 twins arm 1
    descriptions.write_text("\n".join(rows) + "\n")
    config = write_config(tmp_path, dataset={"synthetic": twin},
                          model={"description_dim": 3},
                          output_dir=str(tmp_path / "zs"),
                          federation={"rounds": 2, "patience": 5})
    return config, descriptions


def test_zero_shot_report_columns(tmp_path):
    config, descriptions = zero_shot_config(tmp_path)
    assert main(["zero-shot", "--config", str(config), "--held-out", "2",
                 "--descriptions", str(descriptions), "--no-figures"]) == 0
    report = read_csv(tmp_path / "zs" / "zero_shot.csv")
    assert report[0] == ["held_out", "supervised", "zero_shot", "delta"]
    assert len(report) == 2
    assert report[1][0] == "2"
    by_seed = read_csv(tmp_path / "zs" / "zero_shot_by_seed.csv")
    assert len(by_seed) == 2  # header + one seed


def test_zero_shot_deterministic(tmp_path):
    config, descriptions = zero_shot_config(tmp_path)
    args = ["zero-shot", "--config", str(config), "--held-out", "2",
            "--descriptions", str(descriptions), "--no-figures"]
    assert main(args) == 0
    first = (tmp_path / "zs" / "zero_shot.csv").read_bytes()
    assert main(args) == 0
    assert (tmp_path / "zs" / "zero_shot.csv").read_bytes() == first


def test_zero_shot_needs_descriptions(tmp_path):
    config, _ = zero_shot_config(tmp_path)
    assert main(["zero-shot", "--config", str(config), "--held-out", "2",
                 "--no-figures"]) == 2


# ---------------------------------------------------------------------------
# export-attention

def exported_run(tmp_path, self_heads=2, cross_heads=2, layers=1):
    gen_config = write_config(tmp_path)
    data_dir = tmp_path / "dataset"
    assert main(["generate", "--config", str(gen_config), "--out", str(data_dir)]) == 0
    train_config = write_config(
        tmp_path, model={"embed_width": 8, "encoder_layers": layers,
                         "self_heads": self_heads, "cross_heads": cross_heads,
                         "predictor_hidden": 8},
        output_dir=str(tmp_path / "out"))
    assert main(["train", "--config", str(train_config), "--no-figures"]) == 0
    return (tmp_path / "out" / "seed_0" / "checkpoint.ckpt",
            data_dir / "data.csv", data_dir / "schema.csv")


def test_export_attention_file_contract(tmp_path):
    checkpoint, data, schema = exported_run(tmp_path)
    out = tmp_path / "attention"
    assert main(["export-attention", "--checkpoint", str(checkpoint),
                 "--data", str(data), "--schema", str(schema),
                 "--out", str(out), "--no-figures"]) == 0
    self_files = sorted(out.glob("self_*.csv"))
    cross_files = sorted(out.glob("cross_*.csv"))
    assert len(self_files) == 1 * 2            # layers x self heads
    assert len(cross_files) == 2 * 2           # cross heads x treatments present
    labels = ["", "[CLS]", "num_0", "num_1", "num_2", "cat_0"]
    for path in self_files:
        rows = read_csv(path)
        assert rows[0] == labels
        assert [r[0] for r in rows[1:]] == labels[1:]
        for row in rows[1:]:
            assert abs(sum(float(v) for v in row[1:]) - 1.0) < 1e-6
    for path in cross_files:
        rows = read_csv(path)
        assert rows[0] == labels
        assert rows[1][0] == "treatment"
        assert abs(sum(float(v) for v in rows[1][1:]) - 1.0) < 1e-6


def test_export_attention_renders_figures(tmp_path):
    checkpoint, data, schema = exported_run(tmp_path)
    out = tmp_path / "attention"
    assert main(["export-attention", "--checkpoint", str(checkpoint),
                 "--data", str(data), "--schema", str(schema),
                 "--out", str(out)]) == 0
    figures = list((out / "figures").glob("*.png"))
    assert len(figures) == len(list(out.glob("*.csv")))


def test_export_attention_rejects_schema_mismatch(tmp_path, capsys):
    checkpoint, data, schema = exported_run(tmp_path)
    other = tmp_path / "other_schema.csv"
    other.write_text(schema.read_text().replace("num_1", "num_x"))
    data_text = data.read_text().replace("num_1", "num_x")
    other_data = tmp_path / "other_data.csv"
    other_data.write_text(data_text)
    code = main(["export-attention", "--checkpoint", str(checkpoint),
                 "--data", str(other_data), "--schema", str(other),
                 "--out", str(tmp_path / "x"), "--no-figures"])
    assert code == 2
    assert "num_x" in capsys.readouterr().err
