import csv

import numpy as np
import pytest

from guidedmae import fileio
from guidedmae.attention import TemperatureSchedule, temperature_at
from guidedmae.cli import main
from guidedmae.model import ModelConfig, init_params, load_checkpoint
from guidedmae.plotting import read_series

MODEL_FLAGS = [
    "--embed-dim", "32", "--decoder-dim", "16", "--heads", "2",
    "--enc-blocks", "1", "--dec-blocks", "1", "--mlp-ratio", "2.0",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full gen-data -> gen-maps -> train pipeline, shared by eval tests."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    maps = root / "maps"
    run = root / "run"
    assert main(["gen-data", "--out", str(data), "--classes", "3", "--per-class", "8",
                 "--image-size", "32", "--patch-size", "4", "--seed", "3"]) == 0
    assert main(["gen-maps", "--data", str(data), "--out", str(maps),
                 "--method", "oracle", "--seed", "3"]) == 0
    assert main(["train", "--data", str(data), "--maps", str(maps), "--out", str(run),
                 "--guidance", "attg", "--epochs", "4", "--batch-size", "8",
                 "--seed", "3", *MODEL_FLAGS]) == 0
    return {"data": data, "maps": maps, "run": run}


def _read_metrics(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_gen_data_outputs_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["--classes", "2", "--per-class", "5", "--image-size", "32",
            "--patch-size", "4", "--seed", "7"]
    assert main(["gen-data", "--out", str(a), *args]) == 0
    assert (a / "index.csv").exists()
    assert (a / "gen-data.cfg").exists()
    assert main(["gen-data", "--out", str(b), *args]) == 0
    skip = {"gen-data.cfg"}  # records the differing --out path
    digest_a = {p.name: fileio.file_digest(p) for p in a.rglob("*") if p.is_file() and p.name not in skip}
    digest_b = {p.name: fileio.file_digest(p) for p in b.rglob("*") if p.is_file() and p.name not in skip}
    assert digest_a == digest_b


def test_gen_data_rejects_single_class(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--classes", "1"]) == 2


def test_gen_maps_oracle_files(pipeline):
    ids = [row["id"] for row in csv.DictReader(open(pipeline["data"] / "index.csv"))]
    for image_id in ids:
        map_ = fileio.read_atmp(pipeline["maps"] / f"{image_id}.atmp")
        assert map_.state == "normalized"
        assert map_.values.shape == (8, 8)


def test_gen_maps_tokencut(tmp_path, pipeline):
    out = tmp_path / "tc_maps"
    assert main(["gen-maps", "--data", str(pipeline["data"]), "--out", str(out),
                 "--method", "tokencut"]) == 0
    ids = [row["id"] for row in csv.DictReader(open(pipeline["data"] / "index.csv"))]
    assert all((out / f"{i}.atmp").exists() for i in ids)


def test_gen_maps_pooled(tmp_path, pipeline):
    heat = tmp_path / "heat"
    heat.mkdir()
    ids = [row["id"] for row in csv.DictReader(open(pipeline["data"] / "index.csv"))]
    rng = np.random.default_rng(0)
    for image_id in ids:
        fileio.write_pgm(heat / f"{image_id}.pgm", rng.integers(0, 256, (32, 32), dtype=np.uint8))
    out = tmp_path / "pooled_maps"
    assert main(["gen-maps", "--data", str(pipeline["data"]), "--out", str(out),
                 "--method", "pooled", "--heatmaps", str(heat)]) == 0
    map_ = fileio.read_atmp(out / f"{ids[0]}.atmp")
    assert map_.values.shape == (8, 8)


def test_gen_maps_ingest_and_malformed(tmp_path, pipeline):
    src = tmp_path / "src"
    src.mkdir()
    ids = [row["id"] for row in csv.DictReader(open(pipeline["data"] / "index.csv"))]
    for image_id in ids:
        raw = fileio.read_atmp(pipeline["maps"] / f"{image_id}.atmp")
        fileio.write_atmp(src / f"{image_id}.atmp", raw)
    out = tmp_path / "ingested"
    assert main(["gen-maps", "--data", str(pipeline["data"]), "--out", str(out),
                 "--method", "ingest", "--src", str(src)]) == 0
    # malformed magic -> exit 2
    (src / f"{ids[0]}.atmp").write_bytes(b"JUNKJUNKJUNK")
    assert main(["gen-maps", "--data", str(pipeline["data"]), "--out", str(tmp_path / "o2"),
                 "--method", "ingest", "--src", str(src)]) == 2


def test_gen_maps_requires_inputs(pipeline, tmp_path):
    assert main(["gen-maps", "--data", str(pipeline["data"]), "--out", str(tmp_path / "x"),
                 "--method", "ingest"]) == 2
    assert main(["gen-maps", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "y"),
                 "--method", "oracle"]) == 2


def test_train_outputs(pipeline):
    run = pipeline["run"]
    assert (run / "checkpoint.amck").exists()
    assert (run / "train.cfg").exists()
    rows = _read_metrics(run / "loss.csv")
    assert [c for c in rows[0]] == ["epoch", "step", "tau", "mode", "loss"]
    assert all(row["mode"] == "attg" for row in rows)


def test_train_epochs_zero_equals_init(tmp_path, pipeline):
    out = tmp_path / "zero"
    assert main(["train", "--data", str(pipeline["data"]), "--maps", str(pipeline["maps"]),
                 "--out", str(out), "--guidance", "attg", "--epochs", "0",
                 "--seed", "5", *MODEL_FLAGS]) == 0
    params = load_checkpoint(out / "checkpoint.amck")
    expected = init_params(ModelConfig(image_size=32, patch_size=4, embed_dim=32,
                                       decoder_dim=16, heads=2, encoder_blocks=1,
                                       decoder_blocks=1, mlp_ratio=2.0, seed=5))
    assert all(np.array_equal(params.arrays[k], expected.arrays[k].astype(np.float32))
               for k in expected.arrays)


def test_train_deterministic_checkpoints(tmp_path, pipeline):
    args = ["--data", str(pipeline["data"]), "--maps", str(pipeline["maps"]),
            "--guidance", "attg", "--epochs", "2", "--batch-size", "8",
            "--seed", "9", *MODEL_FLAGS]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--out", str(a), *args]) == 0
    assert main(["train", "--out", str(b), *args]) == 0
    assert (a / "checkpoint.amck").read_bytes() == (b / "checkpoint.amck").read_bytes()
    assert (a / "loss.csv").read_text() == (b / "loss.csv").read_text()


def test_train_schedule_endpoints_logged(tmp_path, pipeline):
    out = tmp_path / "sched"
    assert main(["train", "--data", str(pipeline["data"]), "--maps", str(pipeline["maps"]),
                 "--out", str(out), "--guidance", "attg", "--schedule", "cosine",
                 "--tau-start", "0.75", "--tau-end", "1.0", "--epochs", "3",
                 "--batch-size", "24", "--seed", "1", *MODEL_FLAGS]) == 0
    rows = _read_metrics(out / "loss.csv")
    by_epoch = {int(r["epoch"]): float(r["tau"]) for r in rows}
    assert by_epoch[0] == 0.75
    assert by_epoch[2] == 1.0


def test_train_vanilla_ignores_tau_flags(tmp_path, pipeline):
    base = ["--data", str(pipeline["data"]), "--guidance", "vanilla", "--epochs", "2",
            "--batch-size", "24", "--seed", "4", *MODEL_FLAGS]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--out", str(a), *base]) == 0
    assert main(["train", "--out", str(b), *base,
                 "--tau-start", "0.3", "--tau-end", "2.0", "--schedule", "cosine"]) == 0
    assert (a / "checkpoint.amck").read_bytes() == (b / "checkpoint.amck").read_bytes()
    taus = {r["tau"] for r in _read_metrics(b / "loss.csv")}
    assert len(taus) == 1  # constant logged temperature


def test_train_missing_maps_is_usage_error(tmp_path, pipeline):
    assert main(["train", "--data", str(pipeline["data"]), "--out", str(tmp_path / "x"),
                 "--guidance", "attg", "--epochs", "1", *MODEL_FLAGS]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nonfinite_exit_code(tmp_path, pipeline):
    assert main(["train", "--data", str(pipeline["data"]), "--maps", str(pipeline["maps"]),
                 "--out", str(tmp_path / "x"), "--guidance", "attg", "--epochs", "40",
                 "--batch-size", "24", "--lr", "1e12", "--seed", "0", *MODEL_FLAGS]) == 3


def test_config_replay_reproduces_run(tmp_path, pipeline):
    out = tmp_path / "replay"
    assert main(["train", "--config", str(pipeline["run"] / "train.cfg"),
                 "--out", str(out)]) == 0
    assert (out / "checkpoint.amck").read_bytes() == (
        pipeline["run"] / "checkpoint.amck"
    ).read_bytes()


def test_config_unknown_key_rejected(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus=1\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2


def test_eval_knn_self_match(tmp_path, pipeline):
    out = tmp_path / "eval"
    assert main(["eval", "knn", "--checkpoint", str(pipeline["run"] / "checkpoint.amck"),
                 "--data", str(pipeline["data"]), "--out", str(out),
                 "--k", "1", "--query-split", "train"]) == 0
    rows = _read_metrics(out / "metrics.csv")
    assert rows[0]["metric"] == "knn_acc"
    assert rows[0]["split"] == "train"
    assert rows[0]["k"] == "1"
    assert float(rows[0]["value"]) == 1.0
    assert (out / "train.embd").exists() and (out / "val.embd").exists()


def test_eval_linear_and_fewshot_rows(tmp_path, pipeline):
    out = tmp_path / "eval2"
    common = ["--checkpoint", str(pipeline["run"] / "checkpoint.amck"),
              "--data", str(pipeline["data"]), "--out", str(out)]
    assert main(["eval", "linear", *common, "--probe-epochs", "20"]) == 0
    assert main(["eval", "fewshot", *common, "--n", "1,2,4", "--k", "1"]) == 0
    rows = _read_metrics(out / "metrics.csv")
    metrics = [r["metric"] for r in rows]
    assert metrics == ["linear_acc", "fewshot_knn_n1", "fewshot_knn_n2", "fewshot_knn_n4"]
    assert all(0.0 <= float(r["value"]) <= 1.0 for r in rows)


def test_eval_retrieval_and_robustness_rows(tmp_path, pipeline):
    out = tmp_path / "eval3"
    common = ["--checkpoint", str(pipeline["run"] / "checkpoint.amck"),
              "--data", str(pipeline["data"]), "--out", str(out)]
    assert main(["eval", "retrieval", *common]) == 0
    assert main(["eval", "robustness", *common, "--probe-epochs", "20"]) == 0
    rows = _read_metrics(out / "metrics.csv")
    retrieval = [r for r in rows if r["metric"] == "retrieval_map"]
    assert [r["split"] for r in retrieval] == ["medium", "hard"]
    robustness = [r for r in rows if r["metric"] == "robustness_acc"]
    assert [r["split"] for r in robustness] == ["OF", "MS", "MR", "MN"]


def test_eval_geometry_mismatch(tmp_path, pipeline):
    other = tmp_path / "other_data"
    assert main(["gen-data", "--out", str(other), "--classes", "2", "--per-class", "4",
                 "--image-size", "64", "--patch-size", "8", "--seed", "0"]) == 0
    assert main(["eval", "knn", "--checkpoint", str(pipeline["run"] / "checkpoint.amck"),
                 "--data", str(other), "--out", str(tmp_path / "x")]) == 2


def test_plot_outputs_and_tau_recomputation(tmp_path, pipeline):
    out = tmp_path / "plots"
    assert main(["plot", "--loss-csv", str(pipeline["run"] / "loss.csv"),
                 "--out", str(out)]) == 0
    svg = (out / "loss.svg").read_text()
    assert svg.startswith("<svg")
    series = read_series(out / "tau.svg")
    schedule = TemperatureSchedule("half_cosine", 0.75, 1.0, 3)
    expected = [temperature_at(schedule, e) for e in range(4)]
    got = [y for _, y in series["tau"]]
    assert np.allclose(got, expected, atol=1e-9)


def test_plot_single_row_chart(tmp_path):
    loss_csv = tmp_path / "loss.csv"
    loss_csv.write_text("epoch,step,tau,mode,loss\n0,0,0.75,attg,1.25\n")
    out = tmp_path / "plots"
    assert main(["plot", "--loss-csv", str(loss_csv), "--out", str(out)]) == 0
    assert (out / "loss.svg").read_text().startswith("<svg")


def test_plot_missing_file_exit_2(tmp_path):
    assert main(["plot", "--loss-csv", str(tmp_path / "none.csv"),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["plot", "--out", str(tmp_path / "o2")]) == 2


def test_plot_fewshot_chart(tmp_path, pipeline):
    metrics = tmp_path / "metrics.csv"
    metrics.write_text(
        "metric,split,k,value\nfewshot_knn_n1,val,5,0.2\nfewshot_knn_n5,val,5,0.5\n"
    )
    out = tmp_path / "plots"
    assert main(["plot", "--metrics-csv", str(metrics), "--out", str(out)]) == 0
    series = read_series(out / "fewshot.svg")
    assert series["knn_acc"] == [(1.0, 0.2), (5.0, 0.5)]


def test_train_periodic_checkpoints(tmp_path, pipeline):
    out = tmp_path / "periodic"
    assert main(["train", "--data", str(pipeline["data"]), "--maps", str(pipeline["maps"]),
                 "--out", str(out), "--guidance", "attg", "--epochs", "4",
                 "--batch-size", "24", "--checkpoint-every", "2", "--seed", "0",
                 *MODEL_FLAGS]) == 0
    assert (out / "checkpoint_epoch0001.amck").exists()
    assert (out / "checkpoint_epoch0003.amck").exists()
    assert (out / "checkpoint.amck").exists()


def test_gen_data_respects_thread_cap(tmp_path, monkeypatch):
    args = ["--classes", "2", "--per-class", "4", "--image-size", "32",
            "--patch-size", "4", "--seed", "2"]
    monkeypatch.setenv("ATTG_THREADS", "1")
    assert main(["gen-data", "--out", str(tmp_path / "capped"), *args]) == 0
    monkeypatch.delenv("ATTG_THREADS")
    assert main(["gen-data", "--out", str(tmp_path / "free"), *args]) == 0
    a = {p.name: fileio.file_digest(p) for p in (tmp_path / "capped").rglob("*")
         if p.is_file() and p.suffix != ".cfg"}
    b = {p.name: fileio.file_digest(p) for p in (tmp_path / "free").rglob("*")
         if p.is_file() and p.suffix != ".cfg"}
    assert a == b


def test_usage_errors():
    assert main(["train"]) == 2  # missing --data/--out
    assert main(["nonsense"]) == 2
