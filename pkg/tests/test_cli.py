import json
from pathlib import Path

import pytest

from app.vision.harness.cli import main
from app.vision.metrics.metrics import tracks_from_ground_truth, write_results
from app.vision.synthdata.synthdata import read_dataset

SMALL_TOML = """\
seed = 0

[data]
image_size = 64

[model]
channels = 8
latent_dim = 16
edge_dim = 16
hidden_dim = 32
roi_size = 6
mask_size = 12

[optim]
iterations = 2
batch_size = 1
"""


@pytest.fixture
def dataset_dir(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"num_frames": 3, "height": 64, "width": 64, "num_objects": 2, "num_clips": 2}))
    out = tmp_path / "data"
    assert main(["gen-data", "--spec", str(spec), "--out", str(out)]) == 0
    return out


def test_gen_data_writes_dataset(dataset_dir):
    assert (dataset_dir / "annotations.json").is_file()
    assert len(read_dataset(dataset_dir)) == 2


def test_invalid_spec_exits_with_one(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"num_frames": 1}))
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "out")]) == 1
    assert "num_frames" in capsys.readouterr().err


def test_eval_scores_oracle_results(dataset_dir, tmp_path):
    dataset = read_dataset(dataset_dir)
    tracks = [t for clip_id in dataset.clip_ids for t in tracks_from_ground_truth(clip_id, dataset.ground_truth(clip_id))]
    results = write_results(tracks, tmp_path / "results.json")
    report = tmp_path / "report.json"
    assert main(["eval", "--results", str(results), "--data", str(dataset_dir), "--out", str(report)]) == 0
    assert json.loads(report.read_text())["AP"] == 1.0


def test_train_infer_and_viz(dataset_dir, tmp_path):
    config = tmp_path / "run.toml"
    config.write_text(SMALL_TOML)
    ckpt = tmp_path / "model.pt"
    assert main(["train", "--config", str(config), "--data", str(dataset_dir), "--out", str(ckpt), "--quiet"]) == 0
    assert ckpt.is_file()
    assert (tmp_path / "model.pt.loss.csv").is_file()

    results = tmp_path / "results.json"
    assert main(["infer", "--ckpt", str(ckpt), "--data", str(dataset_dir), "--out", str(results)]) == 0
    assert isinstance(json.loads(results.read_text()), list)

    viz = tmp_path / "viz"
    assert main(["viz", "--results", str(results), "--data", str(dataset_dir), "--out", str(viz)]) == 0
    assert (viz / "clip0000" / "legend.csv").is_file()


def test_missing_dataset_exits_with_one(tmp_path):
    assert main(["eval", "--results", str(tmp_path / "r.json"), "--data", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "report.json")]) == 1


def test_corrupt_checkpoint_exits_with_one(dataset_dir, tmp_path):
    ckpt = tmp_path / "bad.pt"
    ckpt.write_bytes(b"not a checkpoint")
    assert main(["infer", "--ckpt", str(ckpt), "--data", str(dataset_dir), "--out", str(tmp_path / "r.json")]) == 1


def test_only_the_cli_is_a_script():
    package = Path(__file__).resolve().parents[1] / "app"
    scripts = sorted(p.name for p in package.rglob("*.py") if p.read_text().startswith("#!"))
    assert scripts == ["cli.py"]
