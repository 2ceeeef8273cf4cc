import json

import numpy as np
import pytest

from mmpath.cli import main
from mmpath.fuse import parse_graph_dump
from mmpath.train import read_metrics, write_metrics
from mmpath.world import RoadNetwork, RoadPath, TileGrid, World, WorldConfig, save_world

FAST = ["--preset", "tiny", "--epochs", "2", "--d", "8", "--heads", "2", "--layers", "1",
        "--finetune_epochs", "2"]


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv("MMPATH_RUN_DIR", str(tmp_path))
    assert main(["gen", "--seed", "3", "--n_paths", "8", "--n_nodes", "40"]) == 0
    return tmp_path


def test_help_lists_commands(capsys):
    assert main(["help"]) == 0
    out = capsys.readouterr().out
    for cmd in ("gen", "pretrain", "finetune", "eval", "ablate", "graph-dump", "report", "help"):
        assert cmd in out


@pytest.mark.parametrize("argv", [["bogus"], ["gen", "--no-such-flag"], [], ["pretrain", "--epochs", "x"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_invalid_config_value_is_usage_error(root):
    assert main(["pretrain", "--lr", "-1"]) == 2


def test_pipeline_end_to_end(root):
    assert main(["pretrain", *FAST]) == 0
    assert main(["finetune", "--finetune_epochs", "2"]) == 0
    assert main(["eval"]) == 0
    run = root / "run"
    rows = read_metrics(run / "metrics.csv")
    assert len(rows) == 1 and rows[0]["task"] == "travel_time"
    assert (run / "metrics.csv").read_text().splitlines()[0] == "variant,task,mae,mare,mape,tau,rho,n_test"
    assert (run / "loss_log.csv").read_text().splitlines()[0] == "epoch,l_mask,l_fine,l_medium,l_coarse,l_fuse,total"
    assert json.loads((run / "vocab.json").read_text())
    assert main(["report", "--run", str(run)]) == 0
    assert "| full | travel_time |" in (run / "report.md").read_text()


def test_refuses_overwrite_without_force(root):
    assert main(["gen", "--seed", "3"]) == 1
    assert main(["pretrain", *FAST]) == 0
    before = (root / "run" / "loss_log.csv").read_bytes()
    assert main(["pretrain", *FAST]) == 1
    assert main(["pretrain", *FAST, "--force"]) == 0
    assert (root / "run" / "loss_log.csv").read_bytes() == before


def test_workers_do_not_change_artifacts(root):
    assert main(["pretrain", *FAST, "--out", str(root / "a")]) == 0
    assert main(["pretrain", *FAST, "--workers", "2", "--out", str(root / "b")]) == 0
    assert (root / "a" / "loss_log.csv").read_bytes() == (root / "b" / "loss_log.csv").read_bytes()
    assert (root / "a" / "pretrained.ckpt").read_bytes() != b""


def test_config_precedence(root, tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"epochs": 3, "lr": 0.005, "d": 8, "heads": 2, "layers": 1}))
    assert main(["pretrain", "--config", str(cfg_file), "--epochs", "1"]) == 0
    resolved = json.loads((root / "run" / "config.resolved.json").read_text())["pretrain"]["config"]
    assert resolved["epochs"] == 1  # flag beats file
    assert resolved["lr"] == 0.005  # file beats default
    assert resolved["mask_ratio"] == 0.15  # defaults are recorded too
    assert len((root / "run" / "loss_log.csv").read_text().splitlines()) == 2


def test_missing_config_file(root):
    assert main(["pretrain", "--config", "/nonexistent.json"]) == 2


def test_finetune_without_pretrain(root):
    assert main(["finetune"]) == 1


def test_ablate(root):
    argv = ["ablate", *FAST, "--epochs", "1", "--variants", "full,no_gcn,y_only"]
    assert main(argv) == 0
    rows = read_metrics(root / "ablation" / "metrics.csv")
    assert [r["variant"] for r in rows] == ["full", "no_gcn", "y_only"]
    assert main(["ablate", "--variants", "sideways"]) == 2
    cfg = json.loads((root / "ablation" / "config.resolved.json").read_text())["ablate"]
    assert cfg["effective"]["full"]["lambda_multi"] == 1.0


def test_graph_dump_round_trip(root):
    out = root / "g.json"
    assert main(["graph-dump", "--path-id", "0", "--out", str(out)]) == 0
    first = out.read_bytes()
    assert main(["graph-dump", "--path-id", "0", "--out", str(out), "--force"]) == 0
    assert out.read_bytes() == first
    A, diag = parse_graph_dump(json.loads(first))
    assert A.shape[0] == len(diag) and not A.diagonal().any()
    assert main(["graph-dump", "--path-id", "4242"]) == 1


def test_graph_dump_five_in_edges(tmp_path, monkeypatch):
    monkeypatch.setenv("MMPATH_RUN_DIR", str(tmp_path))
    grid = TileGrid(cols=1, rows=1, r=32, meters_per_pixel=31.25)  # 8 px patches -> 4x4 lattice
    centre = {k: (125.0 + 250 * ((k - 1) % 4), 125.0 + 250 * ((k - 1) // 4)) for k in range(1, 17)}
    nodes = {1: centre[16], 2: centre[1], 3: centre[6], 4: centre[11], 5: centre[13]}
    world = World(WorldConfig(cols=1, rows=1), 0, RoadNetwork(nodes, ((1, 2), (2, 3), (3, 4), (4, 5))), grid,
                  {(0, 0): np.zeros((32, 32, 3), np.uint8)}, (RoadPath(0, (1, 2, 3, 4, 5)),))
    save_world(world, tmp_path / "world")
    assert main(["graph-dump", "--path-id", "0", "--patch-side", "8", "--out", str(tmp_path / "g.json")]) == 0
    dump = json.loads((tmp_path / "g.json").read_text())
    into_v3 = [s for s, d in dump["edges"] if d == 3]
    assert len(into_v3) == 5


def test_report_cases(tmp_path, monkeypatch):
    run = tmp_path / "r"
    run.mkdir()
    assert main(["report", "--run", str(run)]) == 1
    (run / "loss_log.csv").write_text("epoch,l_mask,l_fine,l_medium,l_coarse,l_fuse,total\n"
                                      "1,2.0,1.0,0.5,0.7,0.2,4.4\n2,1.0,0.5,0.2,0.3,0.1,2.1\n")
    write_metrics([], run / "metrics.csv")
    assert main(["report", "--run", str(run)]) == 0
    assert "No results" in (run / "report.md").read_text()
    md, png = (run / "report.md").read_bytes(), (run / "loss_curve.png").read_bytes()
    assert main(["report", "--run", str(run)]) == 1  # refuses to overwrite
    assert main(["report", "--run", str(run), "--force"]) == 0
    assert (run / "report.md").read_bytes() == md
    assert (run / "loss_curve.png").read_bytes() == png
