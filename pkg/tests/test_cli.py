import json

import pytest

from adamatch import cli
from adamatch.train import ResultsTable

TINY = ["--set", "train.total_images=256", "--set", "train.n_sl=8", "--set", "train.checkpoint_every=64",
        "--set", "train.eval_last_k=2", "--set", "model.width=4"]


def _main(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def first_run(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("cli")
    code = _main("train", *TINY, "--data-dir", data_dir, "--out-dir", out, "--run-id", "a")
    return code, out / "a", data_dir


def test_train_writes_outputs(first_run, capsys):
    code, run, _ = first_run
    assert code == 0
    for name in ("resolved.cfg", "results.csv", "results.json", "checkpoints/final.admk"):
        assert (run / name).exists(), name
    table = ResultsTable.from_csv((run / "results.csv").read_text())
    assert len(table.rows) == 1 and table.rows[0].algo == "AdaMatch"
    assert len(json.loads((run / "results.json").read_text())["run"]["history"]) == 4


def test_rerun_from_resolved_config_is_bitwise(first_run, tmp_path):
    _, run, data_dir = first_run
    assert _main("train", "--config", run / "resolved.cfg", "--data-dir", data_dir,
                 "--out-dir", tmp_path, "--run-id", "b") == 0
    again = tmp_path / "b"
    assert (again / "resolved.cfg").read_text() == (run / "resolved.cfg").read_text()
    assert (again / "results.csv").read_bytes() == (run / "results.csv").read_bytes()
    assert (again / "checkpoints/final.admk").read_bytes() == (run / "checkpoints/final.admk").read_bytes()


def test_resume_completed_run(first_run, tmp_path):
    _, run, data_dir = first_run
    assert _main("train", "--config", run / "resolved.cfg", "--data-dir", data_dir,
                 "--out-dir", run.parent, "--run-id", "a", "--resume") == 0
    assert (run / "results.csv").read_text().count("\n") == 2


def test_default_run_id_is_config_hash(tmp_path, data_dir):
    _main("train", *TINY, "--data-dir", data_dir, "--out-dir", tmp_path)
    (only,) = tmp_path.iterdir()
    assert only.name.startswith("train-") and len(only.name) == len("train-") + 10


def test_exit_codes(tmp_path, capsys):
    assert _main("train", "--set", "adamatch.tau=1.5", "--out-dir", tmp_path) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert _main("train", *TINY, "--data-dir", tmp_path / "empty", "--out-dir", tmp_path) == cli.EXIT_DATA
    err = capsys.readouterr().err
    assert "data error" in err and "train-images-idx3-ubyte" in err
    assert _main("matrix", "--set", "task.pairs=mnist5k:digits", "--out-dir", tmp_path) == cli.EXIT_CONFIG


def test_parser_rejects_unknown_command():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["fly"])


def test_ablate_table_and_full_matches_train(tmp_path, data_dir, capsys):
    args = [*TINY, "--set", "ablate.seeds=1", "--data-dir", data_dir, "--out-dir", tmp_path]
    assert _main("ablate", *args, "--run-id", "abl") == 0
    lines = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    assert lines[0] == "variant,seed_0,median"
    assert [line.split(",")[0] for line in lines[1:]] == list(cli.VARIANTS)
    full = float(lines[1].split(",")[1])
    assert _main("train", *args, "--run-id", "tr") == 0
    table = ResultsTable.from_csv((tmp_path / "tr" / "results.csv").read_text())
    assert table.rows[0].final_accuracy == full


def test_ablation_table_medians():
    text = cli.ablation_table({("Full", 0): 0.5, ("Full", 1): 0.7, ("NoDistAlign", 0): None,
                               ("NoDistAlign", 1): 0.4}, [0, 1])
    lines = text.splitlines()
    assert lines[1] == "Full,0.5,0.7,0.6" and lines[3] == "NoDistAlign,,0.4,0.4"
    assert lines[2] == "NoLogitInterp,,,"


def test_matrix_writes_grid(tmp_path, data_dir, capsys):
    code = _main("matrix", *TINY, "--set", "task.pairs=mnist5k->digits,digits->digits",
                 "--data-dir", data_dir, "--out-dir", tmp_path, "--run-id", "m")
    assert code == 0
    grid = (tmp_path / "m" / "grid.csv").read_text().splitlines()
    assert grid[0] == "source \\ target,digits,Avg"
    assert len(ResultsTable.from_csv((tmp_path / "m" / "results.csv").read_text()).rows) == 1


def test_selftest_passes_and_mutation_fails(capsys):
    assert _main("selftest", "--select", "softmax") == 0
    out = capsys.readouterr().out.splitlines()
    assert json.loads(out[-1])["summary"]["failed"] == []
    assert _main("selftest", "--select", "softmax", "--mutate", "softmax") == cli.EXIT_CHECKS
    summary = json.loads(capsys.readouterr().out.splitlines()[-1])["summary"]
    assert summary["failed"] == ["nn.softmax_rows_sum_to_one"]
    # the mutation is undone afterwards
    assert _main("selftest", "--select", "softmax") == 0


def test_oracle_check_small(capsys):
    assert _main("oracle-check", "--seeds", "2") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["gradcheck_float64"]["passed"] and report["gradcheck_float32"]["passed"]


def test_prepare_data(tmp_path, capsys):
    pytest.importorskip("sklearn")
    pytest.importorskip("mlxtend")
    assert _main("prepare-data", "--data-dir", tmp_path) == 0
    assert len(capsys.readouterr().out.split()) == 6
