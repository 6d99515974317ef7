import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adamatch import selftest
from adamatch import train as TR
from adamatch.algorithms import Variant
from adamatch.data import SSDA, UDA
from adamatch.nn import build_desknet


# ---------------------------------------------------------------- config

def test_train_config_validation():
    with pytest.raises(ValueError):
        TR.TrainConfig(algo="MixMatch")
    with pytest.raises(ValueError):
        TR.TrainConfig(total_images=0)
    with pytest.raises(ValueError):
        TR.TrainConfig(total_images=100, checkpoint_every=50, eval_last_k=3)
    assert TR.TrainConfig(total_images=100, n_sl=64, checkpoint_every=10).total_steps == 2


def test_algo_name():
    assert TR.algo_name("AdaMatch") == ("AdaMatch", None)
    assert TR.algo_name("AdaMatch:NoDistAlign") == ("AdaMatch", Variant.NO_DIST_ALIGN)
    with pytest.raises(ValueError):
        TR.algo_name("BaselineBN:Full")
    with pytest.raises(ValueError):
        TR.algo_name("AdaMatch:Nope")


def test_fingerprint_tracks_config():
    a, b = TR.TrainConfig(), TR.TrainConfig()
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != TR.TrainConfig(seed=1).fingerprint()
    json.dumps(a.to_dict())


# ---------------------------------------------------------------- evaluation

def test_evaluate_is_pure(toy_task):
    task = toy_task()
    m = build_desknet(28, 1, 3, 4, seed=0)
    before = {k: v.copy() for k, v in m.state_arrays().items()}
    acc = [TR.evaluate(m, task.target_test, batch_size=b) for b in (7, 512, 7)]
    assert acc[0] == acc[1] == acc[2] and 0 <= acc[0] <= 1
    for k, v in m.state_arrays().items():
        assert np.array_equal(v, before[k])
    with pytest.raises(ValueError):
        TR.evaluate(m, task.target_test.subset(np.array([], dtype=int)))


def test_evaluate_counts_correct(toy_dataset):
    ds = toy_dataset(12)
    m = build_desknet(28, 1, 3, 4, seed=0)
    m.params["fc.w"].data[:] = 0
    m.params["fc.b"].data[:] = np.array([0.0, 1.0, 0.0], dtype=np.float32)
    assert TR.evaluate(m, ds) == pytest.approx(1 / 3)


def test_median_examples():
    assert TR.median_last_k(range(1, 11), 10) == 5.5
    assert TR.median_last_k([0.0] * 5 + [0.8, 0.7, 0.9], 3) == 0.8
    with pytest.raises(ValueError):
        TR.median_last_k([0.5] * 9, 10)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=10, max_size=30), st.lists(st.floats(0, 1), max_size=10))
def test_median_ignores_older_values(tail, junk):
    assert TR.median_last_k(junk + tail[-10:], 10) == TR.median_last_k(tail, 10)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    arrs = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.float32(2.5) * np.ones(()),
            "c/ü": np.array([1e-30, -0.0, 3.4e38], dtype=np.float32)}
    p = tmp_path / "x.admk"
    TR.save_checkpoint(p, arrs)
    raw = p.read_bytes()
    assert raw[:4] == b"ADMK" and struct.unpack_from("<II", raw, 4) == (1, 3)
    back = TR.load_checkpoint(p)
    assert set(back) == set(arrs)
    for k in arrs:
        assert back[k].dtype == np.float32 and np.array_equal(back[k], arrs[k])
    TR.save_checkpoint(tmp_path / "y.admk", back)
    assert (tmp_path / "y.admk").read_bytes() == raw


def test_checkpoint_rejects_bad_header(tmp_path):
    p = tmp_path / "x.admk"
    p.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError, match="not an ADMK"):
        TR.load_checkpoint(p)
    p.write_bytes(b"ADMK" + struct.pack("<II", 9, 0))
    with pytest.raises(ValueError, match="version"):
        TR.load_checkpoint(p)


# ---------------------------------------------------------------- runs

@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    cfg = selftest.toy_config()
    root = tmp_path_factory.mktemp("runs")
    a = TR.train(selftest.toy_task(), cfg, root / "a")
    b = TR.train(selftest.toy_task(), cfg, root / "b")
    c = selftest._interrupted_run(cfg, root / "c")
    return cfg, root, a, b, c


def test_training_is_deterministic(toy_runs):
    cfg, root, a, b, _ = toy_runs
    assert a.checkpoints == b.checkpoints and a.final_accuracy == b.final_accuracy
    assert (root / "a" / "final.admk").read_bytes() == (root / "b" / "final.admk").read_bytes()
    assert len(a.history) == cfg.total_images // cfg.checkpoint_every
    assert a.final_accuracy == TR.median_last_k(a.history, cfg.eval_last_k)


def test_resume_is_bitwise(toy_runs):
    _, root, a, _, c = toy_runs
    assert c.checkpoints == a.checkpoints and c.history == a.history
    assert (root / "c" / "final.admk").read_bytes() == (root / "a" / "final.admk").read_bytes()


def test_resume_rejects_other_config(toy_runs):
    _, root, *_ = toy_runs
    with pytest.raises(ValueError, match="different configuration"):
        TR.train(selftest.toy_task(), selftest.toy_config(seed=5), root / "a", resume=True)


def test_run_record_round_trip(toy_runs):
    a = toy_runs[2]
    assert TR.RunRecord.from_dict(json.loads(json.dumps(a.to_dict()))) == a


def test_train_shape_and_kind_errors(toy_task):
    with pytest.raises(ValueError, match="28x28|32x32"):
        TR.train(toy_task(), selftest.toy_config(input_side=32))


@pytest.mark.parametrize("algo", ["FixMatchPlus", "BaselineBN", "SupervisedOracle", "AdaMatch:NoRelThreshold"])
def test_every_algorithm_trains(algo, toy_task):
    rec = TR.train(toy_task(), selftest.toy_config(algo=algo, total_images=64, eval_last_k=2))
    assert 0 <= rec.final_accuracy <= 1


def test_ssda_run(toy_task):
    rec = TR.train(toy_task(SSDA, n_labels=1), selftest.toy_config(total_images=64, eval_last_k=2))
    assert len(rec.history) == 4


def test_progress_called_per_checkpoint(toy_task):
    seen = []
    TR.train(toy_task(), selftest.toy_config(total_images=64, eval_last_k=2),
             progress=lambda *a: seen.append(a[2]))
    assert seen == [16, 32, 48, 64]


def test_step_rng_depends_on_seed_and_step():
    a = TR.step_rng(0, 3).random()
    assert a == TR.step_rng(0, 3).random()
    assert a != TR.step_rng(0, 4).random() and a != TR.step_rng(1, 3).random()


# ---------------------------------------------------------------- matrix

def test_matrix_cells_drop_uda_diagonal():
    pairs = [("a", "a"), ("a", "b"), ("b", "a")]
    assert TR.matrix_cells(pairs, UDA) == [("a", "b"), ("b", "a")]
    assert TR.matrix_cells(pairs, SSDA) == pairs


def test_run_matrix_records_failed_cell():
    def make_task(s, t, kind, seed):
        if t == "bad":
            raise RuntimeError("boom")
        return selftest.toy_task(kind, seed=seed)

    cfg = selftest.toy_config(total_images=32, eval_last_k=2)
    seen = []
    table = TR.run_matrix([("x", "y"), ("x", "bad"), ("y", "y")], UDA, cfg, make_task,
                          on_record=lambda s, t, r: seen.append((s, t)))
    assert [(r.source, r.target) for r in table.rows] == [("x", "y"), ("x", "bad")]
    assert table.rows[1].final_accuracy is None and table.rows[0].final_accuracy is not None
    assert seen == [("x", "y")]
    assert table.grand_average() == table.rows[0].final_accuracy


def _table():
    R = TR.ResultRow
    return TR.ResultsTable([R("a", "b", UDA, "AdaMatch", 0, 0.5), R("a", "b", UDA, "AdaMatch", 1, 0.7),
                            R("a", "b", UDA, "AdaMatch", 2, 0.9), R("b", "a", UDA, "AdaMatch", 0, 0.25),
                            R("b", "c", UDA, "AdaMatch", 0, None)])


def test_results_csv_round_trip():
    t = _table()
    text = t.to_csv()
    assert text.splitlines()[0] == "source,target,kind,algo,seed,final_accuracy"
    assert TR.ResultsTable.from_csv(text) == t
    with pytest.raises(ValueError):
        TR.ResultsTable.from_csv("a,b\n")


def test_grid_averages():
    sources, targets, cells, row_avg, col_avg, grand = _table().grid()
    assert cells == {("a", "b"): 0.7, ("b", "a"): 0.25}
    assert row_avg == {"a": 0.7, "b": 0.25} and col_avg == {"b": 0.7, "a": 0.25}
    assert grand == pytest.approx(0.475)
    lines = _table().grid_csv().splitlines()
    assert lines[0] == "source \\ target,b,a,c,Avg"
    assert lines[1] == "a,70.0,,,70.0" and lines[-1] == "Avg,70.0,25.0,,47.5"


def test_results_json():
    d = json.loads(_table().to_json())
    assert d["grid"] == {"a->b": 0.7, "b->a": 0.25}
    assert d["rows"][-1]["final_accuracy"] is None


def test_evaluate_matches_scalar_recount(toy_dataset):
    ds = toy_dataset(25)
    m = build_desknet(28, 1, 3, 4, seed=9)
    from adamatch.nn import BnMode, model_apply

    hits = 0
    for i in range(len(ds)):
        z = model_apply(m, ds.images[i:i + 1], BnMode.EVAL).data[0]
        hits += int(max(range(3), key=lambda j: (z[j], -j)) == ds.labels[i])
    assert TR.evaluate(m, ds, batch_size=4) == hits / len(ds)


def test_supervised_reaches_full_accuracy_on_separable_task():
    from adamatch.data import build_task

    src = selftest.toy_dataset(60, k=2, seed=0, name="src")
    task = build_task(src, selftest.toy_dataset(60, k=2, seed=1), UDA, None, 0,
                      target_test=selftest.toy_dataset(40, k=2, seed=2))
    # BN running stats (momentum 0.99) need a few hundred steps before eval mode agrees
    rec = TR.train(task, selftest.toy_config(algo="SupervisedOracle", total_images=2560, eval_last_k=2,
                                             checkpoint_every=64))
    assert rec.final_accuracy == 1.0


def test_ring_never_exceeds_margin(toy_task):
    cfg = selftest.toy_config(total_images=160, eval_last_k=2)
    rec = TR.train(toy_task(), cfg)
    assert len(rec.history) == 10 and len(rec.checkpoints) == cfg.eval_last_k + TR.RING_MARGIN
