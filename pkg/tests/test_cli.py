import csv
import json

import numpy as np
import pytest

from nonfat import checkpoint as ckpt
from nonfat import model as M
from nonfat.cli import UsageError, load_run_config, main
from nonfat.config import TrainConfig
from nonfat.data import GroundTruth, load_csv
from nonfat.quadrature import gauss_laguerre

TINY = dict(R=2, C=3, s=2, a_k=3, a_g=4, batch_size=16, learning_rate=1e-2, epochs=3,
            num_pred_samples=4)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--dims", "3,4", "--num-obs", "80", "--seed", "1",
                 "--out", str(root / "data.csv")]) == 0
    cfg = dict(TINY, data="data.csv", num_modes=2, out_dir="out")
    (root / "run.json").write_text(json.dumps(cfg))
    assert main(["train", str(root / "run.json")]) == 0
    return root


def test_train_outputs(run, capsys):
    hist = read_rows(run / "out" / "history.csv")
    assert hist[0] == ["epoch", "elbo", "train_rmse", "test_rmse", "test_ll", "seconds"]
    assert len(hist) == 1 + TINY["epochs"]
    ck = ckpt.load(run / "out" / "checkpoint.nfck")
    assert ck.meta.dims == (3, 4) and ck.params.rank == 2


def test_train_deterministic(run, tmp_path, capsys):
    capsys.readouterr()
    outs = []
    for name in ("a", "b"):
        assert main(["train", str(run / "run.json"), "--out", str(tmp_path / name)]) == 0
        line = capsys.readouterr().out.strip()
        outs.append(line.split(" checkpoint=")[0])
    assert outs[0] == outs[1]
    assert outs[0].startswith("test_rmse=")
    a = (tmp_path / "a" / "checkpoint.nfck").read_bytes()
    assert a == (tmp_path / "b" / "checkpoint.nfck").read_bytes()


def test_set_override(run, tmp_path, capsys):
    assert main(["train", str(run / "run.json"), "--set", "epochs=1",
                 "--out", str(tmp_path)]) == 0
    assert "epochs=1" in capsys.readouterr().out
    assert len(read_rows(tmp_path / "history.csv")) == 2


def test_eval(run, tmp_path, capsys):
    capsys.readouterr()
    out = tmp_path / "m.csv"
    assert main(["eval", str(run / "out" / "checkpoint.nfck"), str(run / "data.csv"),
                 "--out", str(out)]) == 0
    line = capsys.readouterr().out
    assert "rmse=" in line and "n=80" in line and "skipped=0" in line
    rows = read_rows(out)
    assert rows[0] == ["rmse", "log_likelihood", "n", "skipped"]
    assert np.isfinite(float(rows[1][0])) and np.isfinite(float(rows[1][1]))


def test_eval_skips_out_of_range(run, tmp_path, capsys):
    src = (run / "data.csv").read_text().splitlines()
    n_fields = len(src[1].split(","))
    bad = ",".join(["9", "0"] + ["0.5"] * (n_fields - 2))
    (tmp_path / "d.csv").write_text("\n".join(src + [bad]) + "\n")
    capsys.readouterr()
    assert main(["eval", str(run / "out" / "checkpoint.nfck"), str(tmp_path / "d.csv")]) == 0
    cap = capsys.readouterr()
    assert "skipped=1" in cap.out and "skipped 1" in cap.err


def test_eval_untrained_near_unit_rmse(run, tmp_path, capsys):
    ck = ckpt.load(run / "out" / "checkpoint.nfck")
    ck.params = M.init(ck.meta, TrainConfig(**TINY), 0)
    ckpt.save(tmp_path / "init.nfck", ck)
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "init.nfck"), str(run / "data.csv"),
                 "--samples", "50"]) == 0
    rmse = float(capsys.readouterr().out.split()[0].split("=")[1])
    assert rmse == pytest.approx(1.0, abs=0.1)


def test_eval_empty_file(run, tmp_path):
    (tmp_path / "e.csv").write_text("")
    assert main(["eval", str(run / "out" / "checkpoint.nfck"), str(tmp_path / "e.csv")]) == 2


def test_predict(run, tmp_path):
    q = tmp_path / "q.csv"
    q.write_text("i1,i2,time\n0,1,0.5\n0,1,0.5\n2,3,1.4\n")
    out = tmp_path / "p.csv"
    assert main(["predict", str(run / "out" / "checkpoint.nfck"), str(q),
                 "--out", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == ["i1", "i2", "time", "mean", "std"]
    assert rows[1] == rows[2]
    vals = np.array([[float(x) for x in r[3:]] for r in rows[1:]])
    assert np.all(np.isfinite(vals)) and np.all(vals[:, 1] > 0)
    again = tmp_path / "p2.csv"
    main(["predict", str(run / "out" / "checkpoint.nfck"), str(q), "--out", str(again)])
    assert again.read_bytes() == out.read_bytes()


def test_predict_bad_header(run, tmp_path):
    q = tmp_path / "q.csv"
    q.write_text("a,b,time\n0,1,0.5\n")
    assert main(["predict", str(run / "out" / "checkpoint.nfck"), str(q)]) == 2


def test_trajectories(run, tmp_path):
    out = tmp_path / "t.csv"
    args = ["trajectories", str(run / "out" / "checkpoint.nfck"), "--mode", "1",
            "--entities", "0,3", "--grid", "0:1:100", "--seed", "2", "--out", str(out)]
    assert main(args) == 0
    rows = read_rows(out)
    assert rows[0] == ["mode", "entity", "r", "t", "mean", "std"]
    assert len(rows) - 1 == 2 * 100 * TINY["R"]
    assert all(float(r[5]) >= 0 for r in rows[1:])
    first = out.read_bytes()
    assert main(args) == 0
    assert out.read_bytes() == first


def test_trajectories_bad_entity(run):
    assert main(["trajectories", str(run / "out" / "checkpoint.nfck"), "--mode", "0",
                 "--entities", "7", "--grid", "0:1:5"]) == 2


def test_quadrature(tmp_path, capsys):
    out = tmp_path / "q.csv"
    assert main(["quadrature", "--order", "2", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == ["node", "weight"]
    rule = gauss_laguerre(2)
    got = np.array([[float(x) for x in r] for r in rows[1:]])
    np.testing.assert_array_equal(got[:, 0], rule.nodes)
    np.testing.assert_array_equal(got[:, 1], rule.weights)
    total = float(capsys.readouterr().err.strip().split("=")[1])
    assert abs(total - 1.0) < 1e-12


def test_quadrature_order_zero():
    assert main(["quadrature", "--order", "0"]) == 1


def test_simulate_deterministic_and_exact(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert main(["simulate", "--dims", "2,3", "--num-obs", "30", "--noise", "0",
                     "--seed", "4", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    data = load_csv(a, 2)
    doc = json.loads((tmp_path / "a.csv.truth.json").read_text())
    truth = GroundTruth.from_dict(doc["truth"])
    assert np.array_equal(truth(data.indices, data.times), data.values)


def test_missing_data_is_stage_error(tmp_path, capsys):
    (tmp_path / "run.json").write_text(json.dumps(dict(TINY, data="nope.csv", num_modes=2)))
    assert main(["train", str(tmp_path / "run.json")]) == 2
    assert "[load]" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "run.json").write_text(json.dumps({"data": "x", "num_modes": 2, "lr": 1}))
    assert main(["train", str(tmp_path / "run.json")]) == 1
    assert "lr" in capsys.readouterr().err


def test_config_paths_relative(tmp_path):
    (tmp_path / "run.json").write_text(json.dumps({"data": "d.csv", "num_modes": 1}))
    run, cfg = load_run_config(tmp_path / "run.json", ["epochs=7"])
    assert run["data"] == str(tmp_path / "d.csv") and cfg.epochs == 7
    with pytest.raises(UsageError):
        load_run_config(tmp_path / "run.json", ["epochs"])


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1


def test_bad_checkpoint(tmp_path):
    (tmp_path / "x.nfck").write_bytes(b"garbage!" * 4)
    assert main(["eval", str(tmp_path / "x.nfck"), str(tmp_path / "x.nfck")]) == 2


def test_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    assert "max_rel_error=" in capsys.readouterr().out
    assert main(["gradcheck", "--eps", "1e-1", "--tol", "1e-12"]) == 3
