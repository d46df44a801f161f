import csv
import json

import numpy as np
import pytest

from npseg import datagen
from npseg.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main, stream_seed
from npseg.config import ConfigError, RunConfig, dump_config, load_config, parse_config
from npseg.physics import RockParams


class TestConfig:
    def test_defaults_valid(self):
        assert load_config(None) == RunConfig()

    def test_parse_and_ranges(self):
        cfg = parse_config("# comment\nl_min = 7\nphi_range = 0.1, 0.3\nb_override = 4.5\n")
        assert cfg.l_min == 7 and cfg.phi_range == (0.1, 0.3) and cfg.b_override == 4.5
        assert cfg.ranges().phi == (0.1, 0.3)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("colour = blue\n")

    @pytest.mark.parametrize("text", ["l_min = 0", "phi_range = 0.3,0.1", "lr = -1", "noise_output = -0.5",
                                      "epochs = abc"])
    def test_invalid_values(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_env_file_and_flag_precedence(self, tmp_path, monkeypatch):
        p = tmp_path / "run.cfg"
        p.write_text("restarts = 3\nseed = 11\n")
        monkeypatch.setenv("NPSEG_CONFIG", str(p))
        cfg = load_config(None, {"seed": 5, "threads": None})
        assert cfg.restarts == 3 and cfg.seed == 5

    def test_dump_round_trip(self):
        cfg = RunConfig(l_min=9, b_override=3.9)
        assert parse_config(dump_config(cfg)) == cfg

    def test_named_streams_differ(self):
        assert stream_seed(0, "datagen") != stream_seed(0, "train")
        assert stream_seed(0, "grid") == stream_seed(0, "grid")


def _single_cluster_csv(path):
    rng = np.random.default_rng(0)
    real = datagen.gen_realization(RockParams(m=2.1, n=2.0, rho_w=0.04, cec=40), 60, datagen.NO_NOISE, rng)
    s = datagen.LabeledSeries(real.x[:, 0], real.x[:, 1], real.x[:, 2], real.y, labels=np.zeros(60, int))
    s.to_csv(path)
    return path


class TestGen:
    def test_preset_files_and_determinism(self, tmp_path, capsys):
        assert main(["gen", "--preset", "WS-3", "--seed", "7", "--out", str(tmp_path / "a.csv")]) == EXIT_OK
        assert main(["gen", "--preset", "WS-3", "--seed", "7", "--out", str(tmp_path / "b.csv")]) == EXIT_OK
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        s = datagen.LabeledSeries.from_csv(tmp_path / "a.csv")
        assert sorted(set(s.labels.tolist())) == list(range(8))
        assert "labels [0, 1, 2, 3, 4, 5, 6, 7]" in capsys.readouterr().out

    def test_bogus_preset(self, tmp_path, capsys):
        assert main(["gen", "--preset", "bogus", "--out", str(tmp_path / "x.csv")]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert all(name in err for name in datagen.PRESET_NAMES)

    def test_random(self, tmp_path):
        assert main(["gen", "--random", "3", "--seed", "1", "--out", str(tmp_path / "r.csv")]) == EXIT_OK
        assert len(datagen.LabeledSeries.from_csv(tmp_path / "r.csv").blocks) == 4

    def test_unwritable(self, tmp_path):
        assert main(["gen", "--preset", "WS-1", "--out", str(tmp_path / "no" / "x.csv")]) == EXIT_IO


class TestTrainCluster:
    def test_train_smoke(self, tmp_path, capsys):
        ck = tmp_path / "m.anpc"
        argv = ["train", "--epochs", "2", "--sets-per-epoch", "20", "--seed", "1", "--quiet", "--out", str(ck)]
        assert main(argv) == EXIT_OK
        assert "3778" in capsys.readouterr().out
        rows = list(csv.DictReader(open(tmp_path / "m.anpc.curve.csv")))
        assert len(rows) == 2
        first = (tmp_path / "m.anpc.curve.csv").read_bytes()
        assert main(argv) == EXIT_OK
        assert (tmp_path / "m.anpc.curve.csv").read_bytes() == first

    def test_cluster_physics_single(self, tmp_path, capsys):
        path = _single_cluster_csv(tmp_path / "one.csv")
        out = tmp_path / "res.json"
        rc = main(["cluster", str(path), "--provider", "physics:WS", "--c", "1", "--n", "0", "--out", str(out),
                   "--set", "restarts=1"])
        assert rc == EXIT_OK
        rec = json.loads(out.read_text())
        assert rec["ari"] == 1.0 and rec["cost_per_point"] < 1e-10
        assert "ARI 1.0000" in capsys.readouterr().out

    def test_cluster_missing_checkpoint(self, tmp_path):
        path = _single_cluster_csv(tmp_path / "one.csv")
        rc = main(["cluster", str(path), "--provider", "anp:" + str(tmp_path / "nope.anpc"), "--c", "1", "--n", "0",
                   "--out", str(tmp_path / "r.json")])
        assert rc == EXIT_IO

    def test_cluster_infeasible(self, tmp_path, capsys):
        path = _single_cluster_csv(tmp_path / "one.csv")
        rc = main(["cluster", str(path), "--provider", "physics:WS", "--c", "2", "--n", "20", "--out",
                   str(tmp_path / "r.json")])
        assert rc == EXIT_CONFIG
        assert "l_min" in capsys.readouterr().err

    def test_bad_provider(self, tmp_path):
        path = _single_cluster_csv(tmp_path / "one.csv")
        rc = main(["cluster", str(path), "--provider", "magic", "--c", "1", "--n", "0", "--out",
                   str(tmp_path / "r.json")])
        assert rc == EXIT_CONFIG


@pytest.fixture(scope="module")
def small_series(tmp_path_factory):
    d = tmp_path_factory.mktemp("grid")
    s = datagen.build_preset("WS-1", block_plan=[(0, 30), (5, 30), (0, 30)], rng=np.random.default_rng(3))
    datagen.write_series(s, d / "s.csv")
    return d / "s.csv"


class TestGridEval:
    fast = ["--set", "restarts=1", "--set", "max_iters=3", "--set", "fit_restarts=2", "--set", "fit_iters=150",
            "--threads", "1"]

    def test_grid_smoke(self, small_series, tmp_path):
        out = tmp_path / "rep.json"
        rc = main(["grid", str(small_series), "--provider", "physics:WS", "--c-min", "1", "--c-max", "2",
                   "--n-min", "1", "--n-max", "2", "--out", str(out), *self.fast])
        assert rc == EXIT_OK
        rep = json.loads(out.read_text())
        assert [(c["c"], c["n"]) for c in rep["cells"]] == [(2, 1), (2, 2)]
        assert len(rep["skipped"]) == 2
        assert "ari" in rep["most_common"] and "confusion_lowest_cost" in rep
        rows = list(csv.DictReader(open(tmp_path / "rep_scatter.csv")))
        assert len(rows) == len(rep["cells"])
        assert (tmp_path / "rep_scatter.svg").exists()

    def test_grid_select_cells(self, small_series, tmp_path):
        out = tmp_path / "rep.json"
        rc = main(["grid", str(small_series), "--provider", "physics:WS", "--c-min", "2", "--c-max", "2",
                   "--n-min", "1", "--n-max", "2", "--select-cells", "2:2", "--out", str(out), *self.fast])
        assert rc == EXIT_OK
        assert json.loads(out.read_text())["selected"] == [[2, 2]]

    def test_grid_deterministic(self, small_series, tmp_path):
        args = ["grid", str(small_series), "--provider", "physics:WS", "--c-min", "2", "--c-max", "2",
                "--n-min", "2", "--n-max", "2", *self.fast]
        main(args + ["--out", str(tmp_path / "a.json")])
        main(args + ["--out", str(tmp_path / "b.json")])
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert (tmp_path / "a_scatter.csv").read_bytes() == (tmp_path / "b_scatter.csv").read_bytes()

    def test_eval_identity_and_relabel(self, small_series, tmp_path, capsys):
        s = datagen.LabeledSeries.from_csv(small_series)
        pred = tmp_path / "p.json"
        pred.write_text(json.dumps({"labels": (5 - s.labels).tolist()}))
        assert main(["eval", str(pred), str(small_series), "--out", str(tmp_path / "conf.csv")]) == EXIT_OK
        assert "ARI 1.000000" in capsys.readouterr().out
        rows = list(csv.reader(open(tmp_path / "conf.csv")))
        assert sum(int(v) for r in rows[1:] for v in r[1:]) == len(s)

    def test_eval_length_mismatch(self, small_series, tmp_path):
        pred = tmp_path / "p.json"
        pred.write_text(json.dumps({"labels": [0, 1]}))
        assert main(["eval", str(pred), str(small_series)]) == EXIT_CONFIG
