import json
import math

import numpy as np
import pytest

from fembv_gpd import ExcessPanel
from fembv_gpd.cli import main
from fembv_gpd.io import read_excess_csv, read_paths_csv
from oracles import grid_mle


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def sim(work):
    assert main(["simulate", "--out", "sim", "--seed", "2", "--length", "120", "--locations", "3"]) == 0
    return work / "sim"


FIT = ["fit", "--excess", "sim/excess.csv", "--covariates", "sim/covariates.csv", "--K", "2", "--C", "8",
       "--restarts", "3", "--seed", "7"]


def test_extract_one_to_hundred(work):
    (work / "raw.csv").write_text("location,time,value\n" + "".join(f"A,{t},{t}\n" for t in range(1, 101)))
    assert main(["extract", "raw.csv", "--out", "ex"]) == 0
    panel = read_excess_csv("ex/excess.csv", "ex/thresholds.csv")
    assert panel.times[0].tolist() == [99, 100]
    np.testing.assert_allclose(panel.excesses[0], [0.97999, 1.97999], atol=1e-10)
    assert panel.thresholds[0] == pytest.approx(98.02001)
    assert json.loads((work / "ex/manifest.json").read_text())["command"] == "extract"


def test_malformed_row_exit_2_with_line(work, capsys):
    (work / "raw.csv").write_text("location,time,value\nA,1,2.0\nA,2\n")
    assert main(["extract", "raw.csv", "--out", "ex"]) == 2
    assert "raw.csv:3" in capsys.readouterr().err


def test_missing_file_exit_2(work):
    assert main(["extract", "nope.csv", "--out", "ex"]) == 2


def test_fit_outputs_and_byte_determinism(sim, work):
    assert main(FIT + ["--out", "a", "--threads", "1"]) == 0
    assert main(FIT + ["--out", "b", "--threads", "4"]) == 0
    for name in ("fit.json", "paths.csv"):
        assert (work / "a" / name).read_bytes() == (work / "b" / name).read_bytes()
    doc = json.loads((work / "a/fit.json").read_text())
    assert set(doc["regimes"][0]["xi"]) == {"offset", "u"}
    assert doc["config"]["K"] == 2 and doc["config"]["seed"] == 7
    assert doc["p"] == 8 + sum(doc["switches_per_location"].values())
    paths = read_paths_csv(work / "a/paths.csv")
    assert list(paths) == ["S00", "S01", "S02"]


def test_fit_k1_offsets_only_matches_oracle(work):
    assert main(["simulate", "--out", "exp", "--stationary", "0,2", "--locations", "1", "--length", "2000",
                 "--seed", "3"]) == 0
    assert main(["fit", "--excess", "exp/excess.csv", "--K", "1", "--C", "0", "--restarts", "2",
                 "--out", "f"]) == 0
    doc = json.loads((work / "f/fit.json").read_text())
    y = read_excess_csv("exp/excess.csv").excesses[0]
    xi_o, sigma_o, _ = grid_mle(y)
    assert abs(doc["regimes"][0]["xi"]["offset"] - xi_o) < 0.03
    assert abs(doc["regimes"][0]["sigma"]["offset"] - sigma_o) < 0.03


def test_fit_clamps_budget_with_warning(sim):
    with pytest.warns(UserWarning, match="clamped"):
        assert main(FIT[:-6] + ["--C", "5000", "--restarts", "1", "--out", "c"]) == 0
    doc = json.loads(open("c/fit.json").read())
    assert doc["config"]["C"] == 120


def test_config_file_precedence(sim, work):
    (work / "run.cfg").write_text("# settings\nrestarts = 1\nseed = 99\nK = 1\n")
    assert main(["fit", "--excess", "sim/excess.csv", "--config", "run.cfg", "--seed", "4", "--out", "o"]) == 0
    man = json.loads((work / "o/manifest.json").read_text())
    assert man["config"]["restarts"] == 1 and man["config"]["K"] == 1
    assert man["seed"] == 4
    assert man["config"]["C"] == 10


def test_unknown_config_key_exit_2(sim, work):
    (work / "bad.cfg").write_text("colour = blue\n")
    assert main(["fit", "--excess", "sim/excess.csv", "--config", "bad.cfg", "--out", "o"]) == 2


def test_threads_env(sim, work, monkeypatch):
    monkeypatch.setenv("FEMBV_GPD_THREADS", "2")
    assert main(FIT + ["--out", "e"]) == 0
    assert main(FIT + ["--out", "f", "--threads", "1"]) == 0
    assert (work / "e/fit.json").read_bytes() == (work / "f/fit.json").read_bytes()


def test_replay_reproduces_outputs(sim, work):
    assert main(FIT + ["--out", "r"]) == 0
    before = (work / "r/fit.json").read_bytes()
    (work / "r/fit.json").unlink()
    assert main(["replay", "r/manifest.json"]) == 0
    assert (work / "r/fit.json").read_bytes() == before


def test_select_single_cell_equals_fit(sim, work):
    assert main(FIT + ["--out", "a"]) == 0
    sel = ["select", "--excess", "sim/excess.csv", "--covariates", "sim/covariates.csv", "--K-grid", "2",
           "--C-grid", "8", "--lambda-grid", "0", "--restarts", "3", "--seed", "7", "--out", "s"]
    assert main(sel) == 0
    assert (work / "a/fit.json").read_bytes() == (work / "s/best/fit.json").read_bytes()
    lines = (work / "s/selection.csv").read_text().splitlines()
    assert lines[0] == "K,C,lambda,nll,penalized_nll,n,p,aicc,converged,seed"
    assert len(lines) == 2


def test_select_all_cells_failing_exit_3(work):
    # four excesses: every K=2 cell has n <= p + 1
    (work / "e.csv").write_text("location,time,excess\nA,1,1.0\nA,2,2.0\nA,3,0.5\nA,4,3.0\n")
    assert main(["select", "--excess", "e.csv", "--K-grid", "2", "--C-grid", "1", "--restarts", "1",
                 "--out", "s"]) == 3


def test_diagnose_outputs(sim, work):
    assert main(FIT + ["--out", "a"]) == 0
    assert main(["diagnose", "--fit", "a/fit.json", "--excess", "sim/excess.csv", "--covariates",
                 "sim/covariates.csv", "--n-boot", "100", "--out", "d"]) == 0
    qq = (work / "d/qq.csv").read_text().splitlines()
    assert qq[0] == "theoretical,empirical,band_lo,band_hi" and len(qq) == 361
    se = (work / "d/stderr.csv").read_text().splitlines()
    assert se[0] == "regime,coefficient,se_or_flag" and len(se) == 1 + 2 * 4


def test_diagnose_flags_tiny_regime(work):
    from scipy import stats
    y = np.random.default_rng(0).exponential(3.0, 40)
    (work / "e.csv").write_text("location,time,excess\n" + "".join(f"A,{t},{float(v)!r}\n" for t, v in enumerate(y, 1)))
    # regime 0 sits at the MLE of its 39 points, regime 1 owns a single point
    xi0, _, s0 = stats.genpareto.fit(y[:-1], floc=0)
    regimes = [{"regime": 0, "xi": {"offset": xi0}, "sigma": {"offset": s0}},
               {"regime": 1, "xi": {"offset": 0.0}, "sigma": {"offset": 3.0}}]
    doc = {"format_version": 1, "config": {"K": 2, "C": 2, "lambda": 0.0, "restarts": 1,
                                           "max_ao_iterations": 10, "ao_tolerance": 1e-3, "seed": 0},
           "covariates": {"names": [], "kinds": []}, "regimes": regimes, "nll": 1.0, "penalized_nll": 1.0,
           "ao_iterations": 1, "converged": True, "restart_index_of_best": 0, "scaling": {}}
    (work / "fit.json").write_text(json.dumps(doc))
    (work / "paths.csv").write_text("location,time,regime\n" + "".join(
        f"A,{t},{1 if t == 40 else 0}\n" for t in range(1, 41)))
    assert main(["diagnose", "--fit", "fit.json", "--excess", "e.csv", "--n-boot", "20", "--out", "d"]) == 0
    rows = (work / "d/stderr.csv").read_text().splitlines()[1:]
    assert all(r.endswith(",NPD") for r in rows if r.startswith("1,"))
    assert not any(r.endswith(",NPD") for r in rows if r.startswith("0,"))


def _events(work, rows):
    (work / "p.csv").write_text("location,time,regime\n" + "".join(f"{l},{t},{r}\n" for l, t, r in rows))


def _es(work):
    lines = (work / "es/es.csv").read_text().splitlines()
    return [[float(v) for v in line.split(",")[1:]] for line in lines[1:]]


def test_es_hand_count(work):
    _events(work, [("i", t, 0) for t in (1, 5, 9)] + [("j", t, 0) for t in (2, 6, 10)])
    assert main(["es", "--paths", "p.csv", "--out", "es"]) == 0
    assert _es(work)[0][1] == 1.0


def test_es_duplicate_location_and_cap(work):
    _events(work, [("a", 3, 0), ("a", 9, 0), ("b", 3, 0), ("b", 9, 0), ("c", 100, 0)])
    assert main(["es", "--paths", "p.csv", "--tau-max", "5", "--out", "es"]) == 0
    es = _es(work)
    assert es[0][1] == 1.0 and es[0][2] == 0.0


def test_es_cluster_mode(work):
    _events(work, [("i", 1, 1), ("i", 5, 0), ("j", 2, 1), ("j", 50, 0)])
    assert main(["es", "--paths", "p.csv", "--mode", "cluster:1", "--tau-max", "3", "--out", "es"]) == 0
    assert _es(work)[0][1] == 1.0
    assert main(["es", "--paths", "p.csv", "--mode", "cluster:x", "--out", "es2"]) == 2


def test_simulate_seed_determinism(work):
    assert main(["simulate", "--out", "a", "--seed", "5", "--length", "50"]) == 0
    assert main(["simulate", "--out", "b", "--seed", "5", "--length", "50"]) == 0
    for name in ("excess.csv", "covariates.csv", "truth_paths.csv"):
        assert (work / "a" / name).read_bytes() == (work / "b" / name).read_bytes()


def test_simulate_k1_output_is_exponential(work):
    from scipy import stats
    passes = 0
    for seed in range(20):
        assert main(["simulate", "--out", f"k{seed}", "--seed", str(seed), "--stationary", "0,2",
                     "--locations", "1", "--length", "2000"]) == 0
        y = read_excess_csv(f"k{seed}/excess.csv").excesses[0]
        passes += stats.kstest(y / 2.0, "expon").pvalue > 0.01
    assert passes >= 18


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "format" in capsys.readouterr().out


def test_excess_csv_round_trip(work):
    from fembv_gpd.io import write_excess
    panel = ExcessPanel(["A", "B"], [[1, 4], [2]], [[0.1, 1 / 3], [math.pi]], [1.5, 2.5], 0.98)
    write_excess(panel, work)
    back = read_excess_csv(work / "excess.csv", work / "thresholds.csv")
    assert back.locations == ["A", "B"]
    assert back.excesses[0][1] == 1 / 3 and back.excesses[1][0] == math.pi
    assert back.thresholds == [1.5, 2.5] and back.quantile_level == 0.98
