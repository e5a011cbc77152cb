import json

import numpy as np
import pytest

from widemeta.cli import main
from widemeta.config import ConfigError, dump_config, from_dict, load_config, parse_lines
from widemeta.experiment import (METRICS_HEADER, BudgetError, OutputLockedError, ReportError, SweepSpec,
                                 cost_report, load_pools, make_test_tasks, output_lock, parse_report_csv,
                                 report, run, sweep_acu, train_model)
from widemeta.meta import EvalReport

TINY = """
model.base_filters=8
meta.algorithms=FOMAML,ANIL,MAC
meta.iterations=3
meta.meta_batch=2
meta.eta=0.01
meta.log_every=2
episode.k_shot=1
episode.train_queries=2
episode.eval_queries=2
eval.n_task_batches=4
eval.inner_steps=2
widen.z=4,3,2,1
data.n_train_classes=20
data.synth.n_classes=30
data.synth.images_per_class=6
seeds=1,2
"""


def tiny_cfg(**over):
    kv = parse_lines(TINY)
    kv.update({k: str(v) for k, v in over.items()})
    return from_dict(kv)


def rec(alg, mean, cond="blurred", seed=0, k=5):
    return EvalReport.from_accuracies([mean], [seed], {"algorithm": alg, "condition": cond, "seed": seed,
                                                      "n_way": 5, "k_shot": k})


# -- config --------------------------------------------------------------------

def test_config_round_trip():
    cfg = tiny_cfg(**{"eval.lr.body": 0.1, "eval.lr.head": 0.02, "widen.deep": "true"})
    again = from_dict(parse_lines(dump_config(cfg)))
    assert again == cfg
    assert cfg.eval.per_group_lr == {"body": 0.1, "head": 0.02}
    assert cfg.meta.inner.steps == 3


def test_config_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        from_dict({"model.colour": "red"})
    with pytest.raises(ConfigError):
        tiny_cfg(**{"widen.z": "51,0,0,0"})
    with pytest.raises(ConfigError):
        tiny_cfg(**{"meta.algorithms": "REPTILE"})
    with pytest.raises(ConfigError):
        tiny_cfg(seeds="")
    with pytest.raises(ConfigError):
        parse_lines("no equals sign")
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.cfg")


def test_config_presets_and_comments():
    kv = parse_lines("# comment\nwiden.z = mac_opt_omniglot_caption  # trailing\n")
    assert from_dict(kv).widen.z == (50, 40, 25, 20)
    assert from_dict({}).widen.z == (45, 35, 20, 10)


def test_shipped_configs_load():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    for name in ("desk.cfg", "omniglot_full.cfg", "miniimagenet_full.cfg"):
        load_config(root / name)


# -- report ------------------------------------------------------------------------

def test_report_delta_example():
    text, csv_text = report([rec("ANIL", 0.6443), rec("MAC", 0.7452)])
    rows = {r["algorithm"]: r for r in parse_report_csv(csv_text)}
    assert rows["MAC"]["delta_vs_anil_pct"] == pytest.approx(10.09, abs=1e-9)
    assert rows["MAC"]["delta_vs_anil_pct"] == rows["MAC"]["accuracy_pct"] - rows["ANIL"]["accuracy_pct"]
    assert "+10.09" in text


def test_report_single_row_and_alias_footer():
    text, csv_text = report([rec("FOMAML", 0.5, "clean")])
    assert len(parse_report_csv(csv_text)) == 1
    assert "MAML(first-order)" in text and "first-order" in text.splitlines()[-1]


def test_report_csv_round_trip():
    recs = [rec("ANIL", 0.61, seed=1), rec("ANIL", 0.63, seed=2), rec("MAC", 0.70, seed=1),
            rec("MAC", 0.66, seed=2), rec("ANIL", 0.9, "clean", 1)]
    _, csv_text = report(recs)
    rows = parse_report_csv(csv_text)
    mac = next(r for r in rows if r["algorithm"] == "MAC")
    assert mac["accuracy_pct"] == float(np.mean([0.70, 0.66])) * 100.0
    assert mac["n_seeds"] == 2
    assert report(recs)[1] == csv_text


def test_report_refuses_mixed_settings():
    with pytest.raises(ReportError):
        report([rec("ANIL", 0.5, k=1), rec("ANIL", 0.6, k=5)])
    with pytest.raises(ReportError):
        report([])


# -- sweep -------------------------------------------------------------------------

def test_sweep_spec_positions():
    assert len(SweepSpec("all_layers", ((0, 10),) * 4).plans()) == 16
    assert all(p[2] == p[3] == 0 for p in SweepSpec("initial_layers", ((0, 10),) * 4).plans())
    assert all(p[0] == p[1] == 0 for p in SweepSpec("end_layers", ((0, 10),) * 4).plans())
    from widemeta.autodiff import ConfigurationError
    with pytest.raises(ConfigurationError):
        SweepSpec("all_layers", ((0, 60),) * 4)


def test_sweep_grid_and_budget():
    cfg = tiny_cfg()
    train, test = load_pools(cfg)
    model = train_model(cfg, "ANIL", train, 1)
    _, blurred = make_test_tasks(cfg, test, 1)
    res = sweep_acu(cfg, SweepSpec("all_layers", ((0, 10),) * 4, budget=16), model, blurred[:2], 1)
    assert len(res.rows) == 16
    assert res.best_accuracy == max(a for _, a in res.rows)
    assert dict(res.rows)[(0, 0, 0, 0)] == res.anil_accuracy
    with pytest.raises(BudgetError, match="16"):
        sweep_acu(cfg, SweepSpec("all_layers", ((0, 10),) * 4, budget=8), model, blurred[:2], 1)


# -- cost ---------------------------------------------------------------------------

def test_cost_report_rows():
    rows, text = cost_report(tiny_cfg())
    m, mw, deep = rows
    assert mw["forward_mults"] > m["forward_mults"]
    assert deep["trainable_grad_count"] > mw["trainable_grad_count"] > m["trainable_grad_count"]
    zero, _ = cost_report(tiny_cfg(**{"widen.z": "0,0,0,0"}))
    assert zero[1]["forward_mults"] == zero[0]["forward_mults"]
    assert zero[1]["trainable_grad_count"] == zero[0]["trainable_grad_count"]
    doubled, _ = cost_report(tiny_cfg(**{"widen.z": "8,6,4,2"}))
    assert doubled[1]["forward_mults"] > mw["forward_mults"]


# -- run ----------------------------------------------------------------------------

def test_run_smoke_and_determinism(tmp_path):
    cfg = tiny_cfg()
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    for name in ("report.txt", "report.csv", "reports.json", "config.cfg",
                 "seed1/ANIL.ckpt", "seed1/FOMAML.ckpt", "seed2/ANIL.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    lines = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",") == METRICS_HEADER
    evals = [ln.split(",")[4] for ln in lines[1:] if ln.split(",")[2] == "eval"]
    assert {"FOMAML:clean", "ANIL:clean", "ANIL:blurred", "MAC:blurred"} <= set(evals)
    assert not (tmp_path / "a" / ".lock").exists()


def test_run_parallel_matches_serial(tmp_path):
    run(tiny_cfg(seeds="3"), tmp_path / "s")
    run(tiny_cfg(seeds="3", **{"eval.workers": 3}), tmp_path / "p")
    assert (tmp_path / "s" / "reports.json").read_text() == (tmp_path / "p" / "reports.json").read_text()


def test_output_lock(tmp_path):
    with output_lock(tmp_path):
        with pytest.raises(OutputLockedError):
            with output_lock(tmp_path):
                pass


def test_missing_data_root_is_io_error(tmp_path, monkeypatch):
    monkeypatch.delenv("WIDEMETA_DATA", raising=False)
    cfg = tiny_cfg(**{"data.source": "omniglot_tree", "data.root": str(tmp_path / "nope")})
    with pytest.raises(FileNotFoundError):
        load_pools(cfg)


# -- CLI ------------------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(TINY.replace("seeds=1,2", "seeds=1"))
    assert main(["train", "--config", str(cfg_path), "--output", str(tmp_path / "t")]) == 0
    ckpt = tmp_path / "t" / "seed1" / "ANIL.ckpt"
    assert ckpt.is_file()
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--blur",
                 "--output", str(tmp_path / "e")]) == 0
    out = capsys.readouterr().out
    assert "ANIL" in out and "MAC" in out
    assert main(["report", "--inputs", str(tmp_path / "e"), "--csv", str(tmp_path / "r.csv")]) == 0
    assert parse_report_csv((tmp_path / "r.csv").read_text())
    grid = tmp_path / "grid.cfg"
    grid.write_text("position=initial_layers\nbudget=4\nz1=0,5\nz2=0,5\n")
    assert main(["widen-sweep", "--config", str(cfg_path), "--grid", str(grid), "--checkpoint", str(ckpt),
                 "--output", str(tmp_path / "sweep.json")]) == 0
    sweep = json.loads((tmp_path / "sweep.json").read_text())
    assert len(sweep["rows"]) == 4 and all(r["plan"][2:] == [0, 0] for r in sweep["rows"])
    capsys.readouterr()
    assert main(["cost", "--config", str(cfg_path), "--json"]) == 0
    assert len(json.loads(capsys.readouterr().out)) == 3


def test_cli_errors(tmp_path, capsys):
    assert main(["cost", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("widen.z=99,0,0,0\n")
    assert main(["cost", "--config", str(bad)]) == 2
