import json

from ad2bench import cli

SHORT = ["--override", "sim.timeout_s=8", "--override", "sim.svg=false"]
POLT_D1 = ["--override", 'attack={"kind": "poltergeist", "interval_d": 1}']


def run(args, capsys=None):
    code = cli.main(args)
    err = capsys.readouterr().err if capsys else ""
    return code, err


def test_unknown_keys_all_listed(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"route": {"famly": "test"}, "sim": {"dt": "fast", "bogus": 1}, "extra": {}}))
    code, err = run(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)
    assert code == 2
    for key in ("route.famly", "sim.bogus", "sim.dt", "extra"):
        assert key in err
    assert not (tmp_path / "o").exists()


def test_bad_override_and_missing_file(tmp_path, capsys):
    assert run(["simulate", "--override", "sim.nope=1", "--out", str(tmp_path)], capsys)[0] == 2
    assert run(["simulate", "--override", "novalue", "--out", str(tmp_path)], capsys)[0] == 2
    assert run(["simulate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)], capsys)[0] == 2


def test_runtime_error_exit_code(tmp_path, capsys):
    code, err = run(["simulate", "--override", "route.length=80", "--out", str(tmp_path)], capsys)
    assert code == 3 and "too short" in err
    assert run(["simulate", "--override", 'route.family="mars"', "--out", str(tmp_path)], capsys)[0] == 2


def test_config_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sim": {"seed": 3}}))
    assert cli.load_config(str(cfg))["sim"]["seed"] == 3
    monkeypatch.setenv("SEED", "11")
    assert cli.load_config(str(cfg))["sim"]["seed"] == 11
    c = cli.load_config(str(cfg), seed=5)
    assert c["sim"]["seed"] == c["dataset"]["seed"] == c["train"]["seed"] == 5
    assert cli.load_config(str(cfg), seed=5, overrides=["sim.seed=9"])["sim"]["seed"] == 9


def test_benign_simulate_outputs(tmp_path):
    out = tmp_path / "benign"
    assert cli.main(["simulate", "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert "DS" in rep and set(rep["tests"].values()) == {"Success"}
    assert (out / "ldev.svg").read_text().startswith("<svg")
    assert (out / "ldev.csv").read_text().splitlines()[0] == "step,t_seconds,ldev_m,attacked"


def test_simulate_deterministic_and_attacked_column(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert cli.main(["simulate", "--out", str(o), "--seed", "4"] + SHORT + POLT_D1) == 0
    assert (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()
    rows = (outs[0] / "ldev.csv").read_text().splitlines()[1:]
    assert rows and all(r.endswith(",1") for r in rows)
    assert not (outs[0] / "ldev.svg").exists()


def test_dump_frames(tmp_path):
    out = tmp_path / "f"
    assert cli.main(["simulate", "--out", str(out), "--override", "sim.timeout_s=0.2",
                     "--override", "sim.dump_frames=true"]) == 0
    names = sorted(p.name for p in (out / "frames").iterdir())
    assert "0_centre.ppm" in names and len(names) % 3 == 0


def test_sweep_summary(tmp_path):
    out = tmp_path / "sw"
    args = ["sweep", "--out", str(out), "--override", "sweep.seeds=1", "--override", "sweep.values=[1, 11]"]
    assert cli.main(args + SHORT + POLT_D1) == 0
    lines = (out / "summary.csv").read_bytes().split(b"\n")
    assert lines[0] == b"axis_value,DS,P,R,ldev_mean,ldev_std"
    assert [l.split(b",")[0] for l in lines[1:3]] == [b"1", b"11"]
    assert (out / "d_11" / "seed_0" / "report.json").exists()
    assert cli.main(["sweep", "--out", str(out), "--override", "sweep.axis=\"epsilon\""] + POLT_D1) == 2


def test_summary_csv_format():
    row = {"axis_value": 4, "DS": 50.0, "P": 1.0, "R": 50.0, "ldev_mean": 0.25, "ldev_std": 0.125}
    assert cli.summary_csv([row]) == ("axis_value,DS,P,R,ldev_mean,ldev_std\n"
                                      "4,50.000000,1.000000,50.000000,0.250000,0.125000\n")


def test_svg_polyline():
    svg = cli.ldev_svg([0.0, 0.5, -0.5, 0.1], [0, 1, 1, 0])
    assert svg.startswith("<svg") and "<polyline" in svg and svg.rstrip().endswith("</svg>")


def test_dataset_train_eval_bench_pipeline(tmp_path):
    # a tiny end-to-end pass; the full-scale protocol lives in the acceptance suite
    ov = ["--override", "dataset.duration_s=12", "--override", "dataset.n_train=24", "--override",
          "dataset.n_test=12", "--override", 'dataset.train_routes=["train:0"]',
          "--override", 'train.methods=["ad2", "lap4"]', "--override", "train.epochs=1",
          "--override", "train.widths=[4, 8, 8]", "--override", 'eval.methods=["ad2", "lap4"]',
          "--override", "eval.bench_instances=2", "--override", "eval.bench_repeats=1"]
    data, models = tmp_path / "data", tmp_path / "models"
    assert cli.main(["gen-dataset", "--out", str(data)] + ov) == 0
    assert (data / "train_index.jsonl").exists() and (data / "test_index.jsonl").exists()
    ov += ["--override", f'dataset.index_dir="{data}"']
    assert cli.main(["train", "--out", str(models)] + ov) == 0
    hist = json.loads((models / "history.json").read_text())
    assert "ad2" in hist and (models / "ad2.bin").exists() and (models / "lap4.json").exists()
    ov += ["--override", f'eval.model_dir="{models}"']
    ev = tmp_path / "eval"
    assert cli.main(["eval", "--out", str(ev)] + ov) == 0
    rows = (ev / "table5.csv").read_text().splitlines()
    assert rows[0].startswith("method,accuracy,auc_benign,auc_polt,auc_snal,auc_esia,tpr_")
    assert [r.split(",")[0] for r in rows[1:]] == ["ad2", "lap4"]
    assert cli.main(["bench", "--out", str(ev)] + ov) == 0
    t6 = (ev / "table6.csv").read_text().splitlines()
    assert t6[0] == "method,median_ms,params" and len(t6) == 3
    assert all(float(r.split(",")[1]) > 0 for r in t6[1:])
