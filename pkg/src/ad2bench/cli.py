"""Command-line entry point: simulate, sweep, gen-dataset, train, eval, bench."""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import ad2, attacks, baselines, datakit, world
from . import autodiff as ad
from .pilot import PilotConfig, make_pilot
from .render import dump_frames

# section -> key -> default. None marks an optional value; attack=None disables the attack.
_PILOT_FIELDS = {f.name: f.default for f in dataclasses.fields(PilotConfig)}

DEFAULTS: dict[str, Any] = {
    "route": {"family": "test", "variant": 0, "length": 300.0},
    "pilot": {"kind": "reference", **_PILOT_FIELDS},
    "attack": None,
    "sim": {"dt": 0.05, "blocked_timeout_s": 180.0, "timeout_s": None, "offroute_m": 30.0, "seed": 0,
            "init_offset": 0.0, "init_speed": 0.0, "svg": True, "dump_frames": False},
    "dataset": {"train_routes": ["train:0", "train:1"], "test_routes": ["test:0"], "n_train": 2000, "n_test": 800,
                "record_hz": 20, "pair_interval_s": 1.0, "snal_epsilon": 8,
                "esia_severities": ["low", "med", "high"], "duration_s": None, "seed": 7, "index_dir": None},
    "train": {"methods": ["ad2"], "epochs": 8, "batch_size": 32, "lr": 3e-3, "seed": 7, "shared_backbone": True,
              "widths": [8, 16, 32], "diffnet_epochs": 3, "diffnet_widths": [48, 96, 192, 384],
              "kpca_q": 16, "kpca_pretext_epochs": 2},
    "eval": {"methods": ["ad2", "diffnet", "lap4", "cop", "corp"], "model_dir": None, "bench_instances": 16,
             "bench_repeats": 3},
    "sweep": {"axis": "d", "values": None, "seeds": 3},
}
ATTACK_DEFAULTS = {"kind": None, "interval_d": 1, "phase": 0, "seed": None, "params": {}}
SWEEP_AXES = {"d": [1, 4, 11], "epsilon": [4, 8], "severity": ["low", "med", "high"]}
SUMMARY_HEADER = "axis_value,DS,P,R,ldev_mean,ldev_std"
TABLE6_HEADER = "method,median_ms,params"


class ConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------------

def _type_ok(default, value) -> bool:
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    if isinstance(default, dict):
        return isinstance(value, dict)
    return True


def _check_section(name: str, schema: dict, given, problems: list[str]) -> None:
    if not isinstance(given, dict):
        problems.append(f"{name}: expected an object")
        return
    for key, value in given.items():
        if key not in schema:
            problems.append(f"unknown key {name}.{key}")
        elif not _type_ok(schema[key], value):
            problems.append(f"{name}.{key}: expected {type(schema[key]).__name__}, got {type(value).__name__}")


def validate(raw: dict) -> dict:
    """Merge a user document over the defaults; every problem is reported at once."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    problems: list[str] = []
    for key in raw:
        if key not in DEFAULTS:
            problems.append(f"unknown key {key}")
    cfg = copy.deepcopy(DEFAULTS)
    for section, schema in DEFAULTS.items():
        if section not in raw or section == "attack":
            continue
        _check_section(section, schema, raw[section], problems)
        if isinstance(raw[section], dict):
            cfg[section].update({k: v for k, v in raw[section].items() if k in schema})
    atk = raw.get("attack")
    if atk is not None:
        _check_section("attack", ATTACK_DEFAULTS, atk, problems)
        if isinstance(atk, dict):
            kind = atk.get("kind")
            if kind not in attacks.KINDS:
                problems.append(f"attack.kind: expected one of {list(attacks.KINDS)}, got {kind!r}")
            else:
                fields = {f.name for f in dataclasses.fields(attacks._PARAM_TYPES[kind])}
                params = atk.get("params", {})
                if isinstance(params, dict):
                    problems += [f"unknown key attack.params.{k}" for k in params if k not in fields]
            cfg["attack"] = {**ATTACK_DEFAULTS, **{k: v for k, v in atk.items() if k in ATTACK_DEFAULTS}}
    if cfg["route"]["family"] not in ("train", "test"):
        problems.append(f"route.family: expected 'train' or 'test', got {cfg['route']['family']!r}")
    if cfg["pilot"]["kind"] not in ("reference", "oracle"):
        problems.append(f"pilot.kind: expected 'reference' or 'oracle', got {cfg['pilot']['kind']!r}")
    if cfg["sweep"]["axis"] not in SWEEP_AXES:
        problems.append(f"sweep.axis: expected one of {list(SWEEP_AXES)}, got {cfg['sweep']['axis']!r}")
    for sec in ("train", "eval"):
        for m in cfg[sec]["methods"]:
            if m not in ("ad2", "diffnet", "lap4", "cop", "corp"):
                problems.append(f"{sec}.methods: unknown method {m!r}")
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    path, text = item.split("=", 1)
    keys = path.split(".")
    node = raw
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        if not isinstance(node[k], dict):
            raise ConfigError(f"override {path}: {k} is not a section")
        node = node[k]
    node[keys[-1]] = _parse_value(text)


def load_config(path: str | None, seed: int | None = None, overrides=()) -> dict:
    """Defaults < config file < SEED env < --seed < --override."""
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    env_seed = os.environ.get("SEED")
    if seed is None and env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"SEED must be an integer, got {env_seed!r}") from exc
    if seed is not None:
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        for sec in ("sim", "dataset", "train"):
            if raw.get(sec) is None:
                raw[sec] = {}
            if isinstance(raw[sec], dict):
                raw[sec]["seed"] = seed
    for item in overrides:
        apply_override(raw, item)
    return validate(raw)


# -- builders ------------------------------------------------------------------

def make_attack(cfg: dict, seed: int) -> attacks.AttackConfig | None:
    a = cfg["attack"]
    if a is None:
        return None
    ptype = attacks._PARAM_TYPES[a["kind"]]
    params = ptype(**a["params"])
    return attacks.AttackConfig(a["kind"], a["interval_d"], a["phase"], seed if a["seed"] is None else a["seed"], params)


def make_sim(cfg: dict) -> world.SimConfig:
    s = cfg["sim"]
    return world.SimConfig(s["dt"], s["blocked_timeout_s"], s["timeout_s"], s["offroute_m"], s["seed"],
                           s["init_offset"], s["init_speed"])


def make_agent(cfg: dict):
    p = dict(cfg["pilot"])
    kind = p.pop("kind")
    return make_pilot(kind, PilotConfig(**p), cfg["sim"]["dt"])


def _route_ref(ref: str) -> tuple[str, int]:
    family, _, variant = ref.partition(":")
    return family, int(variant or 0)


# -- outputs -------------------------------------------------------------------

def ldev_svg(trace, attacked, dt: float = 0.05, width: int = 640, height: int = 240) -> str:
    """Lane-deviation trace as a standalone SVG polyline; attacked steps shaded."""
    n = len(trace)
    lim = max(1.0, float(np.max(np.abs(trace)))) if n else 1.0
    t_end = max(n * dt, dt)
    mx, my = 40, 20

    def X(t):
        return mx + (width - 2 * mx) * t / t_end

    def Y(v):
        return height / 2 - (height / 2 - my) * v / lim

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    i = 0
    while i < n:
        if attacked[i]:
            j = i
            while j < n and attacked[j]:
                j += 1
            parts.append(f'<rect x="{X(i * dt):.2f}" y="{my}" width="{max(X(j * dt) - X(i * dt), 0.5):.2f}" '
                         f'height="{height - 2 * my}" fill="#f4cccc"/>')
            i = j
        else:
            i += 1
    parts.append(f'<line x1="{mx}" y1="{Y(0):.2f}" x2="{width - mx}" y2="{Y(0):.2f}" stroke="#999"/>')
    pts = " ".join(f"{X(k * dt):.2f},{Y(v):.2f}" for k, v in enumerate(trace))
    parts.append(f'<polyline fill="none" stroke="#1f4e9c" stroke-width="1.2" points="{pts}"/>')
    parts.append(f'<text x="{mx}" y="14" font-size="11" font-family="sans-serif">lane deviation [m], '
                 f'range +/-{lim:.2f}, {t_end:.1f} s</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands ------------------------------------------------------------------

def run_simulation(cfg: dict, seed: int | None = None, frame_dir: Path | None = None) -> world.EpisodeReport:
    r = cfg["route"]
    sc = world.bundled_scenario(r["family"], r["length"], r["variant"])
    sim = make_sim(cfg)
    if seed is not None:
        sim = dataclasses.replace(sim, seed=seed)
    if frame_dir is not None:
        frame_dir.mkdir(parents=True, exist_ok=True)
    sink = None if frame_dir is None else (lambda step, frames, attacked: dump_frames(frame_dir, step, frames))
    return world.run_episode(sc.route, make_agent(cfg), make_attack(cfg, sim.seed), sim, sc.obstacles,
                             frame_sink=sink)


def cmd_simulate(cfg: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    rep = run_simulation(cfg, frame_dir=out / "frames" if cfg["sim"]["dump_frames"] else None)
    (out / "report.json").write_text(rep.dumps())
    (out / "ldev.csv").write_text(rep.ldev_csv(cfg["sim"]["dt"]))
    if cfg["sim"]["svg"]:
        (out / "ldev.svg").write_text(ldev_svg(rep.ldev_trace, rep.attacked_trace, cfg["sim"]["dt"]))
    return 0


def _axis_config(cfg: dict, axis: str, value) -> dict:
    c = copy.deepcopy(cfg)
    kind = {"d": None, "epsilon": "snal", "severity": "esia"}[axis]
    if c["attack"] is None:
        if kind is None:
            raise ConfigError("sweep over d needs an attack section")
        c["attack"] = {**ATTACK_DEFAULTS, "kind": kind}
    if kind is not None and c["attack"]["kind"] != kind:
        raise ConfigError(f"sweep over {axis} needs a {kind} attack, config has {c['attack']['kind']}")
    if axis == "d":
        c["attack"]["interval_d"] = int(value)
    elif axis == "epsilon":
        c["attack"]["params"] = {**c["attack"]["params"], "epsilon": int(value)}
    else:
        c["attack"]["params"] = {**c["attack"]["params"], "severity": str(value)}
    return c


def sweep_rows(cfg: dict, out: Path | None = None) -> list[dict]:
    """One row per axis value: medians over `sweep.seeds` consecutive seeds."""
    axis = cfg["sweep"]["axis"]
    values = cfg["sweep"]["values"] or SWEEP_AXES[axis]
    n_seeds = int(cfg["sweep"]["seeds"])
    if n_seeds < 1:
        raise ConfigError("sweep.seeds must be >= 1")
    base = cfg["sim"]["seed"]
    rows = []
    for v in values:
        c = _axis_config(cfg, axis, v)
        reps = [run_simulation(c, seed=base + i) for i in range(n_seeds)]
        if out is not None:
            for i, rep in enumerate(reps):
                sub = out / f"{axis}_{v}" / f"seed_{base + i}"
                sub.mkdir(parents=True, exist_ok=True)
                (sub / "report.json").write_text(rep.dumps())
                (sub / "ldev.csv").write_text(rep.ldev_csv(c["sim"]["dt"]))
        rows.append({
            "axis_value": v,
            "DS": float(np.median([r.DS for r in reps])),
            "P": float(np.median([r.P for r in reps])),
            "R": float(np.median([r.R for r in reps])),
            "ldev_mean": float(np.median([r.ldev_abs_mean for r in reps])),
            "ldev_std": float(np.median([r.ldev_abs_std for r in reps])),
        })
    return rows


def summary_csv(rows: list[dict]) -> str:
    lines = [SUMMARY_HEADER]
    for r in rows:
        lines.append(f"{r['axis_value']},{r['DS']:.6f},{r['P']:.6f},{r['R']:.6f},{r['ldev_mean']:.6f},"
                     f"{r['ldev_std']:.6f}")
    return "\n".join(lines) + "\n"


def cmd_sweep(cfg: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(summary_csv(sweep_rows(cfg, out)))
    return 0


def dataset_spec(cfg: dict) -> tuple[datakit.DatasetSpec, list, list]:
    d = cfg["dataset"]
    train_refs = [_route_ref(r) for r in d["train_routes"]]
    test_refs = [_route_ref(r) for r in d["test_routes"]]
    rid = lambda fam, var: world.bundled_scenario(fam, 300.0, var).route.route_id
    spec = datakit.DatasetSpec(tuple(rid(*r) for r in train_refs), tuple(rid(*r) for r in test_refs),
                               d["n_train"], d["n_test"], d["record_hz"], d["pair_interval_s"], d["snal_epsilon"],
                               tuple(d["esia_severities"]))
    return spec, train_refs, test_refs


def record_archives(cfg: dict, out: Path | None = None) -> list[datakit.Archive]:
    d = cfg["dataset"]
    _, train_refs, test_refs = dataset_spec(cfg)
    arcs = []
    for fam, var in [*train_refs, *test_refs]:
        sc = world.bundled_scenario(fam, cfg["route"]["length"], var)
        where = out / "archives" / sc.route.route_id if out is not None else None
        arcs.append(datakit.record_run(sc, make_agent(cfg), make_sim(cfg), where, d["duration_s"], d["record_hz"]))
    return arcs


def build_pairs(cfg: dict, out: Path | None = None):
    spec, _, _ = dataset_spec(cfg)
    arcs = record_archives(cfg, out)
    return datakit.build_dataset(arcs, spec, cfg["dataset"]["seed"]), spec


def cmd_gen_dataset(cfg: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    (train, test), spec = build_pairs(cfg, out)
    datakit.write_index(train, out / "train_index.jsonl")
    datakit.write_index(test, out / "test_index.jsonl")
    _write_json(out / "dataset.json", {"train_counts": train.class_counts(), "test_counts": test.class_counts(),
                                       "train_routes": list(spec.train_routes), "test_routes": list(spec.test_routes),
                                       "offset": spec.offset, "audit_mismatches": datakit.audit_labels(train)
                                       + datakit.audit_labels(test)})
    return 0


def load_pairs(cfg: dict):
    """Pairs from a gen-dataset directory when `dataset.index_dir` is set, else built in memory."""
    idx = cfg["dataset"]["index_dir"]
    spec, _, _ = dataset_spec(cfg)
    if idx is None:
        return build_pairs(cfg)[0]
    idx = Path(idx)
    return (datakit.read_index(idx / "train_index.jsonl", offset=spec.offset),
            datakit.read_index(idx / "test_index.jsonl", offset=spec.offset))


def train_config(cfg: dict, epochs_key: str = "epochs") -> ad2.TrainConfig:
    t = cfg["train"]
    return ad2.TrainConfig(t[epochs_key], t["batch_size"], t["lr"], t["seed"], t["shared_backbone"], tuple(t["widths"]))


def train_methods(cfg: dict, train, out: Path, log=None) -> dict:
    """Fit every method in `train.methods`, saving models under `out`; returns histories."""
    t = cfg["train"]
    histories = {}
    for method in t["methods"]:
        if method == "ad2":
            model, hist = ad2.train(train, train_config(cfg), log=log)
            ad2.save_model(model, out / "ad2.bin")
        elif method == "diffnet":
            model, hist = baselines.diffnet_train(train, train_config(cfg, "diffnet_epochs"),
                                                  tuple(t["diffnet_widths"]), log=log)
            baselines.save_diffnet(model, out / "diffnet.bin")
        elif method == "lap4":
            det = baselines.Lap4Detector().fit(train.frames, train.labels)
            _write_json(out / "lap4.json", det.to_json())
            hist = []
        else:
            pcfg = dataclasses.replace(train_config(cfg), epochs=t["kpca_pretext_epochs"], widths=(8, 16, 32))
            pre = histories.get("_pretext")
            det = baselines.kpca_train(train, method, pcfg, t["kpca_q"], pretext=pre)
            histories["_pretext"] = det.pretext
            baselines.save_kpca(det, out / f"kpca_{method}.bin")
            hist = []
        histories[method] = hist
    histories.pop("_pretext", None)
    return histories


def cmd_train(cfg: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    train, _ = load_pairs(cfg)
    hist = train_methods(cfg, train, out)
    _write_json(out / "history.json", hist)
    return 0


class Detector:
    """Uniform predict/score/params view over the five methods."""

    def __init__(self, method: str, model_dir: Path):
        self.method = method
        if method == "ad2":
            self.model = ad2.load_model(model_dir / "ad2.bin")
        elif method == "diffnet":
            self.model = baselines.load_diffnet(model_dir / "diffnet.bin")
        elif method == "lap4":
            self.model = baselines.Lap4Detector.from_json(json.loads((model_dir / "lap4.json").read_text()))
        else:
            self.model = baselines.load_kpca(model_dir / f"kpca_{method}.bin")

    def scores(self, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(pred, (N,4) scores). Learned classifiers give posteriors; threshold methods give one-hot decisions."""
        if self.method == "ad2":
            post = ad.softmax_np(ad2.predict(self.model, frames))
            return ad2.argmax_low(post), post
        if self.method == "diffnet":
            post = ad.softmax_np(baselines.diffnet_predict(self.model, frames))
            return ad2.argmax_low(post), post
        pred = self.model.predict(frames)
        return pred, datakit.one_hot(pred)

    def params(self) -> int:
        if self.method in ("ad2", "diffnet"):
            return self.model.store.count()
        if self.method == "lap4":
            return 3 * len(self.model.means)
        return self.model.pretext.store.count() + self.model.pca.components.size + self.model.pca.mean.size


def cmd_eval(cfg: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    model_dir = Path(cfg["eval"]["model_dir"] or out)
    _, test = load_pairs(cfg)
    lines = [datakit.TABLE5_HEADER]
    reports = {}
    for method in cfg["eval"]["methods"]:
        pred, scores = Detector(method, model_dir).scores(test.frames)
        rep = datakit.evaluate(test.labels, pred, scores, method)
        reports[method] = rep.to_json()
        lines.append(datakit.table5_row(rep))
    (out / "table5.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "eval.json", reports)
    return 0


def cmd_bench(cfg: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    model_dir = Path(cfg["eval"]["model_dir"] or out)
    _, test = load_pairs(cfg)
    frames = test.frames[: cfg["eval"]["bench_instances"]]
    lines = [TABLE6_HEADER]
    for method in cfg["eval"]["methods"]:
        det = Detector(method, model_dir)
        ms = datakit.bench(lambda x: det.scores(x[None]), frames, cfg["eval"]["bench_repeats"])
        lines.append(f"{method},{ms:.6f},{det.params()}")
    (out / "table6.csv").write_text("\n".join(lines) + "\n")
    return 0


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "gen-dataset": cmd_gen_dataset, "train": cmd_train,
            "eval": cmd_eval, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ad2bench", description="Camera-attack driving benchmark and detectors.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run config; omitted sections take their defaults")
    p.add_argument("--out", help="output directory (default: $OUT_DIR or ./out)")
    p.add_argument("--seed", type=int, help="seed for the sim, dataset and train sections")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, value parsed as JSON when possible")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.override)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or os.environ.get("OUT_DIR") or "out")
    try:
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError, ArithmeticError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
