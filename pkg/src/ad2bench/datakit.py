"""Recording benign runs, building labelled frame pairs, and classification metrics."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .ad2 import CLASSES
from .attacks import AttackConfig, EsiaParams, KINDS, PoltergeistParams, SnalParams, apply, make_rng
from .imaging import Frame, load_ppm
from .render import dump_frames
from .world import Scenario, SimConfig, run_episode

LABEL_OF = {"clean": 0, **{k: i + 1 for i, k in enumerate(KINDS)}}
COMBOS = (("clean", "clean"), ("attack", "clean"), ("clean", "attack"), ("attack", "attack"))
CLASS_WEIGHTS = (2, 1, 1, 1)


# -- recording ---------------------------------------------------------------

@dataclass
class Archive:
    """Benign camera frames of one route, (T, 3, H, W, 3) uint8, one row per recorded step."""
    route_id: str
    frames: np.ndarray
    paths: list[list[str]] | None = None
    record_hz: int = 20

    def __len__(self) -> int:
        return len(self.frames)


def record_run(scenario: Scenario, pilot, sim: SimConfig = SimConfig(), out_dir=None,
               duration_s: float | None = None, record_hz: int = 20, rig=None) -> Archive:
    """Drive the route without attack and keep every recorded camera triple.

    With `out_dir`, frames go to "<step>_<camera>.ppm" plus index.jsonl.
    """
    stride = round(1.0 / (sim.dt * record_hz))
    if stride < 1 or not math.isclose(stride * sim.dt * record_hz, 1.0, rel_tol=1e-9):
        raise ValueError(f"record_hz {record_hz} must divide the simulation rate {1.0 / sim.dt:g} Hz")
    limit = None
    if duration_s is not None:
        limit = int(round(duration_s * record_hz))
        sim = replace(sim, timeout_s=duration_s)
    kept: list[np.ndarray] = []

    def sink(step, frames, attacked):
        if step % stride == 0 and (limit is None or len(kept) < limit):
            kept.append(np.stack([f.data for f in frames]))

    rep = run_episode(scenario.route, pilot, None, sim, scenario.obstacles, rig, frame_sink=sink)
    if rep.abort_reason:
        raise RuntimeError(f"recording aborted: {rep.abort_reason}")
    arc = Archive(scenario.route.route_id, np.stack(kept), record_hz=record_hz)
    if out_dir is not None:
        write_archive(arc, out_dir)
    return arc


def write_archive(arc: Archive, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    with open(out / "index.jsonl", "w") as fh:
        for i, triple in enumerate(arc.frames):
            names = dump_frames(out, i, [Frame(f) for f in triple])
            rel = [Path(p).name for p in names]
            paths.append([str(out / r) for r in rel])
            fh.write(json.dumps({"step": i, "t_seconds": round(i / arc.record_hz, 6), "paths": rel,
                                 "route": arc.route_id}) + "\n")
    arc.paths = paths


def load_archive(out_dir) -> Archive:
    out = Path(out_dir)
    rows = [json.loads(line) for line in (out / "index.jsonl").read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"empty archive index in {out}")
    frames = np.stack([np.stack([load_ppm(out / p).data for p in r["paths"]]) for r in rows])
    hz = round(1.0 / rows[1]["t_seconds"]) if len(rows) > 1 and rows[1]["t_seconds"] > 0 else 20
    return Archive(rows[0]["route"], frames, [[str(out / p) for p in r["paths"]] for r in rows], hz)


# -- dataset -------------------------------------------------------------------

def class_counts(n: int, weights: Sequence[int] = CLASS_WEIGHTS) -> list[int]:
    """Largest-remainder split of n in the given ratio; every count is within 1 of its ideal share."""
    w = np.asarray(weights, dtype=float)
    ideal = n * w / w.sum()
    counts = np.floor(ideal).astype(int)
    rem = n - counts.sum()
    order = sorted(range(len(w)), key=lambda i: (-(ideal[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    return [int(c) for c in counts]


@dataclass(frozen=True)
class DatasetSpec:
    train_routes: tuple[str, ...]
    test_routes: tuple[str, ...]
    n_train: int = 2000
    n_test: int = 800
    record_hz: int = 20
    pair_interval_s: float = 1.0
    snal_epsilon: int = 8
    esia_severities: tuple[str, ...] = ("low", "med", "high")

    def __post_init__(self):
        overlap = set(self.train_routes) & set(self.test_routes)
        if overlap:
            raise ValueError(f"train and test routes overlap: {sorted(overlap)}")
        if not self.train_routes or not self.test_routes:
            raise ValueError("need at least one train and one test route")
        if self.n_train < 5 or self.n_test < 5:
            raise ValueError("need at least 5 pairs per split")

    @property
    def offset(self) -> int:
        return int(round(self.record_hz * self.pair_interval_s))


@dataclass
class PairSet:
    frames: np.ndarray                 # (N, 6, H, W, 3) uint8: prev L,C,R then curr L,C,R
    labels: np.ndarray                 # (N,) int
    provenance: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "PairSet":
        idx = np.asarray(idx)
        return PairSet(self.frames[idx], self.labels[idx], [self.provenance[i] for i in idx])

    def class_counts(self) -> list[int]:
        return [int((self.labels == k).sum()) for k in range(len(CLASSES))]


def attack_for(kind: str, seed: int, spec: DatasetSpec, rng: np.random.Generator) -> AttackConfig:
    if kind == "poltergeist":
        params = PoltergeistParams()
    elif kind == "snal":
        params = SnalParams(epsilon=spec.snal_epsilon)
    else:
        params = EsiaParams(spec.esia_severities[int(rng.integers(len(spec.esia_severities)))])
    return AttackConfig(kind, interval_d=1, seed=seed, params=params)


def label_from(combo: Sequence[str], curr_attack: dict | None) -> int:
    """The class is decided by the curr side alone."""
    if combo[1] == "clean":
        return 0
    return LABEL_OF[curr_attack["kind"]]


def _materialize(frames: np.ndarray, cfg: dict | None, t: int) -> np.ndarray:
    if cfg is None:
        return frames
    out, _ = apply([Frame(f) for f in frames], AttackConfig.from_json(cfg), t)
    return np.stack([f.data for f in out])


def _build_split(archives: dict[str, Archive], routes, n: int, spec: DatasetSpec, seed: int, split: str) -> PairSet:
    off = spec.offset
    pool = [(r, t) for r in routes for t in range(off, len(archives[r]))]
    counts = class_counts(n)
    if len(pool) < n:
        raise ValueError(f"{split}: {len(pool)} usable steps on routes {list(routes)} but {n} pairs requested; "
                         f"achievable class counts {class_counts(len(pool))}")
    rng = make_rng(seed, 0xDA7A, 0 if split == "train" else 1)
    picks = rng.permutation(len(pool))[:n]
    labels_plan = np.repeat(np.arange(len(CLASSES)), counts)
    labels_plan = labels_plan[rng.permutation(n)]
    H, W = archives[routes[0]].frames.shape[2:4]
    frames = np.empty((n, 6, H, W, 3), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    prov = []
    for i, (pi, cls) in enumerate(zip(picks, labels_plan)):
        route, t = pool[pi]
        half = rng.random() < 0.5
        if cls == 0:
            combo = ("clean", "clean") if half else ("attack", "clean")
            prev_kind = KINDS[int(rng.integers(len(KINDS)))] if not half else None
            curr_kind = None
        else:
            combo = ("clean", "attack") if half else ("attack", "attack")
            curr_kind = KINDS[cls - 1]
            prev_kind = None if half else curr_kind
        pair_seed = int(rng.integers(2**62))
        prev_cfg = attack_for(prev_kind, pair_seed, spec, rng).to_json() if prev_kind else None
        curr_cfg = attack_for(curr_kind, pair_seed + 1, spec, rng).to_json() if curr_kind else None
        arc = archives[route]
        frames[i, :3] = _materialize(arc.frames[t - off], prev_cfg, t - off)
        frames[i, 3:] = _materialize(arc.frames[t], curr_cfg, t)
        labels[i] = label_from(combo, curr_cfg)
        rec = {"route": route, "t": int(t), "combo": list(combo), "label": int(labels[i]),
               "attack_params": {"prev": prev_cfg, "curr": curr_cfg}}
        if arc.paths is not None:
            rec["prev_paths"] = list(arc.paths[t - off])
            rec["curr_paths"] = list(arc.paths[t])
        prov.append(rec)
    return PairSet(frames, labels, prov)


def build_dataset(archives: Sequence[Archive], spec: DatasetSpec, seed: int = 7) -> tuple[PairSet, PairSet]:
    """Route-disjoint train/test pair sets in a 2:1:1:1 class ratio."""
    by_id = {a.route_id: a for a in archives}
    missing = [r for r in (*spec.train_routes, *spec.test_routes) if r not in by_id]
    if missing:
        raise ValueError(f"no archive for routes {missing}")
    for a in archives:
        if a.record_hz != spec.record_hz:
            raise ValueError(f"archive {a.route_id} recorded at {a.record_hz} Hz, spec wants {spec.record_hz}")
    train = _build_split(by_id, list(spec.train_routes), spec.n_train, spec, seed, "train")
    test = _build_split(by_id, list(spec.test_routes), spec.n_test, spec, seed, "test")
    return train, test


def write_index(pairs: PairSet, path) -> None:
    with open(path, "w") as fh:
        for rec in pairs.provenance:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_index(path, archives: Sequence[Archive] | None = None, offset: int = 20) -> PairSet:
    """Rebuild a pair set from its index; attacks are re-applied from the stored parameters."""
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    by_id = {a.route_id: a for a in archives or ()}
    cache: dict[str, np.ndarray] = {}

    def triple(route, t, paths):
        if route in by_id:
            return by_id[route].frames[t]
        key = "|".join(paths)
        if key not in cache:
            cache[key] = np.stack([load_ppm(p).data for p in paths])
        return cache[key]

    frames, labels = [], []
    for r in rows:
        prev = triple(r["route"], r["t"] - offset, r.get("prev_paths", []))
        curr = triple(r["route"], r["t"], r.get("curr_paths", []))
        ap = r["attack_params"]
        frames.append(np.concatenate([_materialize(prev, ap["prev"], r["t"] - offset),
                                      _materialize(curr, ap["curr"], r["t"])]))
        labels.append(r["label"])
    return PairSet(np.stack(frames), np.array(labels, dtype=np.int64), rows)


def audit_labels(pairs: PairSet) -> int:
    """Number of pairs whose stored label disagrees with the label re-derived from provenance."""
    bad = 0
    for lab, rec in zip(pairs.labels, pairs.provenance):
        if label_from(rec["combo"], rec["attack_params"]["curr"]) != int(lab) or rec["label"] != int(lab):
            bad += 1
    return bad


# -- metrics -------------------------------------------------------------------

def roc_auc(positive: np.ndarray, score: np.ndarray) -> float:
    """Trapezoid area under the ROC curve, sweeping thresholds over the distinct scores."""
    positive = np.asarray(positive, dtype=bool)
    score = np.asarray(score, dtype=float)
    P = int(positive.sum())
    N = len(positive) - P
    if P == 0 or N == 0:
        raise ValueError("AUC needs both positive and negative samples")
    order = np.argsort(-score, kind="stable")
    s, y = score[order], positive[order]
    # cut after the last occurrence of each distinct score
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / P]
    fpr = np.r_[0.0, fp / N]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class EvalReport:
    method: str
    accuracy: float
    confusion: np.ndarray
    tpr: list[float]
    fpr: list[float]
    auc: list[float]
    median_ms: float | None = None

    @property
    def support(self) -> list[int]:
        return [int(v) for v in self.confusion.sum(axis=1)]

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "support": self.support,
            "tpr": dict(zip(CLASSES, self.tpr)),
            "fpr": dict(zip(CLASSES, self.fpr)),
            "auc": dict(zip(CLASSES, self.auc)),
            "median_ms": self.median_ms,
        }


SHORT = ("benign", "polt", "snal", "esia")
TABLE5_HEADER = ("method,accuracy," + ",".join(f"auc_{c}" for c in SHORT) + ","
                 + ",".join(f"tpr_{c}" for c in SHORT) + "," + ",".join(f"fpr_{c}" for c in SHORT))


def table5_row(rep: EvalReport) -> str:
    vals = [rep.accuracy, *rep.auc, *rep.tpr, *rep.fpr]
    return rep.method + "," + ",".join(f"{v:.6f}" for v in vals)


def evaluate(labels, pred, scores, method: str = "") -> EvalReport:
    """Accuracy, confusion and one-vs-rest TPR/FPR/AUC.

    `scores` is (N, 4): posteriors for classifiers, one-hot decisions for
    threshold methods. TPR/FPR come from the hard predictions.
    """
    labels = np.asarray(labels, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    scores = np.asarray(scores, dtype=float)
    k = len(CLASSES)
    if len(labels) == 0:
        raise ValueError("empty test set")
    missing = [CLASSES[c] for c in range(k) if not (labels == c).any()]
    if missing:
        raise ValueError(f"test set lacks classes {missing}")
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    n = len(labels)
    tpr, fpr, auc = [], [], []
    for c in range(k):
        pos = labels == c
        tpr.append(float(conf[c, c] / pos.sum()))
        fpr.append(float((conf[:, c].sum() - conf[c, c]) / (n - pos.sum())))
        auc.append(roc_auc(pos, scores[:, c]))
    return EvalReport(method, float(np.trace(conf) / n), conf, tpr, fpr, auc)


def one_hot(pred, k: int = len(CLASSES)) -> np.ndarray:
    out = np.zeros((len(pred), k))
    out[np.arange(len(pred)), np.asarray(pred, dtype=np.int64)] = 1.0
    return out


def bench(predict_one: Callable[[np.ndarray], object], frames: np.ndarray, repeats: int = 3) -> float:
    """Median over repeats of the mean per-instance wall time in ms, after one untimed warm-up."""
    if len(frames) == 0:
        raise ValueError("no instances to time")
    predict_one(frames[0])
    times = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        for x in frames:
            predict_one(x)
        times.append((time.perf_counter() - t0) * 1000.0 / len(frames))
    return float(np.median(times))
