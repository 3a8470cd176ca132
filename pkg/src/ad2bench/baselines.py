"""Comparison detectors: variance of Laplacian, kernel-PCA reconstruction error, difference-image CNN."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ad2
from . import autodiff as ad
from .autodiff import ParamStore, ShapeError, Tensor
from .attacks import make_rng
from .imaging import Frame, laplacian, luminance

N_CLASSES = len(ad2.CLASSES)


def _curr(frames: np.ndarray) -> np.ndarray:
    """Curr-side camera triple(s) of stacked pair frames."""
    return frames[..., 3:, :, :, :]


# -- LAP4 -------------------------------------------------------------------

def lap4_score(frame: Frame | np.ndarray) -> float:
    """Variance of the Laplacian of the luminance plane over the whole image."""
    lum = luminance(frame)
    if lum.shape[0] < 3 or lum.shape[1] < 3:
        raise ValueError(f"LAP4 needs at least 3x3 pixels, got {lum.shape[1]}x{lum.shape[0]}")
    lap = laplacian(lum)
    return float(np.mean((lap - lap.mean()) ** 2))


_AGG = {"min": np.min, "mean": np.mean, "max": np.max}


@dataclass
class Lap4Detector:
    """Per-class Gaussian likelihoods on log LAP4 score; the argmax carves the score axis into intervals."""
    aggregation: str = "min"
    means: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES))
    stds: np.ndarray = field(default_factory=lambda: np.ones(N_CLASSES))
    log_priors: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES))

    def __post_init__(self):
        if self.aggregation not in _AGG:
            raise ValueError(f"aggregation must be one of {sorted(_AGG)}")

    def scores(self, frames: np.ndarray) -> np.ndarray:
        agg = _AGG[self.aggregation]
        return np.array([agg([lap4_score(f) for f in triple]) for triple in _curr(frames)])

    def fit(self, frames: np.ndarray, labels) -> "Lap4Detector":
        return self.fit_scores(self.scores(frames), labels)

    def fit_scores(self, scores, labels) -> "Lap4Detector":
        x = np.log1p(np.asarray(scores, float))
        labels = np.asarray(labels)
        for c in range(N_CLASSES):
            xs = x[labels == c]
            if len(xs) < 2:
                raise ValueError(f"class {ad2.CLASSES[c]} needs at least two training samples")
            self.means[c], self.stds[c] = xs.mean(), max(xs.std(), 1e-6)
            self.log_priors[c] = math.log(len(xs) / len(x))
        return self

    def _loglik(self, scores) -> np.ndarray:
        x = np.log1p(np.asarray(scores, float))[:, None]
        return -0.5 * ((x - self.means) / self.stds) ** 2 - np.log(self.stds) + self.log_priors

    def predict_scores(self, scores) -> np.ndarray:
        return ad2.argmax_low(self._loglik(scores))

    def predict(self, frames: np.ndarray) -> np.ndarray:
        return self.predict_scores(self.scores(frames))

    def thresholds(self, n_grid: int = 4001) -> list[float]:
        """Score values where the decided class changes, in increasing order."""
        lo = float(np.min(self.means - 6 * self.stds))
        hi = float(np.max(self.means + 6 * self.stds))
        grid = np.expm1(np.linspace(lo, hi, n_grid))
        lab = self.predict_scores(np.maximum(grid, 0.0))
        cuts = np.nonzero(np.diff(lab))[0]
        return [float(0.5 * (grid[i] + grid[i + 1])) for i in cuts]

    def to_json(self) -> dict:
        return {"aggregation": self.aggregation, "means": self.means.tolist(), "stds": self.stds.tolist(),
                "log_priors": self.log_priors.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Lap4Detector":
        return cls(obj["aggregation"], np.array(obj["means"]), np.array(obj["stds"]), np.array(obj["log_priors"]))


# -- KPCA ---------------------------------------------------------------------

def cop_map(z) -> np.ndarray:
    """z / ||z||, row-wise for 2-D input."""
    z = np.asarray(z, dtype=np.float64)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cosine map undefined for a zero vector")
    return z / norm


@dataclass(frozen=True)
class RFF:
    """Random Fourier features of the Gaussian kernel exp(-gamma ||a - b||^2)."""
    omega: np.ndarray   # (d, M)
    u: np.ndarray       # (M,)
    gamma: float

    @classmethod
    def draw(cls, d: int, m: int, gamma: float = 1.0, seed: int = 0) -> "RFF":
        if d < 1 or m < 1 or not gamma > 0:
            raise ValueError("need d >= 1, M >= 1 and gamma > 0")
        rng = make_rng(seed, 0x4FF)
        return cls(rng.normal(0.0, math.sqrt(2.0 * gamma), size=(d, m)), rng.uniform(0.0, 2 * math.pi, size=m), gamma)

    @property
    def dim(self) -> int:
        return self.omega.shape[1]


def corp_map(z, rff: RFF) -> np.ndarray:
    """sqrt(2/M) cos(ẑᵀω + u) with ẑ the cosine-normalized input."""
    zh = cop_map(z)
    return math.sqrt(2.0 / rff.dim) * np.cos(zh @ rff.omega + rff.u)


@dataclass
class KpcaModel:
    mean: np.ndarray
    components: np.ndarray  # (q, D), orthonormal rows


def kpca_fit(features, q: int) -> KpcaModel:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < q + 1:
        raise ValueError(f"need at least q + 1 = {q + 1} samples, got {len(x)}")
    mu = x.mean(axis=0)
    _, sv, vt = np.linalg.svd(x - mu, full_matrices=False)
    rank = int((sv > sv[0] * 1e-10).sum()) if sv.size and sv[0] > 0 else 0
    if q > rank:
        raise ValueError(f"q = {q} exceeds achievable rank {rank}")
    return KpcaModel(mu, vt[:q].copy())


def kpca_score(model: KpcaModel, z) -> np.ndarray | float:
    """Squared norm of the residual after projecting onto the principal subspace."""
    z = np.asarray(z, dtype=np.float64)
    c = z - model.mean
    r = c - (c @ model.components.T) @ model.components
    out = np.einsum("...i,...i->...", r, r)
    return float(out) if out.ndim == 0 else out


@dataclass
class PretextCNN:
    """Small backbone trained to tell the three cameras apart; its features feed KPCA."""
    store: ParamStore
    input_dims: tuple[int, int]
    mean: np.ndarray
    std: np.ndarray
    widths: tuple[int, ...] = (8, 16, 32)
    feat_dim: int = 32
    trained: bool = False

    @property
    def n_blocks(self) -> int:
        return len(self.widths) - 1


def _pretext_new(height: int, width: int, seed: int, widths=(8, 16, 32), feat_dim: int = 32) -> PretextCNN:
    rng = make_rng(seed, 0x9E7)
    store = ParamStore()
    ad2.init_backbone(store, "bb", rng, 3, widths, feat_dim)
    ad2.init_linear(store, "cam", rng, feat_dim, 3)
    return PretextCNN(store, (height, width), np.zeros(3), np.ones(3), tuple(widths), feat_dim)


def pretext_features(model: PretextCNN, imgs: np.ndarray) -> Tensor:
    return ad2.backbone(model.store, "bb", ad2._prep(model, imgs), model.n_blocks)


def _pretext_forward(model: PretextCNN, imgs: np.ndarray) -> Tensor:
    return ad2.lin(model.store, "cam", ad.relu(pretext_features(model, imgs)))


def train_pretext(images: np.ndarray, cams: np.ndarray, cfg: ad2.TrainConfig) -> tuple[PretextCNN, list]:
    H, W = images.shape[1:3]
    model = _pretext_new(H, W, cfg.seed)
    model.mean, model.std = ad2.channel_stats(images)
    hist = ad2.fit(model, images, cams, cfg, _pretext_forward)
    return model, hist


@dataclass
class KpcaDetector:
    """Reconstruction-error anomaly score with a benign threshold; anomalies go to the nearest attack score."""
    variant: str
    pretext: PretextCNN
    pca: KpcaModel | None = None
    rff: RFF | None = None
    threshold: float = 0.0
    ref_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ref_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.variant not in ("cop", "corp"):
            raise ValueError(f"variant must be 'cop' or 'corp', got {self.variant!r}")

    def features(self, frames: np.ndarray, batch: int = 128) -> np.ndarray:
        """Pretext features of the three curr cameras, concatenated (the wide-frame view)."""
        curr = _curr(frames)
        n = len(curr)
        out = []
        for i in range(0, n, batch):
            chunk = curr[i:i + batch]
            out.append(pretext_features(self.pretext, chunk).data.reshape(len(chunk), -1))
        return np.concatenate(out)

    def mapped(self, feats: np.ndarray) -> np.ndarray:
        return cop_map(feats) if self.variant == "cop" else corp_map(feats, self.rff)

    def fit_features(self, feats: np.ndarray, labels, q: int = 16, m: int = 256, gamma: float = 1.0,
                     quantile: float = 0.95, seed: int = 7) -> "KpcaDetector":
        labels = np.asarray(labels)
        if self.variant == "corp":
            self.rff = RFF.draw(feats.shape[1], m, gamma, seed)
        z = self.mapped(feats)
        benign = z[labels == 0]
        self.pca = kpca_fit(benign, q)
        s = kpca_score(self.pca, z)
        self.threshold = float(np.quantile(s[labels == 0], quantile))
        atk = labels != 0
        self.ref_scores, self.ref_labels = s[atk], labels[atk]
        return self

    def scores_from_features(self, feats: np.ndarray) -> np.ndarray:
        return kpca_score(self.pca, self.mapped(feats))

    def decide(self, scores: np.ndarray) -> np.ndarray:
        pred = np.zeros(len(scores), dtype=np.int64)
        anomalous = scores > self.threshold
        if anomalous.any():
            order = np.argsort(self.ref_scores, kind="stable")
            ref = self.ref_scores[order]
            pos = np.clip(np.searchsorted(ref, scores[anomalous]), 1, len(ref) - 1)
            left, right = ref[pos - 1], ref[pos]
            pick = np.where(scores[anomalous] - left <= right - scores[anomalous], pos - 1, pos)
            pred[anomalous] = self.ref_labels[order][pick]
        return pred

    def predict(self, frames: np.ndarray) -> np.ndarray:
        return self.decide(self.scores_from_features(self.features(frames)))


def kpca_train(train, variant: str = "cop", cfg: ad2.TrainConfig | None = None, q: int = 16,
               pretext: PretextCNN | None = None, n_pretext: int = 600) -> KpcaDetector:
    """Fit the pretext CNN on benign curr frames (camera index as target), then KPCA on benign features."""
    labels = np.asarray(train.labels)
    if pretext is None:
        cfg = cfg or ad2.TrainConfig(epochs=2, batch_size=32, lr=2e-3)
        benign_idx = np.nonzero(labels == 0)[0][:n_pretext]
        imgs = _curr(train.frames[benign_idx]).reshape(-1, *train.frames.shape[2:])
        cams = np.tile(np.arange(3), len(benign_idx))
        pretext, _ = train_pretext(imgs, cams, cfg)
    det = KpcaDetector(variant, pretext)
    det.fit_features(det.features(train.frames), labels, q=q, seed=cfg.seed if cfg else 7)
    return det


def export_features(path, sample_ids: Sequence, labels: Sequence[int], feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write("sample_id,label," + ",".join(f"f{i}" for i in range(feats.shape[1])) + "\n")
        for sid, lab, row in zip(sample_ids, labels, feats):
            fh.write(f"{sid},{int(lab)}," + ",".join(f"{v:.9f}" for v in row) + "\n")


# -- k-th order differences and the difference CNN ---------------------------

def kth_diff(frame: Frame | np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k-fold forward differences along rows (horizontal) and columns (vertical), per channel."""
    planes = frame.data.astype(np.float64) if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k >= planes.shape[0] or k >= planes.shape[1]:
        raise ValueError(f"k = {k} too large for a {planes.shape[1]}x{planes.shape[0]} image")
    return np.diff(planes, n=k, axis=1), np.diff(planes, n=k, axis=0)


def diff_planes(triples: np.ndarray, k: int = 1) -> np.ndarray:
    """(N, 3, H, W, 3) uint8 -> (N, 6, H, W): luminance H/V differences per camera, zero-padded to H x W."""
    lum = triples.astype(np.float64).mean(axis=-1)       # N,3,H,W
    N, C, H, W = lum.shape
    out = np.zeros((N, 2 * C, H, W))
    out[:, 0::2, :, : W - k] = np.diff(lum, n=k, axis=3)
    out[:, 1::2, : H - k, :] = np.diff(lum, n=k, axis=2)
    return out


@dataclass
class DiffNetModel:
    store: ParamStore
    input_dims: tuple[int, int]
    scale: np.ndarray
    widths: tuple[int, ...] = (48, 96, 192, 384)
    k: int = 1
    trained: bool = False

    @property
    def n_blocks(self) -> int:
        return len(self.widths) - 1


def diffnet_new(height: int = 64, width: int = 96, seed: int = 7, widths=(48, 96, 192, 384), k: int = 1) -> DiffNetModel:
    rng = make_rng(seed, 0xD1F)
    store = ParamStore()
    ad2.init_backbone(store, "bb", rng, 6, widths, 64)
    ad2.init_linear(store, "head", rng, 64, N_CLASSES)
    return DiffNetModel(store, (height, width), np.ones(6), tuple(widths), k)


def diffnet_forward(model: DiffNetModel, frames: np.ndarray) -> Tensor:
    frames = np.asarray(frames)
    if frames.shape[-3:-1] != tuple(model.input_dims):
        raise ShapeError(f"frame dims {frames.shape[-3:-1]} do not match model input {model.input_dims}")
    x = diff_planes(_curr(frames), model.k) / model.scale[None, :, None, None]
    h = ad2.backbone(model.store, "bb", Tensor(x), model.n_blocks)
    return ad2.lin(model.store, "head", ad.relu(h))


def diffnet_train(dataset, cfg: ad2.TrainConfig = ad2.TrainConfig(), widths=(48, 96, 192, 384), log=None):
    frames, labels = np.asarray(dataset.frames), np.asarray(dataset.labels)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    H, W = frames.shape[2:4]
    model = diffnet_new(H, W, cfg.seed, widths)
    sample = diff_planes(_curr(frames[: min(256, len(frames))]), model.k)
    model.scale = np.maximum(sample.std(axis=(0, 2, 3)), 1e-6)
    hist = ad2.fit(model, frames, labels, cfg, diffnet_forward, log)
    return model, hist


def diffnet_classify(inp: ad2.DetectorInput, model: DiffNetModel) -> tuple[np.ndarray, int]:
    logits = diffnet_forward(model, inp.stack()[None]).data[0]
    return logits, int(ad2.argmax_low(logits))


def diffnet_predict(model: DiffNetModel, frames: np.ndarray, batch: int = 64) -> np.ndarray:
    out = [diffnet_forward(model, frames[i:i + batch]).data for i in range(0, len(frames), batch)]
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES))


# -- persistence ---------------------------------------------------------------

def save_diffnet(model: DiffNetModel, path) -> None:
    model.store.save(path)
    meta = {"input_dims": list(model.input_dims), "scale": model.scale.tolist(), "widths": list(model.widths),
            "k": model.k, "arch_version": 1}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_diffnet(path) -> DiffNetModel:
    meta = json.loads(Path(str(path) + ".json").read_text())
    return DiffNetModel(ParamStore.load(path), tuple(meta["input_dims"]), np.array(meta["scale"]),
                        tuple(meta["widths"]), int(meta["k"]), trained=True)


def save_kpca(det: KpcaDetector, path) -> None:
    store = ParamStore()
    for name, t in det.pretext.store.items():
        store.add(f"pretext.{name}", t.data)
    store.add("pca.mean", det.pca.mean)
    store.add("pca.components", det.pca.components)
    store.add("ref.scores", det.ref_scores)
    store.add("ref.labels", det.ref_labels.astype(np.float64))
    if det.rff is not None:
        store.add("rff.omega", det.rff.omega)
        store.add("rff.u", det.rff.u)
    store.save(path)
    meta = {"variant": det.variant, "threshold": det.threshold, "input_dims": list(det.pretext.input_dims),
            "normalization": {"mean": det.pretext.mean.tolist(), "std": det.pretext.std.tolist()},
            "widths": list(det.pretext.widths), "feat_dim": det.pretext.feat_dim,
            "gamma": det.rff.gamma if det.rff is not None else None, "arch_version": 1}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_kpca(path) -> KpcaDetector:
    meta = json.loads(Path(str(path) + ".json").read_text())
    full = ParamStore.load(path)
    pre = ParamStore()
    for name, t in full.items():
        if name.startswith("pretext."):
            pre.add(name[len("pretext."):], t.data)
    pretext = PretextCNN(pre, tuple(meta["input_dims"]), np.array(meta["normalization"]["mean"]),
                         np.array(meta["normalization"]["std"]), tuple(meta["widths"]), meta["feat_dim"], True)
    rff = None
    if "rff.omega" in full:
        rff = RFF(full["rff.omega"].data, full["rff.u"].data, meta["gamma"])
    return KpcaDetector(meta["variant"], pretext, KpcaModel(full["pca.mean"].data, full["pca.components"].data),
                        rff, meta["threshold"], full["ref.scores"].data, full["ref.labels"].data.astype(np.int64))
