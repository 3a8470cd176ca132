"""AD²: shared CNN backbone per image, spatial then temporal attention, 4-class head."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, ShapeError, Tensor
from .attacks import make_rng
from .imaging import Frame

CLASSES = ("benign", "poltergeist", "snal", "esia")
FEATURE_DIM = 64
HEADS = 4
ARCH_VERSION = 1


@dataclass(frozen=True)
class DetectorInput:
    prev: tuple[Frame, Frame, Frame]
    curr: tuple[Frame, Frame, Frame]

    def __post_init__(self):
        if len(self.prev) != 3 or len(self.curr) != 3:
            raise ValueError("need exactly three frames per timestep [left, centre, right]")
        dims = {(f.height, f.width) for f in (*self.prev, *self.curr)}
        if len(dims) != 1:
            raise ShapeError(f"all six frames must share dimensions, got {sorted(dims)}")

    def stack(self) -> np.ndarray:
        """(6, H, W, 3) uint8 in order prev L,C,R then curr L,C,R."""
        return np.stack([f.data for f in (*self.prev, *self.curr)])


# -- building blocks shared with the baselines ---------------------------------

def _he(rng, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_conv(store: ParamStore, name: str, rng, c_in: int, c_out: int, k: int, norm: bool = True) -> None:
    store.add(f"{name}.w", _he(rng, (c_out, c_in, k, k)))
    if norm:
        # the normalization's beta takes the place of a conv bias, which it would cancel
        store.add(f"{name}.g", np.ones(c_out))
        store.add(f"{name}.beta", np.zeros(c_out))
    else:
        store.add(f"{name}.b", np.zeros(c_out))


def init_linear(store: ParamStore, name: str, rng, n_in: int, n_out: int, scale: float = 1.0) -> None:
    store.add(f"{name}.w", rng.normal(0.0, scale * math.sqrt(1.0 / n_in), size=(n_in, n_out)))
    store.add(f"{name}.b", np.zeros(n_out))


def conv_norm(store: ParamStore, name: str, x: Tensor, stride: int, pad: int) -> Tensor:
    y = ad.conv2d(x, store[f"{name}.w"], None, stride=stride, pad=pad)
    # per-sample, per-channel normalization over (H, W), then per-channel affine
    y = ad.normalize(y, (2, 3))
    return ad.scale_shift(y, store[f"{name}.g"], store[f"{name}.beta"], axis=1)


def lin(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return ad.linear(x, store[f"{name}.w"], store[f"{name}.b"])


def init_backbone(store: ParamStore, prefix: str, rng, c_in: int, widths: Sequence[int], out_dim: int) -> None:
    init_conv(store, f"{prefix}.stem", rng, c_in, widths[0], 3)
    for i in range(1, len(widths)):
        init_conv(store, f"{prefix}.b{i}.c1", rng, widths[i - 1], widths[i], 3)
        init_conv(store, f"{prefix}.b{i}.c2", rng, widths[i], widths[i], 3)
        init_conv(store, f"{prefix}.b{i}.skip", rng, widths[i - 1], widths[i], 1, norm=False)
    init_linear(store, f"{prefix}.fc", rng, widths[-1], out_dim)


def backbone(store: ParamStore, prefix: str, x: Tensor, n_blocks: int) -> Tensor:
    """(N, C, H, W) -> (N, out_dim): stem, strided residual blocks, GAP, linear."""
    h = ad.relu(conv_norm(store, f"{prefix}.stem", x, 2, 1))
    for i in range(1, n_blocks + 1):
        y = ad.relu(conv_norm(store, f"{prefix}.b{i}.c1", h, 2, 1))
        y = conv_norm(store, f"{prefix}.b{i}.c2", y, 1, 1)
        skip = ad.conv2d(h, store[f"{prefix}.b{i}.skip.w"], store[f"{prefix}.b{i}.skip.b"], stride=2, pad=0)
        h = ad.relu(ad.add(y, skip))
    return lin(store, f"{prefix}.fc", ad.global_avg_pool(h))


def init_attention(store: ParamStore, prefix: str, rng, width: int, n_pos: int) -> None:
    store.add(f"{prefix}.cls", rng.normal(0.0, 0.02, size=width))
    store.add(f"{prefix}.pe", np.zeros((n_pos, width)))
    init_linear(store, f"{prefix}.qkv", rng, width, 3 * width)
    init_linear(store, f"{prefix}.out", rng, width, width)
    store.add(f"{prefix}.ln.g", np.ones(width))
    store.add(f"{prefix}.ln.b", np.zeros(width))


def multi_head_attention(store: ParamStore, prefix: str, tokens: Tensor, heads: int = HEADS,
                         weights_out: list | None = None) -> Tensor:
    """Post-norm single attention layer: LN(x + W_o · concat_h softmax(Q Kᵀ/√d_h) V)."""
    B, T, D = tokens.shape
    if D % heads:
        raise ValueError(f"width {D} not divisible by {heads} heads")
    dh = D // heads
    qkv = lin(store, f"{prefix}.qkv", tokens)                      # B,T,3D
    qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, heads, dh)), (2, 0, 3, 1, 4))  # 3,B,h,T,dh
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores)
    if weights_out is not None:
        weights_out.append(attn.data.copy())
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, T, D))
    y = ad.add(tokens, lin(store, f"{prefix}.out", ctx))
    return ad.layer_norm(y, store[f"{prefix}.ln.g"], store[f"{prefix}.ln.b"])


def encode_tokens(store: ParamStore, prefix: str, feats: Tensor, weights_out: list | None = None) -> Tensor:
    """feats (B, T, D) -> CLS output (B, D) of [CLS, feats + pe]."""
    B, T, D = feats.shape
    cls = ad.expand(ad.reshape(store[f"{prefix}.cls"], (1, D)), (B,))
    toks = ad.concat([cls, ad.bias_add(feats, store[f"{prefix}.pe"])], axis=1)
    out = multi_head_attention(store, prefix, toks, weights_out=weights_out)
    return out[:, 0, :]


def argmax_low(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; np.argmax already returns the first (lowest) index on ties."""
    return np.argmax(logits, axis=-1)


def cosine_lr(lr: float, step: int, total: int) -> float:
    return 0.5 * lr * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))


# -- model ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-4
    seed: int = 7
    shared_backbone: bool = True
    widths: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        object.__setattr__(self, "widths", tuple(self.widths))


@dataclass
class Ad2Model:
    store: ParamStore
    input_dims: tuple[int, int]
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    std: np.ndarray = field(default_factory=lambda: np.ones(3))
    widths: tuple[int, ...] = (16, 32, 64)
    shared: bool = True
    trained: bool = False

    @property
    def n_blocks(self) -> int:
        return len(self.widths) - 1

    def backbone_prefix(self, slot: int) -> str:
        return "bb" if self.shared else f"bb{slot}"

    def sidecar(self) -> dict:
        return {
            "input_dims": list(self.input_dims),
            "normalization": {"mean": [float(m) for m in self.mean], "std": [float(s) for s in self.std]},
            "arch_version": ARCH_VERSION,
            "widths": list(self.widths),
            "shared_backbone": self.shared,
        }


def new_model(height: int = 64, width: int = 96, seed: int = 7, widths: Sequence[int] = (16, 32, 64),
              shared: bool = True) -> Ad2Model:
    """A randomly initialised model (flagged untrained)."""
    rng = make_rng(seed, 0xAD2)
    store = ParamStore()
    for slot in ([0] if shared else range(6)):
        init_backbone(store, "bb" if shared else f"bb{slot}", rng, 3, widths, FEATURE_DIM)
    init_attention(store, "sp", rng, FEATURE_DIM, 3)
    init_attention(store, "tp", rng, FEATURE_DIM, 2)
    init_linear(store, "head.l1", rng, FEATURE_DIM, FEATURE_DIM)
    init_linear(store, "head.l2", rng, FEATURE_DIM, len(CLASSES))
    return Ad2Model(store, (height, width), widths=tuple(widths), shared=shared)


def param_count(model) -> int:
    return model.store.count()


def _prep(model: Ad2Model, imgs: np.ndarray) -> Tensor:
    """uint8 (..., H, W, 3) -> normalized float (N, 3, H, W)."""
    H, W = model.input_dims
    if imgs.shape[-3:] != (H, W, 3):
        raise ShapeError(f"frame dims {imgs.shape[-3:-1]} do not match model input {model.input_dims}")
    x = imgs.reshape(-1, H, W, 3).astype(np.float64) / 255.0
    x = (x - model.mean) / model.std
    return Tensor(x.transpose(0, 3, 1, 2))


def _features(model: Ad2Model, frames: np.ndarray) -> Tensor:
    """(B, 6, H, W, 3) -> (B, 6, 64)."""
    B = frames.shape[0]
    if model.shared:
        v = backbone(model.store, "bb", _prep(model, frames), model.n_blocks)
        return ad.reshape(v, (B, 6, FEATURE_DIM))
    outs = [ad.reshape(backbone(model.store, f"bb{i}", _prep(model, frames[:, i]), model.n_blocks),
                       (B, 1, FEATURE_DIM)) for i in range(6)]
    return ad.concat(outs, axis=1)


def forward(model: Ad2Model, frames: np.ndarray) -> Tensor:
    """Logits (B, 4) for a stacked batch (B, 6, H, W, 3)."""
    frames = np.asarray(frames)
    if frames.ndim != 5 or frames.shape[1] != 6:
        raise ShapeError(f"expected (B, 6, H, W, 3) frames, got {frames.shape}")
    B = frames.shape[0]
    v = _features(model, frames)
    s = encode_tokens(model.store, "sp", ad.reshape(v, (2 * B, 3, FEATURE_DIM)))
    h = encode_tokens(model.store, "tp", ad.reshape(s, (B, 2, FEATURE_DIM)))
    z = ad.relu(lin(model.store, "head.l1", h))
    return lin(model.store, "head.l2", z)


def extract_features(frame: Frame, model: Ad2Model, slot: int = 0) -> np.ndarray:
    x = _prep(model, frame.data[None])
    return backbone(model.store, model.backbone_prefix(slot), x, model.n_blocks).data[0]


def spatial_encode(vs, model: Ad2Model, weights_out: list | None = None) -> np.ndarray:
    feats = Tensor(np.asarray(vs, dtype=np.float64).reshape(1, 3, FEATURE_DIM))
    return encode_tokens(model.store, "sp", feats, weights_out).data[0]


def temporal_encode(s_prev, s_curr, model: Ad2Model, weights_out: list | None = None) -> np.ndarray:
    feats = Tensor(np.stack([np.asarray(s_prev, float), np.asarray(s_curr, float)])[None])
    return encode_tokens(model.store, "tp", feats, weights_out).data[0]


def classify(inp: DetectorInput, model: Ad2Model) -> tuple[np.ndarray, int]:
    """Logits and label; ties resolve to the lower class index."""
    logits = forward(model, inp.stack()[None]).data[0]
    return logits, int(argmax_low(logits))


def predict(model: Ad2Model, frames: np.ndarray, batch: int = 64) -> np.ndarray:
    """Logits for a (N, 6, H, W, 3) array, evaluated in fixed-size chunks."""
    out = [forward(model, frames[i:i + batch]).data for i in range(0, len(frames), batch)]
    return np.concatenate(out) if out else np.zeros((0, len(CLASSES)))


def channel_stats(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of uint8 frames on the [0, 1] scale."""
    flat = frames.reshape(-1, 3)
    mean = np.zeros(3)
    sq = np.zeros(3)
    n = 0
    for i in range(0, len(flat), 1 << 20):
        chunk = flat[i:i + (1 << 20)].astype(np.float64) / 255.0
        mean += chunk.sum(axis=0)
        sq += (chunk * chunk).sum(axis=0)
        n += len(chunk)
    mean /= n
    std = np.sqrt(np.maximum(sq / n - mean * mean, 1e-12))
    return mean, std


def fit(model, frames: np.ndarray, labels: np.ndarray, cfg: TrainConfig, forward_fn, log=None) -> list[dict]:
    """Mini-batch Adam with a cosine schedule; shared by AD² and the CNN baselines."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("empty dataset")
    if len(np.unique(labels)) < 2:
        raise ValueError("training needs at least two classes")
    rng = make_rng(cfg.seed, 0x7A1)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = np.sort(order[i:i + cfg.batch_size])
            model.store.zero_grad()
            logits = forward_fn(model, frames[idx])
            loss = ad.cross_entropy(logits, labels[idx])
            loss.backward()
            ad.adam_step(model.store, cosine_lr(cfg.lr, step, total))
            step += 1
            loss_sum += float(loss.data) * len(idx)
            correct += int((argmax_low(logits.data) == labels[idx]).sum())
        rec = {"epoch": epoch + 1, "loss": loss_sum / n, "train_accuracy": correct / n}
        history.append(rec)
        if log:
            log(rec)
    losses = [h["loss"] for h in history]
    if any(b > a for a, b in zip(losses, losses[1:])):
        warnings.warn("training loss increased between epochs", RuntimeWarning, stacklevel=2)
    model.trained = True
    return history


def train(dataset, cfg: TrainConfig = TrainConfig(), log=None) -> tuple[Ad2Model, list[dict]]:
    """Train on anything exposing `frames` (N, 6, H, W, 3) uint8 and `labels` (N,)."""
    frames, labels = np.asarray(dataset.frames), np.asarray(dataset.labels)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    H, W = frames.shape[2:4]
    model = new_model(H, W, cfg.seed, cfg.widths, cfg.shared_backbone)
    model.mean, model.std = channel_stats(frames)
    history = fit(model, frames, labels, cfg, forward, log)
    return model, history


# -- persistence ---------------------------------------------------------------

def save_model(model: Ad2Model, path) -> None:
    path = Path(path)
    model.store.save(path)
    Path(str(path) + ".json").write_text(json.dumps(model.sidecar(), indent=2, sort_keys=True) + "\n")


def load_model(path) -> Ad2Model:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    if meta.get("arch_version") != ARCH_VERSION:
        raise ValueError(f"unsupported arch_version {meta.get('arch_version')}")
    store = ParamStore.load(path)
    H, W = meta["input_dims"]
    return Ad2Model(store, (H, W), np.array(meta["normalization"]["mean"]), np.array(meta["normalization"]["std"]),
                    tuple(meta.get("widths", (16, 32, 64))), bool(meta.get("shared_backbone", True)), trained=True)
