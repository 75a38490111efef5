"""Compact CNN with handcrafted features injected at the fully-connected stage.

Architecture::

    image -> [conv3x3 -> ReLU -> (2x2 avg-pool)] * B -> global avg-pool
          -> concat(pooled, handcrafted[200]) -> FC -> ReLU -> FC -> 7 logits

Everything is float64 NumPy with hand-written backward passes; tensors are
NHWC. Input pixels are shifted by -0.5 before the first convolution.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from dermhybrid.dataset import NUM_CLASSES
from dermhybrid.features import N_FEATURES

CHECKPOINT_MAGIC = b"HYBN"
CHECKPOINT_VERSION = 1
# pixels in [0, 1] enter the first conv centred on zero
INPUT_SHIFT = 0.5


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    stride: int = 1
    pool: bool = True
    kernel: int = 3


@dataclass(frozen=True)
class HybridModelConfig:
    input_size: tuple[int, int] = (64, 64)
    conv_blocks: tuple[ConvBlock, ...] = (ConvBlock(16), ConvBlock(32), ConvBlock(64))
    fc_hidden: int = 64
    injection_dim: int = N_FEATURES
    num_classes: int = NUM_CLASSES
    seed: int = 0
    conv_embed_dim: int | None = None

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(*b) for b in self.conv_blocks)
        object.__setattr__(self, "conv_blocks", blocks)
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if not blocks:
            raise ValueError("at least one conv block is required")
        if self.conv_embed_dim is None:
            object.__setattr__(self, "conv_embed_dim", blocks[-1].out_channels)
        if self.conv_embed_dim != blocks[-1].out_channels:
            raise ValueError(
                f"conv_embed_dim {self.conv_embed_dim} != last block out_channels {blocks[-1].out_channels}"
            )
        if self.injection_dim != N_FEATURES:
            raise ValueError(f"injection_dim must be {N_FEATURES}")
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes must be {NUM_CLASSES}")
        if self.fc_hidden < 1:
            raise ValueError("fc_hidden must be positive")
        for b in blocks:
            if b.kernel != 3 or b.out_channels < 1 or b.stride < 1:
                raise ValueError(f"invalid conv block {b}")
        self.feature_map_sizes()  # validates spatial chain

    def feature_map_sizes(self) -> list[tuple[int, int]]:
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ValueError(f"invalid input size {self.input_size}")
        sizes = []
        for b in self.conv_blocks:
            h, w = -(-h // b.stride), -(-w // b.stride)
            if b.pool:
                if h % 2 or w % 2:
                    raise ValueError(f"cannot 2x2-pool a {h}x{w} feature map")
                h, w = h // 2, w // 2
            sizes.append((h, w))
        return sizes

    @property
    def fc_input_dim(self) -> int:
        return self.conv_embed_dim + self.injection_dim

    def to_json(self) -> str:
        d = asdict(self)
        d["conv_blocks"] = [list(asdict(b).values()) for b in self.conv_blocks]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "HybridModelConfig":
        d = json.loads(text)
        d["conv_blocks"] = tuple(ConvBlock(*b) for b in d["conv_blocks"])
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 20
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0
    use_injection: bool = True

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"invalid training config {self}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class HybridModel:
    config: HybridModelConfig
    params: dict[str, np.ndarray]
    use_injection: bool = True

    def param_names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "HybridModel":
        return HybridModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.use_injection)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed & (2**64 - 1)))


def init_model(cfg: HybridModelConfig, use_injection: bool = True) -> HybridModel:
    """He-uniform weights (bound sqrt(6 / fan_in)) in registry order, zero biases."""
    rng = _rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    c_in = 3
    for i, b in enumerate(cfg.conv_blocks):
        fan_in = b.kernel * b.kernel * c_in
        bound = math.sqrt(6.0 / fan_in)
        params[f"conv{i}_w"] = rng.uniform(-bound, bound, (b.kernel, b.kernel, c_in, b.out_channels))
        params[f"conv{i}_b"] = np.zeros(b.out_channels)
        c_in = b.out_channels
    for name, (n_in, n_out) in (("fc1", (cfg.fc_input_dim, cfg.fc_hidden)), ("fc2", (cfg.fc_hidden, cfg.num_classes))):
        bound = math.sqrt(6.0 / n_in)
        params[f"{name}_w"] = rng.uniform(-bound, bound, (n_in, n_out))
        params[f"{name}_b"] = np.zeros(n_out)
    assert params["fc1_w"].shape[0] == cfg.conv_embed_dim + N_FEATURES
    assert params["fc2_w"].shape[1] == NUM_CLASSES
    return HybridModel(cfg, params, use_injection)


# -- layers -----------------------------------------------------------------


def _im2col(x: np.ndarray, stride: int) -> tuple[np.ndarray, tuple]:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, 9 * c)
    return cols, (n, h, w, c, ho, wo)


def conv_forward(x, wgt, bias, stride):
    cols, shape = _im2col(x, stride)
    n, _, _, _, ho, wo = shape
    out = cols @ wgt.reshape(-1, wgt.shape[3]) + bias
    return out.reshape(n, ho, wo, -1), (cols, shape)


def conv_backward(dout, wgt, stride, cache, need_dx=True):
    cols, (n, h, w, c, ho, wo) = cache
    f = wgt.shape[3]
    d2 = dout.reshape(-1, f)
    dw = (cols.T @ d2).reshape(wgt.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ wgt.reshape(-1, f).T).reshape(n, ho, wo, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c))
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, i, j]
    return dxp[:, 1:-1, 1:-1], dw, db


def avgpool_forward(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def avgpool_backward(dout):
    return np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) * 0.25


# -- forward / backward ------------------------------------------------------


def _prepare_inputs(m: HybridModel, images, hands):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    h, w = m.config.input_size
    if x.shape[1:] != (h, w, 3):
        raise ValueError(f"image batch shape {x.shape[1:]} does not match model input {(h, w, 3)}")
    n = x.shape[0]
    if m.use_injection:
        if hands is None:
            raise ValueError("model uses feature injection; handcrafted features are required")
        hv = np.asarray(getattr(hands, "values", hands), dtype=np.float64)
        if hv.ndim == 1:
            hv = hv[None]
        if hv.shape != (n, N_FEATURES):
            raise ValueError(f"handcrafted batch shape {hv.shape}, expected {(n, N_FEATURES)}")
    else:
        if hands is not None:
            raise ValueError("model was built without feature injection; do not pass handcrafted features")
        hv = np.zeros((n, N_FEATURES))
    return x, hv


def forward_batch(m: HybridModel, images, hands=None, keep_cache: bool = False):
    """Return ``(logits, hidden, cache)`` for a batch; ``cache`` is None unless requested."""
    x, hv = _prepare_inputs(m, images, hands)
    p = m.params
    caches = []
    pre_acts = []
    a = x - INPUT_SHIFT
    for i, b in enumerate(m.config.conv_blocks):
        z, cc = conv_forward(a, p[f"conv{i}_w"], p[f"conv{i}_b"], b.stride)
        pre_acts.append(z)
        a = np.maximum(z, 0.0)
        caches.append((cc, z))
        if b.pool:
            a = avgpool_forward(a)
    pooled = a.mean(axis=(1, 2))
    last_hw = a.shape[1:3]
    fc_in = np.concatenate([pooled, hv], axis=1)
    assert fc_in.shape[1] == m.config.fc_input_dim
    z1 = fc_in @ p["fc1_w"] + p["fc1_b"]
    hidden = np.maximum(z1, 0.0)
    logits = hidden @ p["fc2_w"] + p["fc2_b"]
    pre_acts.append(z1)
    cache = None
    if keep_cache:
        cache = dict(convs=caches, last_hw=last_hw, fc_in=fc_in, z1=z1, hidden=hidden, pre_acts=pre_acts)
    return logits, hidden, cache


def backward_batch(m: HybridModel, cache, dlogits) -> dict[str, np.ndarray]:
    p = m.params
    grads = {}
    grads["fc2_w"] = cache["hidden"].T @ dlogits
    grads["fc2_b"] = dlogits.sum(axis=0)
    dz1 = (dlogits @ p["fc2_w"].T) * (cache["z1"] > 0)
    grads["fc1_w"] = cache["fc_in"].T @ dz1
    grads["fc1_b"] = dz1.sum(axis=0)
    dpooled = (dz1 @ p["fc1_w"].T)[:, : m.config.conv_embed_dim]
    h, w = cache["last_hw"]
    da = np.broadcast_to(dpooled[:, None, None, :] / (h * w), (dpooled.shape[0], h, w, dpooled.shape[1]))
    for i in reversed(range(len(m.config.conv_blocks))):
        b = m.config.conv_blocks[i]
        cc, z = cache["convs"][i]
        if b.pool:
            da = avgpool_backward(da)
        dz = da * (z > 0)
        da, grads[f"conv{i}_w"], grads[f"conv{i}_b"] = conv_backward(dz, p[f"conv{i}_w"], b.stride, cc, need_dx=i > 0)
    return {k: grads[k] for k in p}


def forward(m: HybridModel, img, hand=None) -> np.ndarray:
    """Logits (7,) for one image."""
    return forward_batch(m, img, hand)[0][0]


def embed(m: HybridModel, img, hand=None) -> np.ndarray:
    """Post-ReLU activation of the hidden FC layer for one image."""
    return forward_batch(m, img, hand)[1][0]


def embed_batch(m: HybridModel, images, hands=None, batch_size: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        h = None if hands is None else hands[s : s + batch_size]
        out.append(forward_batch(m, images[s : s + batch_size], h)[1])
    return np.concatenate(out) if out else np.zeros((0, m.config.fc_hidden))


def predict_logits(m: HybridModel, images, hands=None, batch_size: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        h = None if hands is None else hands[s : s + batch_size]
        out.append(forward_batch(m, images[s : s + batch_size], h)[0])
    return np.concatenate(out) if out else np.zeros((0, NUM_CLASSES))


# -- losses -----------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, label) -> float:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("cross_entropy received non-finite logits")
    zmax = z.max()
    return float(zmax + math.log(np.exp(z - zmax).sum()) - z[int(label)])


def batch_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    if not np.all(np.isfinite(logits)):
        raise ValueError("cross_entropy received non-finite logits")
    n = logits.shape[0]
    zmax = logits.max(axis=1, keepdims=True)
    shifted = logits - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    idx = np.arange(n)
    loss = float(np.mean(lse - shifted[idx, labels]))
    d = np.exp(shifted - lse[:, None])
    d[idx, labels] -= 1.0
    return loss, d / n


def dice_loss(pred, gt, eps: float = 1.0) -> float:
    """Soft Dice loss ``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)``."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and mask {g.shape} dimensions differ")
    return 1.0 - (2.0 * np.sum(p * g) + eps) / (np.sum(p) + np.sum(g) + eps)


def dice_loss_grad(pred, gt, eps: float = 1.0) -> np.ndarray:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and mask {g.shape} dimensions differ")
    num = 2.0 * np.sum(p * g) + eps
    den = np.sum(p) + np.sum(g) + eps
    return -(2.0 * g * den - num) / den**2


# -- training ---------------------------------------------------------------


def balanced_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    recalls = [np.mean(pred[truth == c] == c) for c in np.unique(truth)]
    return float(np.mean(recalls))


def train(
    m: HybridModel,
    images: np.ndarray,
    hands: np.ndarray | None,
    labels: Sequence[int],
    tc: TrainConfig,
    val: tuple[np.ndarray, np.ndarray | None, Sequence[int]] | None = None,
    augment_fn=None,
) -> tuple[HybridModel, list[dict]]:
    """Mini-batch SGD with momentum on mean cross-entropy.

    ``hands`` must already be standardized. ``augment_fn(image, epoch, index)``
    may return an augmented copy of a training image. Returns a new model
    and one history row per epoch.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n = len(labels)
    if n == 0:
        raise ValueError("training data is empty")
    if images.shape[0] != n or (hands is not None and len(hands) != n):
        raise ValueError("images, features and labels must have equal lengths")
    model = m.copy()
    model.use_injection = tc.use_injection
    if tc.use_injection and hands is None:
        raise ValueError("feature injection requested but no handcrafted features given")
    hands_arr = np.asarray(hands, dtype=np.float64) if tc.use_injection else None
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    rng = _rng(tc.seed)
    history = []
    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, tc.batch_size):
            idx = order[s : s + tc.batch_size]
            xb = images[idx]
            if augment_fn is not None:
                xb = np.stack([augment_fn(images[i], epoch, int(i)) for i in idx])
            hb = hands_arr[idx] if hands_arr is not None else None
            logits, _, cache = forward_batch(model, xb, hb, keep_cache=True)
            loss, dlogits = batch_cross_entropy(logits, labels[idx])
            total += loss * len(idx)
            grads = backward_batch(model, cache, dlogits)
            for k, g in grads.items():
                v = velocity[k]
                v *= tc.momentum
                v -= tc.learning_rate * g
                model.params[k] += v
        row = {"epoch": epoch + 1, "train_loss": total / n, "val_loss": float("nan"), "val_bacc": float("nan")}
        if val is not None:
            vx, vh, vy = val
            vy = np.asarray(vy, dtype=np.intp)
            vlogits = predict_logits(model, vx, vh if tc.use_injection else None)
            row["val_loss"] = batch_cross_entropy(vlogits, vy)[0]
            row["val_bacc"] = balanced_accuracy(vlogits.argmax(axis=1), vy)
        history.append(row)
    return model, history


def write_history(path: str | os.PathLike, history: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss,val_bacc\n")
        for r in history:
            fh.write(f"{r['epoch']},{r['train_loss']!r},{r['val_loss']!r},{r['val_bacc']!r}\n")


# -- gradient checking --------------------------------------------------------


def _sample_loss(m: HybridModel, img, hand, label) -> float:
    logits = forward_batch(m, img, hand)[0][0]
    return cross_entropy(logits, label)


def _min_preactivation(m, img, hand) -> float:
    _, _, cache = forward_batch(m, img, hand, keep_cache=True)
    return min(float(np.min(np.abs(z))) for z in cache["pre_acts"])


def gradient_check(
    m: HybridModel,
    sample,
    eps: float = 1e-5,
    n_coords: int = 200,
    n_injection: int = 50,
    seed: int = 0,
    layers: Sequence[str] | None = None,
    max_resample: int = 100,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``sample`` is ``(image, handcrafted, label)``. If any pre-activation lies
    within ``10 * eps`` of a ReLU kink the image is jittered (seeded) and
    retried. Coordinates are drawn at random; at least ``n_injection`` of them
    come from the fc1 rows that receive the handcrafted vector (unless
    ``layers`` restricts the check to other parameters).

    The kink-free precondition gets harder to meet as the number of
    pre-activations grows; large inputs may exhaust ``max_resample`` and raise
    RuntimeError.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    img, hand, label = sample
    img = np.asarray(img, dtype=np.float64)
    hand = None if hand is None else np.asarray(getattr(hand, "values", hand), dtype=np.float64)
    if not m.use_injection:
        hand = None
    rng = _rng(seed)
    for _ in range(max_resample):
        if _min_preactivation(m, img, hand) >= 10 * eps:
            break
        img = img + rng.normal(0.0, 1e-3, img.shape)
    else:
        raise RuntimeError("could not find an evaluation point away from ReLU kinks")

    logits, _, cache = forward_batch(m, img, hand, keep_cache=True)
    _, dlogits = batch_cross_entropy(logits, np.array([int(label)]))
    grads = backward_batch(m, cache, dlogits)

    names = list(layers) if layers is not None else list(m.params)
    coords: list[tuple[str, int]] = []
    if layers is None or "fc1_w" in names:
        e = m.config.conv_embed_dim
        inj = m.params["fc1_w"][e:]
        flat = rng.choice(inj.size, size=min(n_injection, inj.size), replace=False)
        coords += [("fc1_w", e * m.config.fc_hidden + int(k)) for k in flat]
    sizes = np.array([m.params[k].size for k in names])
    remaining = max(n_coords - len(coords), 0)
    picks = rng.choice(int(sizes.sum()), size=min(remaining, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat in picks:
        li = int(np.searchsorted(offsets, flat, side="right") - 1)
        coords.append((names[li], int(flat - offsets[li])))

    worst = 0.0
    for name, k in coords:
        arr = m.params[name].reshape(-1)
        orig = arr[k]
        arr[k] = orig + eps
        lp = _sample_loss(m, img, hand, label)
        arr[k] = orig - eps
        lm = _sample_loss(m, img, hand, label)
        arr[k] = orig
        g_fd = (lp - lm) / (2 * eps)
        g_a = grads[name].reshape(-1)[k]
        err = abs(g_a - g_fd) / max(abs(g_a), abs(g_fd), 1e-8)
        worst = max(worst, err)
    return worst


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(m: HybridModel, path: str | os.PathLike) -> None:
    """Binary layout: ``HYBN``, uint32 version, uint32 config length, config
    JSON (UTF-8), then each parameter tensor in registry order as
    little-endian float64."""
    meta = json.dumps({"config": json.loads(m.config.to_json()), "use_injection": m.use_injection,
                       "params": [[k, list(v.shape)] for k, v in m.params.items()]}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
        fh.write(meta)
        for v in m.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path: str | os.PathLike) -> HybridModel:
    raw = open(path, "rb").read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a hybrid model checkpoint")
    version, n = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(raw[12 : 12 + n])
    cfg = HybridModelConfig.from_json(json.dumps(meta["config"]))
    pos = 12 + n
    params = {}
    for name, shape in meta["params"]:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * count
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return HybridModel(cfg, params, bool(meta["use_injection"]))
