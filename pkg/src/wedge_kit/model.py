"""A tiny per-pixel segmenter with hand-written gradients.

Architecture (all "same" padded, NHWC):

    stage 1: 1x1 conv  C_in -> C_f, tanh   (input centred by -0.5)
    stage 2: 3x3 conv  C_f  -> C_f, tanh
    head   : 1x1 conv  C_f  -> K,   softmax

tanh gives zero-centred features, so an orthogonal projection of them
stays inside the range the next stage saw during training; it is also
smooth for finite-difference checks.
Style injection may replace the output of stage 1 and/or stage 2 with an
affine map of it. Within one iteration that map is a constant: gradients
pass through its linear part but not into the SVD that produced it.

Weights are stored as float32; forward and backward run in float64.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .features import IGNORE, LabelMap, ProbabilityMap, ShapeError
from .injection import AffineTransform, InjectionConfig, injection_transform
from .pseudo_label import PseudoLabelConfig

STAGES = (1, 2)
INPUT_OFFSET = 0.5
PARAM_NAMES = ("w1", "b1", "w2", "b2", "wc", "bc")
CHECKPOINT_MAGIC = b"WDGCKPT\x00"
CHECKPOINT_VERSION = 1


class EmptySupervisionError(ValueError):
    """Every pixel is IGNORE, so the loss has no terms."""


def act(z):
    return np.tanh(z)


def act_grad(z):
    t = np.tanh(z)
    return 1.0 - t * t


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def im2col3(x):
    """``(B, H, W, C)`` -> ``(B, H, W, 9C)`` zero-padded 3x3 neighbourhoods, (dy, dx, c) order."""
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.concatenate([xp[:, dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)], axis=-1)


def col2im3(cols, c):
    b, h, w, _ = cols.shape
    cols = cols.reshape(b, h, w, 9, c)
    out = np.zeros((b, h + 2, w + 2, c))
    for k in range(9):
        dy, dx = divmod(k, 3)
        out[:, dy : dy + h, dx : dx + w] += cols[:, :, :, k]
    return out[:, 1:-1, 1:-1]


@dataclass
class ToySegmenter:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wc: np.ndarray
    bc: np.ndarray

    @classmethod
    def init(cls, in_channels: int = 3, feat_channels: int = 8, num_classes: int = 5, seed: int = 0) -> "ToySegmenter":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        rng = np.random.default_rng(seed)

        def u(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(np.float32)

        f = feat_channels
        return cls(
            w1=u((in_channels, f), in_channels),
            b1=np.zeros(f, np.float32),
            w2=u((3, 3, f, f), 9 * f),
            b2=np.zeros(f, np.float32),
            wc=u((f, num_classes), f),
            bc=np.zeros(num_classes, np.float32),
        )

    def __post_init__(self):
        for name in PARAM_NAMES:
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite values in {name}")
            setattr(self, name, arr)

    @property
    def in_channels(self) -> int:
        return self.w1.shape[0]

    @property
    def feat_channels(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.wc.shape[1]

    def params(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_params(self, params: Dict[str, np.ndarray]) -> "ToySegmenter":
        return replace(self, **{k: np.asarray(v, dtype=np.float32) for k, v in params.items()})

    def copy(self) -> "ToySegmenter":
        return self.with_params({k: v.copy() for k, v in self.params().items()})


# one dict per image: stage -> frozen transform
InjectionContext = List[Dict[int, AffineTransform]]


@dataclass
class ForwardCache:
    x: np.ndarray
    z1: np.ndarray
    g1: np.ndarray
    col2: np.ndarray
    z2: np.ndarray
    g2: np.ndarray
    probs: np.ndarray
    context: Optional[InjectionContext] = None


def _params64(model, params):
    p = model.params() if params is None else params
    return {k: np.asarray(v, dtype=np.float64) for k, v in p.items()}


def _inject_stage(feats, stage, context, web_feats, cfg, rng, draws):
    """Apply (or build then apply) the stage transform for every image in the batch."""
    if context is None and web_feats is None:
        return feats
    out = feats.copy()
    b, h, w, c = feats.shape
    for i in range(b):
        if context is not None and web_feats is None:
            t = context[i].get(stage)
        elif draws[i] and stage in cfg.injection_points:
            t = injection_transform(feats[i].reshape(-1, c), web_feats[i].reshape(-1, c), cfg)
            context[i][stage] = t
        else:
            t = None
        if t is not None:
            out[i] = t.apply(feats[i].reshape(-1, c)).reshape(h, w, c)
    return out


def forward_batch(
    model: ToySegmenter,
    x: np.ndarray,
    web: Optional[np.ndarray] = None,
    injection: Optional[InjectionConfig] = None,
    rng: Optional[np.random.Generator] = None,
    context: Optional[InjectionContext] = None,
    params: Optional[Dict[str, np.ndarray]] = None,
) -> ForwardCache:
    """Forward a ``(B, H, W, C_in)`` batch.

    With ``web`` and an active ``injection`` config, image ``i`` takes the
    style of ``web[i]``; the transforms built on the way are returned in
    ``cache.context``. Passing ``context`` instead replays fixed transforms.
    """
    x = np.asarray(x, dtype=np.float64) - INPUT_OFFSET
    if x.ndim != 4 or x.shape[-1] != model.in_channels:
        raise ShapeError(f"expected (B, H, W, {model.in_channels}) input, got {x.shape}")
    p = _params64(model, params)
    live = web is not None and injection is not None and injection.method != "none"
    draws = None
    web1 = None
    if live:
        web = np.asarray(web, dtype=np.float64) - INPUT_OFFSET
        if web.shape[0] != x.shape[0] or web.shape[-1] != model.in_channels:
            raise ShapeError(f"web batch {web.shape} does not pair with source batch {x.shape}")
        if rng is None:
            rng = np.random.default_rng(0)
        draws = rng.random(x.shape[0]) < injection.probability
        context = [dict() for _ in range(x.shape[0])]
        web1 = act(web @ p["w1"] + p["b1"])

    z1 = x @ p["w1"] + p["b1"]
    g1 = _inject_stage(act(z1), 1, context, web1, injection, rng, draws)
    col2 = im2col3(g1)
    z2 = col2 @ p["w2"].reshape(-1, p["w2"].shape[-1]) + p["b2"]
    web2 = None
    if live and 2 in injection.injection_points:
        web2 = act(im2col3(web1) @ p["w2"].reshape(-1, p["w2"].shape[-1]) + p["b2"])
    g2 = _inject_stage(act(z2), 2, context, web2, injection, rng, draws)
    probs = softmax(g2 @ p["wc"] + p["bc"])
    return ForwardCache(x, z1, g1, col2, z2, g2, probs, context)


def forward(
    model: ToySegmenter,
    image: np.ndarray,
    injection: Optional[InjectionConfig] = None,
    web_image: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> ProbabilityMap:
    """Class probabilities for one ``(H, W, C_in)`` image."""
    web = None if web_image is None else np.asarray(web_image)[None]
    cache = forward_batch(model, np.asarray(image)[None], web, injection, rng)
    return ProbabilityMap(cache.probs[0])


def _pixel_nll(probs, labels):
    labels = np.asarray(labels)
    if probs.shape[:-1] != labels.shape:
        raise ShapeError(f"probabilities {probs.shape[:-1]} vs labels {labels.shape}")
    valid = labels != IGNORE
    idx = np.where(valid, labels, 0).astype(np.intp)
    p_true = np.take_along_axis(probs, idx[..., None], axis=-1)[..., 0]
    nll = -np.log(np.maximum(p_true, 1e-300))
    return nll, valid


def seg_loss(probs, labels) -> float:
    """Mean negative log-likelihood of the true class over non-IGNORE pixels."""
    pr = probs.data if isinstance(probs, ProbabilityMap) else np.asarray(probs, dtype=np.float64)
    lb = labels.data if isinstance(labels, LabelMap) else labels
    nll, valid = _pixel_nll(pr, lb)
    n = int(valid.sum())
    if n == 0:
        raise EmptySupervisionError("all pixels are IGNORE")
    return float(nll[valid].sum(dtype=np.float64) / n)


def combined_loss(p_src, y_src, p_web, y_web) -> float:
    """Source loss plus pseudo-labelled web loss; an all-IGNORE web map contributes 0."""
    try:
        web_term = seg_loss(p_web, y_web)
    except EmptySupervisionError:
        web_term = 0.0
    return seg_loss(p_src, y_src) + web_term


def backward(
    model: ToySegmenter,
    cache: ForwardCache,
    labels: np.ndarray,
    params: Optional[Dict[str, np.ndarray]] = None,
):
    """Loss and analytic gradients of the pooled seg loss for a cached forward pass.

    Returns ``(loss, grads)``; with no supervised pixel the loss is 0 and all
    gradients are zero.
    """
    p = _params64(model, params)
    nll, valid = _pixel_nll(cache.probs, labels)
    n = int(valid.sum())
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    if n == 0:
        return 0.0, grads
    loss = float(nll[valid].sum() / n)

    k = cache.probs.shape[-1]
    idx = np.where(valid, labels, 0).astype(np.intp)
    d_logits = cache.probs.copy()
    np.put_along_axis(d_logits, idx[..., None], np.take_along_axis(d_logits, idx[..., None], -1) - 1.0, -1)
    d_logits *= valid[..., None] / n

    f = cache.g2.shape[-1]
    grads["wc"] = cache.g2.reshape(-1, f).T @ d_logits.reshape(-1, k)
    grads["bc"] = d_logits.reshape(-1, k).sum(axis=0)
    d_g2 = d_logits @ p["wc"].T
    d_f2 = _through_injection(d_g2, 2, cache.context)
    d_z2 = d_f2 * act_grad(cache.z2)
    w2 = p["w2"]
    grads["w2"] = (cache.col2.reshape(-1, 9 * f).T @ d_z2.reshape(-1, f)).reshape(w2.shape)
    grads["b2"] = d_z2.reshape(-1, f).sum(axis=0)
    d_g1 = col2im3(d_z2 @ w2.reshape(-1, f).T, f)
    d_f1 = _through_injection(d_g1, 1, cache.context)
    d_z1 = d_f1 * act_grad(cache.z1)
    c_in = cache.x.shape[-1]
    grads["w1"] = cache.x.reshape(-1, c_in).T @ d_z1.reshape(-1, f)
    grads["b1"] = d_z1.reshape(-1, f).sum(axis=0)
    return loss, grads


def _through_injection(d_out, stage, context):
    if context is None:
        return d_out
    d_in = d_out.copy()
    for i, transforms in enumerate(context):
        t = transforms.get(stage)
        if t is not None:
            d_in[i] = d_out[i] @ t.matrix.T
    return d_in


def predict(model: ToySegmenter, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Class probabilities for a stack of images, ``(n, H, W, K)``."""
    out = [forward_batch(model, images[i : i + batch_size]).probs for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# training


STAGE_NAMES = ("source_only", "stage1_SI", "stage2_PL")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    iterations: int = 2000
    seed: int = 0
    stage: str = "source_only"
    injection: InjectionConfig = field(default_factory=InjectionConfig)
    tau: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    classifier_only: bool = False
    lr_power: float = 0.9  # poly decay lr * (1 - t/T)^power; 0 keeps lr constant

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.lr_power < 0:
            raise ValueError("lr_power must be >= 0")
        if self.stage not in STAGE_NAMES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class LabeledSet:
    images: np.ndarray  # (n, H, W, C) float in [0, 1]
    labels: np.ndarray  # (n, H, W) uint8, IGNORE allowed

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.images[idx], self.labels[idx])


@dataclass(frozen=True)
class UnlabeledSet:
    """Web images as used by stage 1: style references only, no labels reachable."""

    images: np.ndarray

    def __len__(self):
        return len(self.images)


@dataclass
class LossTrace:
    loss_src: List[float] = field(default_factory=list)
    loss_web: List[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss_src", "loss_web"])
            for i, (a, b) in enumerate(zip(self.loss_src, self.loss_web)):
                w.writerow([i, repr(float(a)), repr(float(b))])


class SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=5e-4, frozen=()):
        self.params = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.frozen = set(frozen)
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, grads):
        for k, w in self.params.items():
            if k in self.frozen:
                continue
            g = grads[k] + self.weight_decay * w
            v = self.velocity[k]
            v *= self.momentum
            v += g
            w -= self.lr * v


def train(model: ToySegmenter, source: LabeledSet, web, cfg: TrainConfig):
    """Train a copy of ``model``; returns ``(trained_model, LossTrace)``.

    ``source_only`` ignores ``web``. ``stage1_SI`` pairs every source image
    with a uniformly drawn web image per iteration and uses it only as a
    style reference (``web`` must be an :class:`UnlabeledSet`).
    ``stage2_PL`` additionally draws a batch of pseudo-labelled web images
    (``web`` must be a :class:`LabeledSet`), each styled by another randomly
    drawn web image, and minimises the sum of both losses. Optimizer state
    starts fresh on every call.
    """
    if len(source) == 0:
        raise ValueError("source dataset is empty")
    if cfg.stage == "stage1_SI" and not isinstance(web, UnlabeledSet):
        raise TypeError("stage1_SI takes an UnlabeledSet of web images")
    if cfg.stage == "stage2_PL" and not isinstance(web, LabeledSet):
        raise TypeError("stage2_PL takes a LabeledSet of pseudo-labelled web images")
    if cfg.stage != "source_only" and len(web) == 0:
        raise ValueError("web dataset is empty")

    rng = np.random.default_rng(cfg.seed)
    frozen = PARAM_NAMES[:4] if cfg.classifier_only else ()
    opt = SGD(model.params(), cfg.learning_rate, cfg.momentum, cfg.weight_decay, frozen)
    injection = cfg.injection if cfg.stage != "source_only" else None
    trace = LossTrace()
    bs = cfg.batch_size
    for it in range(cfg.iterations):
        opt.lr = cfg.learning_rate * (1.0 - it / cfg.iterations) ** cfg.lr_power
        src_idx = rng.integers(0, len(source), bs)
        style = None
        if injection is not None:
            style = web.images[rng.integers(0, len(web), bs)]
        cache = forward_batch(model, source.images[src_idx], style, injection, rng, params=opt.params)
        loss_src, grads = backward(model, cache, source.labels[src_idx], params=opt.params)
        loss_web = 0.0
        if cfg.stage == "stage2_PL":
            web_idx = rng.integers(0, len(web), bs)
            web_style = web.images[rng.integers(0, len(web), bs)]
            wc = forward_batch(model, web.images[web_idx], web_style, injection, rng, params=opt.params)
            loss_web, g_web = backward(model, wc, web.labels[web_idx], params=opt.params)
            for k in grads:
                grads[k] += g_web[k]
        trace.loss_src.append(loss_src)
        trace.loss_web.append(loss_web)
        opt.step(grads)
    return model.with_params(opt.params), trace


# ---------------------------------------------------------------------------
# checkpoints
#
# little-endian layout:
#   8 bytes  magic b"WDGCKPT\0"
#   u32      format version (1)
#   u32      tensor count T
#   T times: u16 name length, name (utf-8), u8 ndim, ndim x u32 dims
#   float32 data of every tensor, in table order, C order


def save_checkpoint(model: ToySegmenter, path) -> None:
    params = model.params()
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(params))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    for arr in params.values():
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> ToySegmenter:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2 : pos + 2 + n].decode("utf-8")
        pos += 2 + n
        (ndim,) = struct.unpack_from("<B", buf, pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
        pos += 1 + 4 * ndim
        table.append((name, shape))
    params = {}
    for name, shape in table:
        size = int(np.prod(shape)) * 4
        params[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
    if set(params) != set(PARAM_NAMES):
        raise ValueError(f"{path}: unexpected tensors {sorted(params)}")
    return ToySegmenter(**params)
