"""SimpleCNN encoder/classifier in plain numpy with hand-written backprop.

Architecture: conv(k x k, 3 -> C) -> ReLU -> [feature-map tap] -> 2x2 max-pool
-> flatten -> fc1 -> ReLU -> [feature] -> fc2 -> logits.

The encoder (conv + fc1) plays the role of E_L / E_G and fc2 is the classifier
head.  The encoder is split in two stages so intervention can re-enter at the
feature-map tap: ``conv_stage`` produces the map, ``tail_stage`` takes it to
the feature.  Every stage has a matching ``*_backward``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .container import ContainerError, read_container, write_container

PARAM_NAMES = ("conv_w", "conv_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Arch:
    image_size: tuple[int, int] = (10, 10)
    in_channels: int = 3
    conv_channels: int = 16
    kernel: int = 5
    feature_dim: int = 64
    num_classes: int = 10

    @property
    def map_size(self) -> tuple[int, int]:
        H, W = self.image_size
        return H - self.kernel + 1, W - self.kernel + 1

    @property
    def flat_dim(self) -> int:
        h, w = self.map_size
        return self.conv_channels * (h // 2) * (w // 2)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        c, k = self.conv_channels, self.kernel
        return {
            "conv_w": (c, self.in_channels, k, k), "conv_b": (c,),
            "fc1_w": (self.flat_dim, self.feature_dim), "fc1_b": (self.feature_dim,),
            "fc2_w": (self.feature_dim, self.num_classes), "fc2_b": (self.num_classes,),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Arch":
        return cls(**{**d, "image_size": tuple(d["image_size"])})


# conv 3->2, feature width 4: small enough for exhaustive finite differences
TINY_ARCH = Arch(image_size=(6, 6), conv_channels=2, kernel=3, feature_dim=4, num_classes=3)


@dataclass(frozen=True)
class ModelParams:
    arch: Arch
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def check_compatible(self, other: "ModelParams | dict") -> None:
        theirs = other.tensors if isinstance(other, ModelParams) else other
        if set(theirs) != set(self.tensors):
            raise ValueError(f"tensor names differ: {sorted(theirs)} vs {sorted(self.tensors)}")
        for name, t in self.tensors.items():
            if np.shape(theirs[name]) != t.shape:
                raise ValueError(f"{name}: shape {np.shape(theirs[name])} vs {t.shape}")

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in PARAM_NAMES])

    def equals(self, other: "ModelParams") -> bool:
        return self.arch == other.arch and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in PARAM_NAMES)


def init_params(seed: int, arch: Arch = Arch()) -> ModelParams:
    """He-uniform weights, U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases zero."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.shapes().items():
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name == "conv_w" else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(arch, tensors)


def zeros_like(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


@dataclass
class FeatureBundle:
    feature_map: np.ndarray   # N x h x w x C, post-ReLU, pre-pool
    feature: np.ndarray       # N x feature_dim
    logits: np.ndarray        # N x num_classes
    cache: dict = field(default_factory=dict, repr=False)


# --- stages ---------------------------------------------------------------

@lru_cache(maxsize=8)
def _im2col_index(arch: Arch) -> np.ndarray:
    """Flat gather index: row = output position, column = (channel, ky, kx)."""
    H, W = arch.image_size
    oh, ow = arch.map_size
    k, c = arch.kernel, arch.in_channels
    oy, ox, ch, ky, kx = np.meshgrid(np.arange(oh), np.arange(ow), np.arange(c),
                                     np.arange(k), np.arange(k), indexing="ij")
    return (((oy + ky) * W + (ox + kx)) * c + ch).reshape(oh * ow, -1)


def conv_stage(params: ModelParams, images: np.ndarray):
    arch = params.arch
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (*arch.image_size, arch.in_channels):
        raise ValueError(f"images must be N x {arch.image_size[0]} x {arch.image_size[1]} "
                         f"x {arch.in_channels}, got {images.shape}")
    n = images.shape[0]
    oh, ow = arch.map_size
    cols = np.take(images.reshape(n, -1), _im2col_index(arch), axis=1).reshape(n * oh * ow, -1)
    w = params["conv_w"].reshape(arch.conv_channels, -1)
    pre = (cols @ w.T + params["conv_b"]).reshape(n, oh, ow, -1)
    fmap = np.maximum(pre, 0.0)
    return fmap, {"cols": cols, "pre": pre}


def conv_backward(params: ModelParams, cache: dict, d_fmap: np.ndarray) -> dict[str, np.ndarray]:
    arch = params.arch
    dpre = np.where(cache["pre"] > 0, d_fmap, 0.0)
    dpre = dpre.reshape(-1, arch.conv_channels)
    dw = (dpre.T @ cache["cols"]).reshape(params["conv_w"].shape)
    return {"conv_w": dw, "conv_b": dpre.sum(axis=0)}


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def tail_stage(params: ModelParams, fmap: np.ndarray):
    """2x2 max-pool -> flatten -> fc1 -> ReLU.  Ties route to the first max."""
    n, h, w, c = fmap.shape
    if (h, w, c) != (*params.arch.map_size, params.arch.conv_channels):
        raise ValueError(f"feature map shape {fmap.shape[1:]} does not match architecture")
    views = [fmap[:, dy:h - h % 2:2, dx:w - w % 2:2] for dy, dx in _POOL_OFFSETS]
    pooled = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))
    flat = pooled.reshape(n, -1)
    pre = flat @ params["fc1_w"] + params["fc1_b"]
    return np.maximum(pre, 0.0), {"fmap": fmap, "pooled": pooled, "flat": flat, "pre": pre}


def tail_backward(params: ModelParams, cache: dict, d_feature: np.ndarray):
    """Returns (grads for fc1, gradient w.r.t. the input feature map)."""
    dpre = np.where(cache["pre"] > 0, d_feature, 0.0)
    grads = {"fc1_w": cache["flat"].T @ dpre, "fc1_b": dpre.sum(axis=0)}
    fmap, pooled = cache["fmap"], cache["pooled"]
    dpooled = (dpre @ params["fc1_w"].T).reshape(pooled.shape)
    h, w = fmap.shape[1:3]
    dmap = np.zeros(fmap.shape)
    taken = np.zeros(pooled.shape, dtype=bool)
    for dy, dx in _POOL_OFFSETS:
        sl = (slice(None), slice(dy, h - h % 2, 2), slice(dx, w - w % 2, 2))
        sel = (fmap[sl] == pooled) & ~taken
        taken |= sel
        dmap[sl] = np.where(sel, dpooled, 0.0)
    return grads, dmap


def classify_feature(params: ModelParams, feature: np.ndarray) -> np.ndarray:
    """Apply only the classifier head (fc2)."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 2 or feature.shape[1] != params.arch.feature_dim:
        raise ValueError(f"feature width {feature.shape[-1]} != {params.arch.feature_dim}")
    return feature @ params["fc2_w"] + params["fc2_b"]


def head_backward(params: ModelParams, feature: np.ndarray, d_logits: np.ndarray):
    grads = {"fc2_w": feature.T @ d_logits, "fc2_b": d_logits.sum(axis=0)}
    return grads, d_logits @ params["fc2_w"].T


def encode(params: ModelParams, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cache-free encoder pass: (feature_map, feature)."""
    fmap, _ = conv_stage(params, images)
    feat, _ = tail_stage(params, fmap)
    return fmap, feat


def forward(params: ModelParams, images: np.ndarray) -> FeatureBundle:
    fmap, conv_cache = conv_stage(params, images)
    feat, tail_cache = tail_stage(params, fmap)
    logits = classify_feature(params, feat)
    return FeatureBundle(fmap, feat, logits, {"conv": conv_cache, "tail": tail_cache})


def backward(params: ModelParams, bundle: FeatureBundle, d_logits=None, d_feature=None,
             d_fmap=None) -> dict[str, np.ndarray]:
    """Backprop upstream gradients that enter at any of the three taps."""
    grads = zeros_like(params)
    if d_logits is not None:
        g, df = head_backward(params, bundle.feature, d_logits)
        grads.update(g)
        d_feature = df if d_feature is None else d_feature + df
    if d_feature is not None:
        g, dm = tail_backward(params, bundle.cache["tail"], d_feature)
        grads.update(g)
        d_fmap = dm if d_fmap is None else d_fmap + dm
    if d_fmap is not None:
        grads.update(conv_backward(params, bundle.cache["conv"], d_fmap))
    return grads


def add_grads(acc: dict[str, np.ndarray], more: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    for k, v in more.items():
        acc[k] = acc[k] + v
    return acc


# --- loss + optimiser -----------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE against integer labels; returns (loss, d loss / d logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels outside [0, {c})")
    lp = log_softmax(logits)
    loss = -lp[np.arange(n), labels].mean()
    d = np.exp(lp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float,
             weight_decay: float = 0.0) -> ModelParams:
    """p <- p - lr * (g + weight_decay * p), returning new params."""
    params.check_compatible(grads)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    new = {k: p - lr * (grads[k] + weight_decay * p) for k, p in params.tensors.items()}
    return ModelParams(params.arch, new)


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(path, params: ModelParams, seed: int | None = None, extra: dict | None = None):
    meta = {"arch": params.arch.to_dict(), "seed": seed, "extra": extra or {}}
    return write_container(path, params.tensors, meta, kind="checkpoint")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    arrays, meta = read_container(path, kind="checkpoint")
    try:
        arch = Arch.from_dict(meta["arch"])
        params = ModelParams(arch, {k: arrays[k] for k in PARAM_NAMES})
        params.check_compatible(arch_shapes_as_arrays(arch))
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError(f"{path}: malformed checkpoint") from exc
    return params, meta


def arch_shapes_as_arrays(arch: Arch) -> dict[str, np.ndarray]:
    return {k: np.empty(s) for k, s in arch.shapes().items()}
