"""Background-driven intervention.

Backgrounds are cut out of images by zeroing the detected object box, paired
with random samples from the same batch, encoded by the frozen global encoder
and blended into the local features (or feature maps).  The blended features
keep the label of the image they came from, so every background ends up
associated with every class.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .datagen import ImageSet, LabeledImage

LEVELS = ("GI_F", "GI_FM")


@dataclass(frozen=True)
class InterventionConfig:
    alpha: float = 0.7
    level: str = "GI_FM"
    enabled: bool = True
    background_source: str = "batch_shuffle"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}, got {self.level!r}")
        if self.background_source != "batch_shuffle":
            raise ValueError(f"unsupported background source {self.background_source!r}")


@dataclass
class BackgroundExtractor:
    """Where object boxes come from.

    ``oracle_mask`` uses the box stored on each image (derived from its exact
    mask); ``bbox_file`` looks boxes up by image id in a table that an
    external detector would produce.
    """

    mode: str = "oracle_mask"
    bbox_table: dict[int, tuple[int, int, int, int]] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("oracle_mask", "bbox_file"):
            raise ValueError(f"unknown extractor mode {self.mode!r}")
        if self.mode == "bbox_file" and self.bbox_table is None:
            raise ValueError("bbox_file mode needs a bbox_table")

    @classmethod
    def from_file(cls, path) -> "BackgroundExtractor":
        return cls("bbox_file", read_bbox_table(path))

    def boxes(self, images: ImageSet, ids=None) -> np.ndarray:
        if self.mode == "oracle_mask":
            return images.bboxes
        ids = range(len(images)) if ids is None else ids
        try:
            return np.array([self.bbox_table[int(i)] for i in ids], dtype=np.int64).reshape(-1, 4)
        except KeyError as exc:
            raise KeyError(f"no bounding box for image id {exc.args[0]}") from None

    def box(self, image: LabeledImage, image_id: int | None = None) -> tuple[int, int, int, int]:
        if self.mode == "oracle_mask":
            if image.bbox is None:
                raise ValueError("oracle_mask mode needs image.bbox")
            return image.bbox
        if image_id is None or image_id not in self.bbox_table:
            raise KeyError(f"no bounding box for image id {image_id}")
        return self.bbox_table[image_id]


def read_bbox_table(path) -> dict[int, tuple[int, int, int, int]]:
    """Parse ``image_id x1 y1 x2 y2`` lines; blank lines and ``#`` comments skipped."""
    table = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 integers, got {len(parts)} fields")
        i, x1, y1, x2, y2 = (int(p) for p in parts)
        table[i] = (x1, y1, x2, y2)
    return table


def write_bbox_table(path, bboxes, ids=None) -> Path:
    ids = range(len(bboxes)) if ids is None else ids
    lines = [f"{i} {x1} {y1} {x2} {y2}" for i, (x1, y1, x2, y2) in zip(ids, np.asarray(bboxes))]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def mask_boxes(pixels: np.ndarray, bboxes: np.ndarray) -> np.ndarray:
    """Batch form of background extraction: zero each image inside its box."""
    n, H, W = pixels.shape[:3]
    bboxes = np.asarray(bboxes).reshape(n, 4)
    xs = np.arange(W)[None, None, :]
    ys = np.arange(H)[None, :, None]
    x1, y1, x2, y2 = (bboxes[:, j, None, None] for j in range(4))
    inside = (xs >= x1) & (xs <= x2) & (ys >= y1) & (ys <= y2)
    keep = (~inside).astype(pixels.dtype)
    return pixels * keep.reshape(keep.shape + (1,) * (pixels.ndim - 3))


def extract_background(image: LabeledImage, extractor: BackgroundExtractor | None = None,
                       image_id: int | None = None) -> np.ndarray:
    extractor = extractor or BackgroundExtractor()
    box = extractor.box(image, image_id)
    return mask_boxes(image.pixels[None], np.asarray(box)[None])[0]


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_backgrounds(batch: ImageSet, seed, extractor: BackgroundExtractor | None = None,
                       ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Backgrounds of a uniformly random permutation of the batch.

    Returns ``(backgrounds, perm)``: row ``i`` is the background of image
    ``perm[i]``.  Self-pairing is allowed.
    """
    n = len(batch)
    if n < 2:
        raise ValueError("need a batch of at least 2 images to pair backgrounds")
    extractor = extractor or BackgroundExtractor()
    perm = _rng(seed).permutation(n)
    boxes = extractor.boxes(batch, ids)
    return mask_boxes(batch.pixels[perm], boxes[perm]), perm


def mix_features(f_i: np.ndarray, f_b: np.ndarray, alpha: float) -> np.ndarray:
    """alpha * f_i + (1 - alpha) * f_b, elementwise."""
    if np.shape(f_i) != np.shape(f_b):
        raise ValueError(f"cannot mix shapes {np.shape(f_i)} and {np.shape(f_b)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    return alpha * np.asarray(f_i) + (1.0 - alpha) * np.asarray(f_b)


def interventional_feature(params: M.ModelParams, mixed: np.ndarray, level: str):
    """Bring a mixed tensor to feature width: identity for GI_F, local tail for GI_FM.

    Returns ``(feature, tail_cache)``; the cache is None for GI_F.
    """
    if level == "GI_F":
        return np.asarray(mixed, dtype=np.float64), None
    if level == "GI_FM":
        return M.tail_stage(params, mixed)
    raise ValueError(f"unknown intervention level {level!r}")


def intervention_loss(local_params: M.ModelParams, f_inv: np.ndarray, labels,
                      level: str = "GI_F") -> float:
    """Mean cross-entropy of the local head on interventional features."""
    feat, _ = interventional_feature(local_params, f_inv, level)
    loss, _ = M.softmax_cross_entropy(M.classify_feature(local_params, feat), labels)
    return loss


def mutual_information_bits(x, y) -> float:
    """Plug-in estimate of I(X; Y) in bits from paired discrete samples."""
    x = np.asarray(x)
    y = np.asarray(y)
    _, xi = np.unique(x, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    joint = np.zeros((xi.max() + 1, yi.max() + 1))
    np.add.at(joint, (xi, yi), 1.0)
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log2(joint[nz] / (px @ py)[nz])))


def injected_background_ids(background_ids, batch_size: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Simulate one epoch of batch-shuffle pairing.

    Returns ``(order, injected)``: the epoch's example order and, for each
    position, the background colour id that would be injected into it.
    """
    rng = _rng(seed)
    background_ids = np.asarray(background_ids)
    order = rng.permutation(len(background_ids))
    injected = np.empty_like(background_ids)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        injected[start:start + len(idx)] = background_ids[idx[rng.permutation(len(idx))]]
    return order, injected
