"""Synthetic colour-background digits with a tunable background/label shortcut.

Each image is a grayscale glyph pasted at a random offset onto a solid
background colour.  In the training split, class ``c`` gets ``palette[c]``
with probability ``correlation_strength`` and a uniformly chosen other colour
otherwise; the OOD test split draws the colour uniformly from the palette.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .container import ContainerError, read_container, write_container

# matplotlib "tab10": ten well separated, mid-luminance colours
TAB10 = (
    (0.122, 0.467, 0.706), (1.000, 0.498, 0.055), (0.173, 0.627, 0.173),
    (0.839, 0.153, 0.157), (0.580, 0.404, 0.741), (0.549, 0.337, 0.294),
    (0.890, 0.467, 0.761), (0.498, 0.498, 0.498), (0.737, 0.741, 0.133),
    (0.090, 0.745, 0.812),
)

MASK_THRESHOLD = 0.3
GLYPH_SIZE = 8


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 10
    image_size: tuple[int, int] = (10, 10)
    palette: tuple[tuple[float, float, float], ...] = TAB10
    correlation_strength: float = 0.9
    split: str = "train"
    seed: int = 0
    num_samples: int = 12000

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["palette"] = [list(c) for c in self.palette]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        d["palette"] = tuple(tuple(c) for c in d["palette"])
        return cls(**d)


@dataclass
class LabeledImage:
    pixels: np.ndarray          # H x W x 3 in [0, 1]
    label: int
    object_mask: np.ndarray     # H x W bool
    bbox: tuple[int, int, int, int]   # (x1, y1, x2, y2), inclusive
    background_color_id: int


@dataclass
class ImageSet:
    """Array-backed collection of LabeledImage records sharing one spec."""

    spec: DatasetSpec
    pixels: np.ndarray          # N x H x W x 3 float64
    labels: np.ndarray          # N int64
    masks: np.ndarray           # N x H x W bool
    bboxes: np.ndarray          # N x 4 int64, (x1, y1, x2, y2)
    background_ids: np.ndarray  # N int64

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(
            pixels=self.pixels[i], label=int(self.labels[i]), object_mask=self.masks[i],
            bbox=tuple(int(v) for v in self.bboxes[i]),
            background_color_id=int(self.background_ids[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, indices) -> "ImageSet":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageSet(self.spec, self.pixels[idx], self.labels[idx], self.masks[idx],
                        self.bboxes[idx], self.background_ids[idx])

    def correlation(self) -> float:
        """Empirical P(background_color_id == label)."""
        return float(np.mean(self.background_ids == self.labels))


@dataclass
class ClientPartition:
    assignments: dict[int, list[int]]
    beta: float
    num_clients: int
    seed: int
    attempts: int = field(default=1, compare=False)

    def sizes(self) -> list[int]:
        return [len(self.assignments[k]) for k in range(self.num_clients)]


@lru_cache(maxsize=None)
def _sklearn_digits():
    from sklearn.datasets import load_digits

    d = load_digits()
    return d.images / 16.0, d.target.astype(np.int64)


def load_glyph_corpus(part: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """The 1797 bundled 8x8 scikit-learn digits, split 4:1 into disjoint pools.

    Every fifth glyph goes to the ``"test"`` pool so OOD images use unseen
    handwriting.
    """
    images, labels = _sklearn_digits()
    held_out = np.arange(len(labels)) % 5 == 0
    if part == "train":
        keep = ~held_out
    elif part == "test":
        keep = held_out
    elif part == "all":
        keep = np.ones_like(held_out)
    else:
        raise ValueError(f"unknown corpus part {part!r}")
    return images[keep].copy(), labels[keep].copy()


def _check_spec(spec: DatasetSpec) -> None:
    if len(spec.palette) < spec.num_classes:
        raise ValueError(f"palette has {len(spec.palette)} colours, need >= {spec.num_classes}")
    if not 0.0 <= spec.correlation_strength <= 1.0:
        raise ValueError(f"correlation_strength {spec.correlation_strength} outside [0, 1]")
    if spec.split not in ("train", "ood_test"):
        raise ValueError(f"unknown split {spec.split!r}")
    if spec.num_samples < 1:
        raise ValueError("num_samples must be positive")


def sample_background_ids(labels: np.ndarray, spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    n_colors = len(spec.palette)
    if spec.split == "ood_test":
        return rng.integers(0, n_colors, size=len(labels))
    keep = rng.random(len(labels)) < spec.correlation_strength
    # uniform over the n_colors - 1 colours that are not the preferred one
    other = rng.integers(0, n_colors - 1, size=len(labels))
    other = other + (other >= labels)
    return np.where(keep, labels, other).astype(np.int64)


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def generate_dataset(spec: DatasetSpec, base_digits=None) -> ImageSet:
    """Render ``spec.num_samples`` images from a grayscale glyph corpus.

    ``base_digits`` is ``(images, labels)`` with images ``n x h x w`` in
    [0, 1]; defaults to the train or test pool of the bundled corpus
    according to ``spec.split``.
    """
    _check_spec(spec)
    if base_digits is None:
        base_digits = load_glyph_corpus("train" if spec.split == "train" else "test")
    glyphs, glyph_labels = (np.asarray(a) for a in base_digits)
    if len(glyph_labels) == 0:
        raise ValueError("base digit corpus is empty")
    if glyph_labels.min() < 0 or glyph_labels.max() >= spec.num_classes:
        raise ValueError("base digit labels outside [0, num_classes)")
    H, W = spec.image_size
    gh, gw = glyphs.shape[1:]
    if gh > H or gw > W:
        raise ValueError(f"glyphs {gh}x{gw} do not fit a {H}x{W} canvas")

    rng = np.random.default_rng(spec.seed)
    n = spec.num_samples
    src = rng.integers(0, len(glyph_labels), size=n)
    oy = rng.integers(0, H - gh + 1, size=n)
    ox = rng.integers(0, W - gw + 1, size=n)
    labels = glyph_labels[src].astype(np.int64)
    bg_ids = sample_background_ids(labels, spec, rng)

    gray = np.zeros((n, H, W))
    rows = oy[:, None, None] + np.arange(gh)[None, :, None]
    cols = ox[:, None, None] + np.arange(gw)[None, None, :]
    gray[np.arange(n)[:, None, None], rows, cols] = glyphs[src]
    peak = gray.reshape(n, -1).max(axis=1)
    if np.any(peak <= 0):
        raise ValueError("corpus contains blank glyphs")
    masks = gray > MASK_THRESHOLD * peak[:, None, None]

    palette = np.asarray(spec.palette, dtype=np.float64)
    bg = palette[bg_ids][:, None, None, :]
    g = gray[..., None]
    # digit strokes are blended toward white; everything else is the exact colour
    pixels = np.where(masks[..., None], g + (1.0 - g) * bg, bg)
    pixels = np.ascontiguousarray(np.broadcast_to(pixels, (n, H, W, 3)))

    bboxes = np.array([tight_bbox(m) for m in masks], dtype=np.int64).reshape(n, 4)
    return ImageSet(spec, pixels, labels, masks, bboxes, bg_ids)


def _allot(labels: np.ndarray, num_clients: int, beta: float, rng) -> list[list[int]]:
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_clients, beta))
        cuts = (np.cumsum(props) * len(idx)).astype(np.int64)[:-1]
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].extend(part.tolist())
    return buckets


def dirichlet_partition(labels, num_clients: int, beta: float, seed: int,
                        max_retries: int = 100) -> ClientPartition:
    """Per-class Dirichlet(beta) split of example indices across clients.

    A draw that leaves some client empty is redrawn with ``seed + attempt``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if len(labels) == 0:
        raise ValueError("labels must be non-empty")
    if num_clients > len(labels):
        raise ValueError(f"{num_clients} clients for only {len(labels)} examples")
    for attempt in range(max_retries):
        rng = np.random.default_rng(seed + attempt)
        buckets = _allot(labels, num_clients, beta, rng)
        if all(buckets):
            return ClientPartition({k: sorted(b) for k, b in enumerate(buckets)},
                                   beta, num_clients, seed, attempts=attempt + 1)
    raise RuntimeError(f"no partition without empty clients after {max_retries} draws")


def save_dataset(path, images: ImageSet, partition: ClientPartition | None = None):
    arrays = {
        "pixels": images.pixels, "labels": images.labels, "masks": images.masks,
        "bboxes": images.bboxes, "background_ids": images.background_ids,
    }
    meta = {"spec": images.spec.to_dict(), "partition": None}
    if partition is not None:
        owner = np.full(len(images), -1, dtype=np.int64)
        for k, idx in partition.assignments.items():
            owner[idx] = k
        arrays["partition_owner"] = owner
        meta["partition"] = {"beta": partition.beta, "num_clients": partition.num_clients,
                             "seed": partition.seed, "attempts": partition.attempts}
    return write_container(path, arrays, meta, kind="dataset")


def load_dataset(path) -> tuple[ImageSet, ClientPartition | None]:
    arrays, meta = read_container(path, kind="dataset")
    try:
        spec = DatasetSpec.from_dict(meta["spec"])
        images = ImageSet(spec, arrays["pixels"], arrays["labels"], arrays["masks"],
                          arrays["bboxes"], arrays["background_ids"])
    except (KeyError, TypeError) as exc:
        raise ContainerError(f"{path}: malformed dataset container") from exc
    part = None
    if meta["partition"] is not None:
        pm = meta["partition"]
        owner = arrays["partition_owner"]
        part = ClientPartition(
            {k: np.flatnonzero(owner == k).tolist() for k in range(pm["num_clients"])},
            pm["beta"], pm["num_clients"], pm["seed"], attempts=pm["attempts"],
        )
    return images, part
