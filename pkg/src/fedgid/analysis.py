"""Diagnostics: Grad-CAM attention maps and a shared 2-D PCA of two models' features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import model as M


def cam_from_gradients(fmap: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """ReLU(sum_c mean_hw(grad_c) * A_c) for maps laid out N x h x w x C."""
    weights = grads.mean(axis=(1, 2))                       # N x C
    return np.maximum(np.einsum("nhwc,nc->nhw", fmap, weights), 0.0)


def normalize_cam(cam: np.ndarray) -> np.ndarray:
    """Per-map min-max scaling to [0, 1]; a flat map becomes all ones (or zeros if it is zero)."""
    lo = cam.min(axis=(1, 2), keepdims=True)
    hi = cam.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    flat = span <= 1e-12 * np.maximum(np.abs(hi), 1.0)
    out = (cam - lo) / np.where(flat, 1.0, span)
    return np.where(flat, (hi > 0).astype(cam.dtype), out)


def upsample_cam(cam: np.ndarray, image_size: tuple[int, int], kernel: int) -> np.ndarray:
    """Bilinear resample of an h x w map onto the H x W image grid.

    Map cell (i, j) sits at the centre of its receptive field, pixel
    (i + kernel // 2, j + kernel // 2); pixels beyond the outermost centres
    take the nearest edge value.
    """
    H, W = image_size
    off = kernel // 2
    yy, xx = np.meshgrid(np.arange(H) - off, np.arange(W) - off, indexing="ij")
    coords = np.stack([yy, xx]).astype(np.float64)
    return np.stack([ndimage.map_coordinates(c, coords, order=1, mode="nearest") for c in cam])


def gradcam(params: M.ModelParams, images: np.ndarray, target=None):
    """Grad-CAM over the conv feature map.

    Returns ``(heatmaps N x H x W in [0, 1], predicted labels, target labels)``;
    the target defaults to the predicted class.
    """
    fmap, _ = M.conv_stage(params, images)
    feat, tail_cache = M.tail_stage(params, fmap)
    logits = M.classify_feature(params, feat)
    pred = logits.argmax(axis=1)
    tgt = pred if target is None else np.broadcast_to(np.asarray(target), pred.shape)
    d_logits = np.zeros_like(logits)
    d_logits[np.arange(len(tgt)), tgt] = 1.0
    _, d_feat = M.head_backward(params, feat, d_logits)
    _, d_fmap = M.tail_backward(params, tail_cache, d_feat)
    cam = normalize_cam(cam_from_gradients(fmap, d_fmap))
    return upsample_cam(cam, params.arch.image_size, params.arch.kernel), pred, np.asarray(tgt)


def box_mass_fraction(heatmap: np.ndarray, bbox) -> float:
    """Share of total heatmap mass inside the inclusive (x1, y1, x2, y2) box."""
    x1, y1, x2, y2 = bbox
    total = heatmap.sum()
    if total <= 0:
        return 0.0
    return float(heatmap[y1:y2 + 1, x1:x2 + 1].sum() / total)


def box_area_fraction(bbox, image_size) -> float:
    x1, y1, x2, y2 = bbox
    H, W = image_size
    return (x2 - x1 + 1) * (y2 - y1 + 1) / (H * W)


@dataclass
class Projection:
    coords: np.ndarray       # 2n x 2; first n rows from model A
    source: np.ndarray       # 2n ints, 0 for model A and 1 for model B
    components: np.ndarray   # 2 x d
    explained_variance: np.ndarray
    degenerate: bool

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        return self.coords[self.source == 0], self.coords[self.source == 1]


def pca_2d(x: np.ndarray, n_components: int = 2):
    """Centred PCA via SVD; each component's largest-magnitude loading is made positive."""
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:n_components].copy()
    if comps.shape[0] < n_components:
        comps = np.vstack([comps, np.zeros((n_components - comps.shape[0], x.shape[1]))])
    for row in comps:
        j = np.argmax(np.abs(row))
        if row[j] < 0:
            row *= -1.0
    var = (s[:n_components] ** 2) / max(len(x) - 1, 1)
    return centred @ comps.T, comps, np.pad(var, (0, n_components - len(var)))


def project_features(feats_a: np.ndarray, feats_b: np.ndarray) -> Projection:
    """Fit one 2-component PCA on both models' features of the same samples."""
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    if feats_a.shape != feats_b.shape:
        raise ValueError("both feature sets must have the same shape")
    if len(feats_a) < 3:
        raise ValueError("need at least 3 samples")
    both = np.vstack([feats_a, feats_b])
    spread = np.abs(both - both.mean(axis=0)).max()
    if spread <= 1e-12 * max(np.abs(both).max(), 1.0):
        n = len(both)
        return Projection(np.zeros((n, 2)), np.repeat([0, 1], len(feats_a)),
                          np.zeros((2, both.shape[1])), np.zeros(2), degenerate=True)
    coords, comps, var = pca_2d(both)
    return Projection(coords, np.repeat([0, 1], len(feats_a)), comps, var, degenerate=False)


def paired_distance(proj: Projection) -> float:
    """Mean distance between the two models' projections of the same sample."""
    a, b = proj.split()
    return float(np.linalg.norm(a - b, axis=1).mean())


def write_pgm(path, image: np.ndarray, scale: int = 1) -> None:
    """Write a [0, 1] grayscale array as binary PGM."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if scale > 1:
        img = np.kron(img, np.ones((scale, scale)))
    data = np.round(img * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def scatter_ppm(path, proj: Projection, size: int = 256) -> None:
    """Raster scatter plot: model A in orange, model B in red."""
    img = np.ones((size, size, 3))
    colours = {0: (1.0, 0.75, 0.0), 1: (0.85, 0.1, 0.1)}
    c = proj.coords
    lo, hi = c.min(axis=0), c.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pix = np.round((c - lo) / span * (size - 9) + 4).astype(int)
    for (x, y), s in zip(pix, proj.source):
        img[size - 1 - y - 2:size - 1 - y + 3, x - 2:x + 3] = colours[int(s)]
    write_ppm(path, img)
