"""SLIC superpixel segmentation.

Clusters pixels in 5-D (L, a, b, row, col) space with spacing-limited
search windows, then enforces 4-connectivity by absorbing small fragments
into their largest neighbor.  Everything is deterministic: cluster seeds
come from a regular grid, no sampling anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, ParameterError, ShapeError


@dataclass(frozen=True)
class SlicParams:
    target_blocks: int = 200
    compactness: float = 10.0
    iterations: int = 10
    min_block_fraction: float = 0.25
    smoothing_passes: int = 0

    def __post_init__(self):
        if self.target_blocks < 1:
            raise ParameterError("target_blocks must be >= 1")
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if self.compactness <= 0:
            raise ParameterError("compactness must be positive")
        if self.smoothing_passes < 0:
            raise ParameterError("smoothing_passes must be >= 0")


@dataclass(frozen=True)
class SuperpixelMap:
    block_ids: np.ndarray  # H x W int32
    block_count: int

    @property
    def shape(self):
        return self.block_ids.shape

    def validate(self) -> None:
        ids = self.block_ids
        if ids.ndim != 2:
            raise ShapeError("block id map must be 2-D")
        present = np.unique(ids)
        if present[0] < 0 or present[-1] >= self.block_count:
            raise DataFormatError("block ids out of range")


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """Convert an H x W x 3 image in [0, 1] (sRGB) to CIELAB."""
    rgb = np.asarray(image, dtype=np.float64)
    linear = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    m = np.array(
        [
            [0.4124564, 0.3575761, 0.1804375],
            [0.2126729, 0.7151522, 0.0721750],
            [0.0193339, 0.1191920, 0.9503041],
        ]
    )
    xyz = linear @ m.T
    xyz /= np.array([0.95047, 1.0, 1.08883])  # D65 white point
    f = np.where(xyz > 0.008856, np.cbrt(xyz), 7.787 * xyz + 16.0 / 116.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _init_centers(h: int, w: int, k: int) -> np.ndarray:
    """Regular grid of k seed coordinates (row, col), float."""
    grid_w = max(1, int(round(np.sqrt(k * w / h))))
    grid_h = max(1, (k + grid_w - 1) // grid_w)
    while grid_h * grid_w > k and grid_h > 1 and (grid_h - 1) * grid_w >= k:
        grid_h -= 1
    rows = (np.arange(grid_h) + 0.5) * h / grid_h
    cols = (np.arange(grid_w) + 0.5) * w / grid_w
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    centers = np.stack([rr.ravel(), cc.ravel()], axis=1)
    return centers[:k]


def _box_blur(image: np.ndarray) -> np.ndarray:
    """One 3x3 edge-padded box filter pass, used for pre-segmentation denoising."""
    h, w = image.shape[:2]
    p = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    return sum(p[i : i + h, j : j + w] for i in range(3) for j in range(3)) / 9.0


def slic_segment(image: np.ndarray, params: SlicParams) -> SuperpixelMap:
    """Segment an image in [0, 1] RGB into superpixel blocks."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3 or image.size == 0:
        raise ShapeError(f"expected non-empty HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    k = params.target_blocks
    if k > h * w:
        raise ParameterError(f"target_blocks {k} exceeds pixel count {h * w}")

    for _ in range(params.smoothing_passes):
        image = _box_blur(image)
    lab = rgb_to_lab(image)
    spacing = np.sqrt(h * w / k)
    ratio = params.compactness / spacing

    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    centers_xy = _init_centers(h, w, k)
    n = len(centers_xy)
    ri = np.clip(np.round(centers_xy[:, 0]).astype(int), 0, h - 1)
    ci = np.clip(np.round(centers_xy[:, 1]).astype(int), 0, w - 1)
    centers_lab = lab[ri, ci]

    labels = np.full((h, w), -1, dtype=np.int32)
    window = int(np.ceil(2 * spacing))
    for _ in range(params.iterations):
        best = np.full((h, w), np.inf)
        labels.fill(-1)
        for c in range(n):
            r0 = max(0, int(centers_xy[c, 0]) - window)
            r1 = min(h, int(centers_xy[c, 0]) + window + 1)
            c0 = max(0, int(centers_xy[c, 1]) - window)
            c1 = min(w, int(centers_xy[c, 1]) + window + 1)
            if r0 >= r1 or c0 >= c1:
                continue
            d_lab = ((lab[r0:r1, c0:c1] - centers_lab[c]) ** 2).sum(axis=2)
            d_xy = (rr[r0:r1, c0:c1] - centers_xy[c, 0]) ** 2 + (cc[r0:r1, c0:c1] - centers_xy[c, 1]) ** 2
            d = d_lab + ratio * ratio * d_xy
            sub = best[r0:r1, c0:c1]
            take = d < sub
            sub[take] = d[take]
            labels[r0:r1, c0:c1][take] = c

        # orphans outside all windows: assign to the nearest center spatially
        if (labels < 0).any():
            orr, occ = np.nonzero(labels < 0)
            d_all = (orr[:, None] - centers_xy[None, :, 0]) ** 2 + (occ[:, None] - centers_xy[None, :, 1]) ** 2
            labels[orr, occ] = d_all.argmin(axis=1)

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=n).astype(np.float64)
        counts[counts == 0] = 1.0
        for axis, coord in ((0, rr), (1, cc)):
            centers_xy[:, axis] = np.bincount(flat, weights=coord.ravel(), minlength=n) / counts
        for ch in range(3):
            centers_lab[:, ch] = np.bincount(flat, weights=lab[:, :, ch].ravel(), minlength=n) / counts

    sp = SuperpixelMap(block_ids=labels.copy(), block_count=n)
    return enforce_connectivity(sp, params.min_block_fraction, target_blocks=k)


def _connected_components(ids: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected components of equal-id regions, BFS in scan order."""
    h, w = ids.shape
    comp = np.full((h, w), -1, dtype=np.int32)
    n_comp = 0
    stack = []
    for r in range(h):
        for c in range(w):
            if comp[r, c] >= 0:
                continue
            bid = ids[r, c]
            comp[r, c] = n_comp
            stack.append((r, c))
            while stack:
                y, x = stack.pop()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and comp[ny, nx] < 0 and ids[ny, nx] == bid:
                        comp[ny, nx] = n_comp
                        stack.append((ny, nx))
            n_comp += 1
    return comp, n_comp


def enforce_connectivity(
    sp: SuperpixelMap, min_block_fraction: float, target_blocks: int | None = None
) -> SuperpixelMap:
    """Split disconnected blocks and merge small fragments into neighbors.

    Fragments below min_block_fraction * (pixels / target_blocks) are
    absorbed by their largest adjacent component; ids are re-compacted to
    a contiguous range afterwards.
    """
    ids = np.asarray(sp.block_ids)
    h, w = ids.shape
    if target_blocks is None:
        target_blocks = sp.block_count
    comp, n_comp = _connected_components(ids)
    sizes = np.bincount(comp.ravel(), minlength=n_comp)
    min_size = max(1, int(min_block_fraction * h * w / max(1, target_blocks)))

    # adjacency between components (4-connectivity)
    neighbors: list[set[int]] = [set() for _ in range(n_comp)]
    horiz = comp[:, :-1] != comp[:, 1:]
    vert = comp[:-1, :] != comp[1:, :]
    for a, b in zip(comp[:, :-1][horiz].ravel(), comp[:, 1:][horiz].ravel()):
        neighbors[a].add(b)
        neighbors[b].add(a)
    for a, b in zip(comp[:-1, :][vert].ravel(), comp[1:, :][vert].ravel()):
        neighbors[a].add(b)
        neighbors[b].add(a)

    # merge small fragments, smallest first so chains collapse correctly
    parent = np.arange(n_comp)

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    order = np.argsort(sizes, kind="stable")
    merged_sizes = sizes.astype(np.int64).copy()
    for frag in order:
        frag = int(frag)
        if find(frag) != frag or merged_sizes[frag] >= min_size:
            continue
        cand = {find(nb) for nb in neighbors[frag]} - {frag}
        if not cand:
            continue
        target = max(cand, key=lambda t: (merged_sizes[t], -t))
        parent[frag] = target
        merged_sizes[target] += merged_sizes[frag]
        neighbors[target] |= neighbors[frag]

    roots = np.array([find(i) for i in range(n_comp)])
    uniq, compact = np.unique(roots, return_inverse=True)
    out = compact[comp].astype(np.int32)
    return SuperpixelMap(block_ids=out, block_count=len(uniq))


def resample_to(sp: SuperpixelMap, height: int, width: int) -> SuperpixelMap:
    """Nearest-neighbor resample of the block id map to a new resolution."""
    h, w = sp.shape
    ri = np.minimum((np.arange(height) * h) // height, h - 1)
    ci = np.minimum((np.arange(width) * w) // width, w - 1)
    ids = sp.block_ids[np.ix_(ri, ci)]
    return SuperpixelMap(block_ids=ids.astype(np.int32), block_count=sp.block_count)


def block_stats(sp: SuperpixelMap, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-block (size, mean feature) at the feature-map resolution.

    Blocks that lose every cell under resampling keep size 0 and a zero
    mean.  Sizes sum to the cell count.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[:2] != sp.shape:
        raise ShapeError(f"feature shape {feats.shape[:2]} != map shape {sp.shape}")
    flat_ids = sp.block_ids.ravel()
    n = sp.block_count
    sizes = np.bincount(flat_ids, minlength=n)
    c = feats.shape[2]
    sums = np.zeros((n, c))
    for ch in range(c):
        sums[:, ch] = np.bincount(flat_ids, weights=feats[:, :, ch].ravel(), minlength=n)
    means = np.zeros_like(sums)
    nonzero = sizes > 0
    means[nonzero] = sums[nonzero] / sizes[nonzero, None]
    return sizes, means


def save_superpixels(path, sp: SuperpixelMap, params: SlicParams | None = None) -> None:
    """Persist as 16-bit gray PNG plus a sidecar text header."""
    from PIL import Image as PilImage

    if sp.block_count > 65535:
        raise DataFormatError("block count exceeds 16-bit range")
    PilImage.fromarray(sp.block_ids.astype(np.uint16)).save(path, format="PNG")
    lines = [f"block_count={sp.block_count}"]
    if params is not None:
        lines += [
            f"target_blocks={params.target_blocks}",
            f"compactness={params.compactness}",
            f"iterations={params.iterations}",
            f"min_block_fraction={params.min_block_fraction}",
            f"smoothing_passes={params.smoothing_passes}",
        ]
    with open(str(path) + ".txt", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_superpixels(path) -> SuperpixelMap:
    from PIL import Image as PilImage

    with PilImage.open(path) as im:
        ids = np.asarray(im, dtype=np.int32)
    block_count = int(ids.max()) + 1
    try:
        with open(str(path) + ".txt") as fh:
            for line in fh:
                key, _, value = line.strip().partition("=")
                if key == "block_count":
                    block_count = int(value)
    except FileNotFoundError:
        pass
    return SuperpixelMap(block_ids=ids, block_count=block_count)
