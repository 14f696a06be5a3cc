"""Datasets: container, synthetic generators, spatial-transcriptomics loading."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .container import load_container, save_container
from .errors import AbsentAttributeError, ContainerError, ShapeError, StLoadError


@dataclass
class Dataset:
    """N samples of shape (H, W, C) in [0, 1] plus optional binary labels.

    ``aux`` holds per-dataset arrays that are not labels, e.g. square boxes
    or ring templates, and travels with the dataset through save/load.
    """

    samples: np.ndarray
    labels: dict = field(default_factory=dict)
    ids: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 4:
            raise ShapeError(f"dataset samples must be (N, H, W, C), got {self.samples.shape}")
        n = len(self.samples)
        if not self.ids:
            self.ids = [str(i) for i in range(n)]
        if len(self.ids) != n:
            raise ShapeError(f"{len(self.ids)} ids for {n} samples")
        for name, lab in list(self.labels.items()):
            lab = np.asarray(lab)
            if lab.shape != (n,) or not np.isin(lab, (0, 1)).all():
                raise ShapeError(f"label {name!r} must be a 0/1 vector of length {n}")
            self.labels[name] = lab.astype(np.uint8)

    def __len__(self):
        return len(self.samples)

    @property
    def sample_shape(self):
        return self.samples.shape[1:]

    def label(self, name):
        if name not in self.labels:
            raise AbsentAttributeError(name, sorted(self.labels))
        return self.labels[name]

    def index_of(self, sample_id):
        try:
            return self.ids.index(str(sample_id))
        except ValueError:
            raise KeyError(f"no sample with id {sample_id!r}") from None

    def subset(self, idx):
        idx = np.asarray(idx)
        aux = {k: (v[idx] if k in self.provenance.get("per_sample_aux", ()) else v)
               for k, v in self.aux.items()}
        return Dataset(self.samples[idx], {k: v[idx] for k, v in self.labels.items()},
                       [self.ids[i] for i in idx], dict(self.provenance), aux)

    def split(self, n_first):
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))


# -- synthetic squares -------------------------------------------------------------

def smooth_background(rng, n, size, channels=1, smoothness=4.0, mean=0.5, spread=0.12, lo=0.2, hi=0.8):
    """Seeded low-frequency noise images around mid-gray, clipped to [lo, hi]."""
    white = rng.standard_normal((n, size, size, channels))
    smooth = gaussian_filter(white, sigma=(0, smoothness, smoothness, 0), mode="wrap")
    smooth /= smooth.reshape(n, -1).std(axis=1).reshape(n, 1, 1, 1) + 1e-12
    return np.clip(mean + spread * smooth, lo, hi)


def _round_half_up(v):
    return int(math.floor(v + 0.5))


def gen_squares(n, side=8, size=32, brightness="bright", color=None, fraction_with=0.5,
                seed=0, channels=None, background_spread=0.03, smoothness=4.0):
    """Smooth backgrounds with an inserted square in round(n * fraction_with) images.

    Bright squares take one value in [0.9, 1.0] per image, dark squares one
    value in [0, 0.1]. ``color`` (an RGB triple in [0, 1]) gives a coloured
    square on a 3-channel image instead. Labels: ``square``. The top-left
    corner and side of each square are kept in ``aux["boxes"]`` (rows of
    -1 for negatives).
    """
    if not 0 < side < size:
        raise ValueError(f"square side {side} must lie in (0, {size})")
    if not 0 < fraction_with < 1:
        raise ValueError(f"fraction_with must lie in (0, 1), got {fraction_with}")
    if brightness not in ("bright", "dark"):
        raise ValueError(f"brightness must be 'bright' or 'dark', got {brightness!r}")
    if channels is None:
        channels = 3 if color is not None else 1
    rng = np.random.default_rng(seed)
    x = smooth_background(rng, n, size, channels, smoothness=smoothness, spread=background_spread)
    n_pos = _round_half_up(n * fraction_with)
    pos = np.zeros(n, dtype=np.uint8)
    pos[rng.permutation(n)[:n_pos]] = 1
    boxes = np.full((n, 3), -1, dtype=np.int32)
    for i in np.flatnonzero(pos):
        r, c = rng.integers(0, size - side + 1, size=2)
        if color is not None:
            val = np.asarray(color, dtype=np.float64)
        elif brightness == "bright":
            val = rng.uniform(0.9, 1.0)
        else:
            val = rng.uniform(0.0, 0.1)
        x[i, r:r + side, c:c + side, :] = val
        boxes[i] = (r, c, side)
    prov = {
        "generator": "squares", "n": n, "side": side, "size": size, "brightness": brightness,
        "color": None if color is None else list(map(float, color)), "fraction_with": fraction_with,
        "seed": seed, "channels": channels, "background_spread": background_spread,
        "smoothness": smoothness, "per_sample_aux": ["boxes"],
    }
    return Dataset(x.astype(np.float32), {"square": pos}, provenance=prov, aux={"boxes": boxes})


def square_mask(box, size):
    m = np.zeros((size, size), dtype=bool)
    r, c, s = (int(v) for v in box)
    if s > 0:
        m[r:r + s, c:c + s] = True
    return m


# -- synthetic spatial transcriptomics ----------------------------------------------------

def ring_templates(layer_patterns=3, size=32, outer_radius=None):
    """Disjoint 0/1 masks: an inner disc, then concentric rings of equal width."""
    if layer_patterns < 2:
        raise ValueError("layer_patterns must be >= 2")
    outer = (size / 2 - 1) if outer_radius is None else outer_radius
    yy, xx = np.mgrid[0:size, 0:size]
    centre = (size - 1) / 2
    r = np.hypot(yy - centre, xx - centre)
    edges = np.linspace(0, outer, layer_patterns + 1)
    tpl = np.zeros((layer_patterns, size, size), dtype=np.float32)
    for i in range(layer_patterns):
        inside = (r >= edges[i]) & (r < edges[i + 1]) if i else r < edges[1]
        tpl[i][inside] = 1.0
    return tpl


def minmax_normalize(grid):
    """Per-grid min-max to [0, 1]; a constant grid maps to all-ones (zero grid stays zero)."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    if hi > lo:
        return (grid - lo) / (hi - lo)
    return np.ones_like(grid) if hi != 0 else np.zeros_like(grid)


def gen_st_layers(n_genes=300, layer_patterns=3, noise=0.2, size=32, seed=0):
    """Synthetic genes: one ring template each, with multiplicative noise, min-max normalised.

    Genes are assigned to templates round-robin, so counts differ by at most
    one. Labels ``layer0``..``layer{L-1}``; the templates themselves are in
    ``aux["templates"]`` and the per-gene template index in
    ``aux["template_id"]``.
    """
    tpl = ring_templates(layer_patterns, size)
    rng = np.random.default_rng(seed)
    tid = np.arange(n_genes) % layer_patterns
    rng.shuffle(tid)
    x = np.empty((n_genes, size, size, 1), dtype=np.float32)
    for g in range(n_genes):
        factor = np.clip(1.0 + noise * rng.standard_normal((size, size)), 0.0, None)
        x[g, :, :, 0] = minmax_normalize(tpl[tid[g]] * factor)
    labels = {f"layer{k}": (tid == k).astype(np.uint8) for k in range(layer_patterns)}
    ids = [f"g{g}" for g in range(n_genes)]
    prov = {"generator": "st_layers", "n_genes": n_genes, "layer_patterns": layer_patterns,
            "noise": noise, "size": size, "seed": seed, "per_sample_aux": ["template_id"]}
    return Dataset(x, labels, ids, prov, {"templates": tpl, "template_id": tid.astype(np.int32)})


# -- real spatial transcriptomics input ------------------------------------------------------

@dataclass
class StGrid:
    gene_id: str
    counts: np.ndarray  # (H, W) summed raw counts, empty cells zero
    norm_min: float
    norm_max: float

    @property
    def normalized(self):
        return minmax_normalize(self.counts).astype(np.float32)


@dataclass
class StLoadReport:
    n_genes_read: int
    n_dropped_all_zero: int
    dropped: list
    n_spots: int
    n_collisions: int


def _read_spots(spots_file, errors):
    spots = {}
    with open(spots_file, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 3:
                errors.append(f"{spots_file}:{lineno}: expected 3 fields (spot, x, y), got {len(row)}")
                continue
            try:
                xy = (float(row[1]), float(row[2]))
            except ValueError:
                if lineno == 1:
                    continue  # header
                errors.append(f"{spots_file}:{lineno}: non-numeric coordinate")
                continue
            if not all(map(math.isfinite, xy)):
                errors.append(f"{spots_file}:{lineno}: non-finite coordinate")
                continue
            spots[row[0]] = (lineno, xy)
    return spots


def load_st_counts(matrix_file, spots_file, grid=(32, 32), scale="bbox"):
    """Place each gene's spot counts onto an H x W grid.

    ``matrix_file``: tab-separated, header ``gene<TAB>spot...``, one gene per
    row. ``spots_file``: tab-separated ``spot<TAB>x<TAB>y``. With
    ``scale="bbox"`` the coordinate bounding box is mapped affinely onto the
    grid; with ``scale=None`` coordinates are used as given. Coordinates are
    rounded to cells (x -> column, y -> row); spots sharing a cell are summed.
    All-zero genes are dropped and reported. Any malformed line raises
    :class:`StLoadError` listing every problem.
    """
    h, w = grid
    errors = []
    spots = _read_spots(spots_file, errors)
    cells = {}
    if spots:
        xs = np.array([xy[0] for _, xy in spots.values()])
        ys = np.array([xy[1] for _, xy in spots.values()])
        for sid, (lineno, (x, y)) in spots.items():
            if scale == "bbox":
                x = (x - xs.min()) / (np.ptp(xs) or 1.0) * (w - 1)
                y = (y - ys.min()) / (np.ptp(ys) or 1.0) * (h - 1)
            col, row = int(math.floor(x + 0.5)), int(math.floor(y + 0.5))
            if not (0 <= row < h and 0 <= col < w):
                errors.append(f"{spots_file}:{lineno}: spot {sid} maps to cell ({row}, {col}) outside {h}x{w} grid")
                continue
            cells[sid] = (row, col)
    n_collisions = len(cells) - len(set(cells.values()))

    grids, dropped, n_read = [], [], 0
    with open(matrix_file, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None:
            raise StLoadError([f"{matrix_file}: empty file"])
        spot_cols = header[1:]
        for sid in spot_cols:
            if sid not in spots:
                errors.append(f"{matrix_file}:1: spot {sid} has no coordinates in {spots_file}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                errors.append(f"{matrix_file}:{lineno}: expected {len(header)} fields, got {len(row)}")
                continue
            try:
                vals = np.array([float(v) for v in row[1:]])
            except ValueError:
                errors.append(f"{matrix_file}:{lineno}: non-numeric count for gene {row[0]}")
                continue
            if not np.isfinite(vals).all() or (vals < 0).any():
                errors.append(f"{matrix_file}:{lineno}: counts must be finite and non-negative")
                continue
            n_read += 1
            counts = np.zeros((h, w), dtype=np.float64)
            for sid, v in zip(spot_cols, vals):
                if sid in cells:
                    counts[cells[sid]] += v
            if not counts.any():
                dropped.append(row[0])
                continue
            grids.append(StGrid(row[0], counts, float(counts.min()), float(counts.max())))
    if errors:
        raise StLoadError(errors)
    report = StLoadReport(n_read, len(dropped), dropped, len(cells), n_collisions)
    return grids, report


def st_dataset(grids, provenance=None):
    x = np.stack([g.normalized for g in grids])[..., None]
    return Dataset(x, ids=[g.gene_id for g in grids], provenance=provenance or {"generator": "st_counts"})


# -- persistence -----------------------------------------------------------------------------

def save_dataset(ds: Dataset, path) -> Path:
    manifest = {
        "kind": "dataset",
        "shape": list(ds.samples.shape),
        "labels": {k: v.tolist() for k, v in ds.labels.items()},
        "ids": ds.ids,
        "seed": ds.provenance.get("seed"),
        "provenance": ds.provenance,
    }
    arrays = {"samples": ds.samples}
    arrays.update({f"aux/{k}": v for k, v in ds.aux.items()})
    return save_container(path, manifest, arrays)


def load_dataset(path) -> Dataset:
    doc, arrays = load_container(path)
    if doc.get("kind") != "dataset":
        raise ContainerError(f"{path}: not a dataset container (kind={doc.get('kind')!r})")
    x = arrays["samples"]
    if list(x.shape) != doc["shape"]:
        raise ContainerError(f"{path}: samples shape {x.shape} != manifest shape {doc['shape']}")
    labels = {k: np.asarray(v, dtype=np.uint8) for k, v in doc["labels"].items()}
    aux = {k[4:]: v for k, v in arrays.items() if k.startswith("aux/")}
    return Dataset(x, labels, list(doc["ids"]), doc["provenance"], aux)
