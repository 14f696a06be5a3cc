"""Concept vectors in latent space and the dot-product concept score."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .container import load_container, save_container
from .errors import ShapeError

log = logging.getLogger(__name__)

PROVENANCES = ("attribute-mean-difference", "correlation-top-k")


@dataclass
class ConceptVector:
    direction: np.ndarray
    name: str = "concept"
    provenance: str = "attribute-mean-difference"
    n_pos: int = 0
    n_neg: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.direction = np.asarray(self.direction)
        if self.direction.ndim != 1:
            raise ShapeError(f"concept direction must be a vector, got shape {self.direction.shape}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def latent_dim(self):
        return self.direction.shape[0]

    def scaled(self, alpha):
        return ConceptVector(self.direction * alpha, f"{alpha:g}*{self.name}", self.provenance,
                             self.n_pos, self.n_neg, dict(self.info))

    def __neg__(self):
        return ConceptVector(-self.direction, f"-{self.name}", self.provenance, self.n_neg, self.n_pos,
                             dict(self.info))

    def __add__(self, other):
        return ConceptVector(self.direction + _direction(other), f"{self.name}+{getattr(other, 'name', 'v')}",
                             self.provenance, self.n_pos, self.n_neg)


def _direction(c):
    return c.direction if isinstance(c, ConceptVector) else np.asarray(c)


def _code(c):
    """LatentCode -> its posterior mean; arrays pass through."""
    if isinstance(c, np.ndarray):
        return c
    mean = getattr(c, "mean", None)
    return np.asarray(mean if isinstance(mean, np.ndarray) else c)


def _means(codes):
    """Accept LatentCodes (batched or a list) or plain (n, d) arrays."""
    if isinstance(codes, (list, tuple)):
        arr = np.asarray([_code(c) for c in codes])
    else:
        arr = _code(codes)
    if arr.ndim == 1:
        arr = arr[None]
    return arr


def concept_from_attribute(codes_pos, codes_neg, name="concept") -> ConceptVector:
    """Mean latent code of the positive set minus that of the negative set."""
    zp, zn = _means(codes_pos), _means(codes_neg)
    if zp.size == 0 or zn.size == 0:
        raise ValueError("concept_from_attribute needs at least one positive and one negative code")
    if zp.shape[1] != zn.shape[1]:
        raise ShapeError(f"positive codes have dim {zp.shape[1]}, negative codes dim {zn.shape[1]}")
    direction = zp.mean(axis=0) - zn.mean(axis=0)
    return ConceptVector(direction, name, "attribute-mean-difference", len(zp), len(zn))


def concept_score(concept, z):
    """Dot product of the concept direction with one code (scalar) or a batch (vector)."""
    d = _direction(concept)
    z = _code(z)
    if z.shape[-1] != d.shape[0]:
        raise ShapeError(f"concept has dim {d.shape[0]}, code has dim {z.shape[-1]}")
    return z @ d


def pearson_rows(z, anchor):
    """Pearson correlation of each row of ``z`` with ``anchor`` (coordinates as paired observations).

    Rows with zero variance get NaN.
    """
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(anchor, dtype=np.float64)
    zc = z - z.mean(axis=1, keepdims=True)
    ac = a - a.mean()
    num = zc @ ac
    den = np.sqrt((zc * zc).sum(axis=1) * (ac @ ac))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)
    return np.clip(r, -1.0, 1.0)


def concept_from_correlation(codes, anchor_ids, k=50, name="concept") -> ConceptVector:
    """Average the k codes best correlated with the anchor code(s).

    ``anchor_ids`` are row indices into ``codes``; with several anchors their
    mean code is the reference. Anchors are excluded from the candidate pool.
    Zero-variance codes (including a zero-variance anchor) have undefined
    correlation and are excluded; their count is reported in
    ``info["n_excluded"]``.
    """
    z = _means(codes)
    anchors = np.atleast_1d(np.asarray(anchor_ids, dtype=int))
    if anchors.size == 0:
        raise ValueError("at least one anchor is required")
    if (anchors < 0).any() or (anchors >= len(z)).any():
        raise IndexError(f"anchor index out of range for {len(z)} codes: {anchors.tolist()}")
    pool = np.setdiff1d(np.arange(len(z)), anchors)
    if not 1 <= k <= len(pool):
        raise ValueError(f"k={k} must lie in [1, {len(pool)}] (samples minus anchors)")
    ref = z[anchors].mean(axis=0)
    r = pearson_rows(z[pool], ref)
    if not np.isfinite(pearson_rows(ref[None], ref)).all():
        raise ValueError("anchor code has zero variance; correlation undefined")
    ok = np.isfinite(r)
    n_excluded = int((~ok).sum())
    if n_excluded:
        log.warning("%d codes with zero variance excluded from correlation ranking", n_excluded)
    cand, rc = pool[ok], r[ok]
    if len(cand) < k:
        raise ValueError(f"only {len(cand)} codes have defined correlation, need k={k}")
    # stable sort: ties keep index order
    top = cand[np.argsort(-rc, kind="stable")[:k]]
    top_r = r[np.searchsorted(pool, top)]
    direction = z[top].mean(axis=0)
    info = {"anchors": anchors.tolist(), "members": top.tolist(), "correlations": top_r.tolist(),
            "n_excluded": n_excluded, "k": k}
    return ConceptVector(direction, name, "correlation-top-k", len(top), 0, info)


# -- separation statistics ------------------------------------------------------------

def auc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties at half weight)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def pooled_gap(scores, labels):
    """(mean_pos - mean_neg) / pooled standard deviation."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    a, b = s[y], s[~y]
    dof = len(a) + len(b) - 2
    if dof <= 0:
        return float("nan")
    var = ((len(a) - 1) * a.var(ddof=1 if len(a) > 1 else 0) + (len(b) - 1) * b.var(ddof=1 if len(b) > 1 else 0)) / dof
    sd = np.sqrt(var)
    return float((a.mean() - b.mean()) / sd) if sd > 0 else float("inf") * np.sign(a.mean() - b.mean())


@dataclass
class ScoreReport:
    scores: np.ndarray
    labels: np.ndarray
    hist_edges: np.ndarray
    hist_pos: np.ndarray
    hist_neg: np.ndarray
    auc: float
    gap: float
    concept: str = ""

    def to_dict(self):
        return {
            "concept": self.concept,
            "auc": self.auc,
            "gap_pooled_sd": self.gap,
            "n": int(len(self.scores)),
            "n_pos": int(self.labels.sum()),
            "scores": self.scores.tolist(),
            "labels": self.labels.tolist(),
            "histogram": {"edges": self.hist_edges.tolist(), "with": self.hist_pos.tolist(),
                          "without": self.hist_neg.tolist()},
        }

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def report_from_scores(scores, labels, bins=50, concept="") -> ScoreReport:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.uint8)
    if s.shape != y.shape:
        raise ShapeError(f"{len(s)} scores for {len(y)} labels")
    a = auc(s, y)
    lo, hi = float(s.min()), float(s.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    hp, _ = np.histogram(s[y == 1], edges)
    hn, _ = np.histogram(s[y == 0], edges)
    return ScoreReport(s, y, edges, hp, hn, a, pooled_gap(s, y), concept)


def score_report(model, concept, dataset, attr, bins=50) -> ScoreReport:
    from .vae import encode_means

    labels = dataset.label(attr)
    z = encode_means(model, dataset.samples)
    return report_from_scores(concept_score(concept, z), labels, bins, getattr(concept, "name", attr))


# -- persistence ------------------------------------------------------------------------

def save_concept(concept: ConceptVector, path) -> Path:
    manifest = {"kind": "concept", "name": concept.name, "provenance": concept.provenance,
                "n_pos": concept.n_pos, "n_neg": concept.n_neg, "latent_dim": concept.latent_dim,
                "info": concept.info}
    return save_container(path, manifest, {"direction": concept.direction.astype(np.float32)})


def load_concept(path) -> ConceptVector:
    doc, arrays = load_container(path)
    if doc.get("kind") != "concept":
        raise ShapeError(f"{path}: not a concept container (kind={doc.get('kind')!r})")
    return ConceptVector(arrays["direction"], doc["name"], doc["provenance"], doc["n_pos"], doc["n_neg"],
                         doc.get("info", {}))
