"""Concept saliency maps: gradients of the concept score w.r.t. input pixels."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import ops
from .autodiff.rules import VANILLA, BackpropRule
from .autodiff.tensor import Tensor, backward, forward
from .concepts import ConceptVector, concept_score
from .container import load_container, save_container
from .errors import ShapeError
from .vae import VaeModel, decode, encode, encoder_graph

POST = ("raw", "clip-negative", "abs")
REDUCE = ("max-abs", "sum", "none")


@dataclass
class SaliencyMap:
    raw: np.ndarray  # input shape (H, W, C); post-processed values when post != "raw"
    rule: BackpropRule
    concept: str = ""
    post: str = "raw"
    channel_reduce: str = "max-abs"

    def __post_init__(self):
        if self.post not in POST:
            raise ValueError(f"post must be one of {POST}")
        if self.channel_reduce not in REDUCE:
            raise ValueError(f"channel_reduce must be one of {REDUCE}")

    @property
    def values(self):
        return self.raw


@dataclass(frozen=True)
class SmoothGradConfig:
    n_samples: int = 50
    noise_sigma: float = 0.15  # fraction of the input's value range
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _check_concept(model: VaeModel, concept):
    d = concept.direction if isinstance(concept, ConceptVector) else np.asarray(concept)
    if d.shape != (model.latent_dim,):
        raise ShapeError(f"concept has dim {d.shape[0]}, model latent_dim is {model.latent_dim}")
    return d


def saliency_batch(model: VaeModel, concept, xs, rule: BackpropRule = VANILLA) -> np.ndarray:
    """Raw maps for a batch (N, H, W, C).

    The encoder runs in inference mode, so samples do not interact and each
    map equals the map of that input alone; percentile thresholds are taken
    per sample.
    """
    d = _check_concept(model, concept)
    xs = np.asarray(xs, dtype=model.dtype)
    if xs.shape[1:] != tuple(model.arch.input_shape):
        raise ShapeError(f"saliency: input shape {xs.shape[1:]} != model input shape {tuple(model.arch.input_shape)}")
    x = Tensor(xs, requires_grad=True)
    mu, _ = encoder_graph(model, x, model.param_tensors(), training=False)
    scores = ops.dot(mu, Tensor(d.astype(model.dtype)))
    forward(scores)
    backward(scores, rule, seed=np.ones(len(xs), dtype=model.dtype))
    return x.grad


def concept_saliency(model: VaeModel, concept, x, rule: BackpropRule = VANILLA) -> SaliencyMap:
    """d(z_c . mu(x)) / dx for a single input of the model's input shape."""
    x = np.asarray(x)
    if x.shape != tuple(model.arch.input_shape):
        raise ShapeError(f"saliency: input shape {x.shape} != model input shape {tuple(model.arch.input_shape)}")
    raw = saliency_batch(model, concept, x[None], rule)[0]
    return SaliencyMap(raw, rule, getattr(concept, "name", ""))


def smooth_grad(model: VaeModel, concept, x, rule: BackpropRule = VANILLA,
                cfg: SmoothGradConfig = SmoothGradConfig()) -> SaliencyMap:
    """Average of maps over Gaussian-perturbed copies of ``x``.

    Noise sd is ``cfg.noise_sigma * (x.max() - x.min())``. With zero noise
    every sample is ``x`` itself and the plain map is returned.
    """
    x = np.asarray(x, dtype=model.dtype)
    rng = np.random.default_rng(cfg.seed)
    sd = cfg.noise_sigma * float(x.max() - x.min())
    if sd == 0:
        return concept_saliency(model, concept, x, rule)
    acc = np.zeros(x.shape, dtype=np.float64)
    done = 0
    chunk = 32
    while done < cfg.n_samples:
        m = min(chunk, cfg.n_samples - done)
        noisy = x[None] + (sd * rng.standard_normal((m,) + x.shape)).astype(model.dtype)
        acc += saliency_batch(model, concept, noisy, rule).astype(np.float64).sum(axis=0)
        done += m
    raw = (acc / cfg.n_samples).astype(model.dtype)
    return SaliencyMap(raw, rule, getattr(concept, "name", ""))


def clip_negative(smap: SaliencyMap) -> SaliencyMap:
    return replace(smap, raw=np.maximum(smap.raw, 0), post="clip-negative")


def absolute(smap: SaliencyMap) -> SaliencyMap:
    return replace(smap, raw=np.abs(smap.raw), post="abs")


def reduce_channels(arr, how="max-abs"):
    arr = np.asarray(arr)
    if arr.ndim == 2:
        return arr
    if how == "max-abs":
        return np.abs(arr).max(axis=-1)
    if how == "sum":
        return arr.sum(axis=-1)
    if arr.shape[-1] != 1:
        raise ShapeError(f"channel_reduce='none' needs a single channel, got {arr.shape[-1]}")
    return arr[..., 0]


def normalize(arr):
    """Min-max to [0, 1]; a constant map becomes all zeros."""
    arr = np.asarray(arr, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("saliency map contains NaN or infinite values")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def to_uint8(smap, reduce=None):
    """Reduce channels, normalise, quantise to 8-bit grayscale."""
    raw = smap.raw if isinstance(smap, SaliencyMap) else np.asarray(smap)
    how = reduce or (smap.channel_reduce if isinstance(smap, SaliencyMap) else "max-abs")
    if raw.ndim == 3 and raw.shape[-1] == 1 and how == "max-abs":
        how = "none"  # single channel keeps its sign for normalisation
    return np.round(normalize(reduce_channels(raw, how)) * 255).astype(np.uint8)


def render(smap, out_path, reduce=None, colormap=None) -> Path:
    """Write an image. ``.pgm`` gives binary PGM, anything else goes through Pillow (PNG by default)."""
    from PIL import Image

    out_path = Path(out_path)
    img = to_uint8(smap, reduce)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if colormap:
        import matplotlib

        rgb = (matplotlib.colormaps[colormap](img / 255.0)[..., :3] * 255).round().astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(out_path)
    elif out_path.suffix.lower() == ".pgm":
        h, w = img.shape
        out_path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    else:
        Image.fromarray(img, mode="L").save(out_path)
    return out_path


def save_maps(maps, path, extra=None) -> Path:
    """Raw maps of one run as a container; maps stacked in order."""
    manifest = {"kind": "saliency", "rules": [m.rule.to_dict() for m in maps],
                "concepts": [m.concept for m in maps], "post": [m.post for m in maps]}
    manifest.update(extra or {})
    return save_container(path, manifest, {"maps": np.stack([m.raw for m in maps]).astype(np.float32)})


def load_maps(path):
    doc, arrays = load_container(path)
    return [SaliencyMap(raw, BackpropRule.from_dict(r), c, p)
            for raw, r, c, p in zip(arrays["maps"], doc["rules"], doc["concepts"], doc["post"])]


# -- latent manipulation ------------------------------------------------------------------

def manipulate(model: VaeModel, concept, x, alpha) -> np.ndarray:
    """decode(mu(x) + alpha * z_c)."""
    d = _check_concept(model, concept)
    mu = encode(model, x).mean
    return decode(model, mu + np.asarray(alpha, dtype=mu.dtype) * d.astype(mu.dtype))


def manipulation_trend(model: VaeModel, concept, x, alphas=(0.0, 0.5, 1.0, 2.0)):
    """Concept scores of re-encoded manipulations over ``alphas`` and whether they are non-decreasing."""
    d = _check_concept(model, concept)
    mu = encode(model, x).mean
    z = mu[None] + np.asarray(alphas, dtype=mu.dtype)[:, None] * d[None].astype(mu.dtype)
    images = decode(model, z)
    scores = concept_score(d, encode(model, images).mean)
    order = np.argsort(alphas, kind="stable")
    monotone = bool(np.all(np.diff(scores[order]) >= 0))
    return images, scores, monotone
