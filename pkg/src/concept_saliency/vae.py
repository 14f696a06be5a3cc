"""Convolutional VAE built on the in-house autodiff engine.

Two presets mirror the published layer tables: ``celeba`` (128x128x3 input,
400 latent units) and ``st`` (32x32x1 input, 20 latent units). Both can be
shrunk with ``width`` for desk-scale runs.

All activations are NHWC. The latent code used for concept work is the
posterior mean.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ops
from .autodiff.conv import conv_out_size
from .autodiff.ops import BatchNormState
from .autodiff.tensor import DEFAULT_DTYPE, Tensor, backward, forward
from .container import load_container, save_container
from .errors import NumericalError, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "deconv" | "dense"
    size: int  # channels for conv/deconv, units for dense
    kernel: int = 0
    stride: int = 1
    batchnorm: bool = True
    activation: str = "relu"  # "relu" | "sigmoid" | "none"

    def describe(self):
        if self.kind == "dense":
            head = f"{self.size} fully-connected"
        else:
            head = f"{self.kernel}x{self.kernel} {self.size} {'conv' if self.kind == 'conv' else 'deconv'}, stride {self.stride}"
        tail = []
        if self.batchnorm:
            tail.append("BN")
        if self.activation != "none":
            tail.append(self.activation)
        return ", ".join([head] + tail)


@dataclass(frozen=True)
class VaeArchitecture:
    input_shape: tuple  # (H, W, C)
    latent_dim: int
    encoder: tuple  # LayerSpec; the two latent heads are implicit
    decoder: tuple  # LayerSpec; first is dense, reshaped to decoder_grid
    decoder_grid: tuple  # (h, w, c) after the first decoder dense layer
    upsample: bool = False  # nearest-upsample + stride-1 conv instead of transposed conv
    name: str = "custom"

    def __post_init__(self):
        if self.decoder[0].kind != "dense":
            raise ValueError("decoder must start with a dense layer")
        if int(np.prod(self.decoder_grid)) != self.decoder[0].size:
            raise ValueError(
                f"decoder grid {self.decoder_grid} does not hold {self.decoder[0].size} units"
            )

    def layer_table(self):
        """Human-readable layer list with output sizes, encoder then decoder."""
        enc = [("input", tuple(self.input_shape))]
        h, w, c = self.input_shape
        flat = None
        for ls in self.encoder:
            if ls.kind == "conv":
                pad = (ls.kernel - 1) // 2
                h = conv_out_size(h, ls.kernel, ls.stride, pad)
                w = conv_out_size(w, ls.kernel, ls.stride, pad)
                c = ls.size
                enc.append((ls.describe(), (h, w, c)))
            else:
                flat = ls.size
                enc.append((ls.describe(), (flat,)))
        enc.append((f"{self.latent_dim} fully-connected (latent layer)", (self.latent_dim,)))
        dec = [(f"{self.latent_dim} latent input", (self.latent_dim,))]
        dec.append((self.decoder[0].describe(), (self.decoder[0].size,)))
        h, w, c = self.decoder_grid
        for ls in self.decoder[1:]:
            h, w, c = 2 * h if ls.stride == 2 else h, 2 * w if ls.stride == 2 else w, ls.size
            dec.append((ls.describe(), (h, w, c)))
        return enc, dec

    def output_shape(self):
        return self.layer_table()[1][-1][1]

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["decoder_grid"] = list(self.decoder_grid)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_shape=tuple(d["input_shape"]),
            latent_dim=int(d["latent_dim"]),
            encoder=tuple(LayerSpec(**ls) for ls in d["encoder"]),
            decoder=tuple(LayerSpec(**ls) for ls in d["decoder"]),
            decoder_grid=tuple(d["decoder_grid"]),
            upsample=bool(d.get("upsample", False)),
            name=d.get("name", "custom"),
        )


def _scaled(n, width):
    return max(1, int(round(n * width)))


def celeba_architecture(width=1.0, latent_dim=400, upsample=False):
    w = lambda n: _scaled(n, width)  # noqa: E731
    enc = tuple(LayerSpec("conv", w(c), 5, 2) for c in (64, 128, 256, 512, 1024)) + (
        LayerSpec("dense", w(512)),)
    dec = (LayerSpec("dense", w(1024) * 16),) + tuple(
        LayerSpec("deconv", w(c), 5, 2) for c in (512, 256, 128, 64)) + (
        LayerSpec("deconv", 3, 5, 2, batchnorm=False, activation="sigmoid"),)
    return VaeArchitecture((128, 128, 3), latent_dim, enc, dec, (4, 4, w(1024)),
                           upsample=upsample, name="celeba")


def st_architecture(width=1.0, latent_dim=20, upsample=False):
    w = lambda n: _scaled(n, width)  # noqa: E731
    enc = tuple(LayerSpec("conv", w(c), 4, 2) for c in (16, 32, 64)) + (LayerSpec("dense", w(256)),)
    dec = (LayerSpec("dense", w(64) * 16),) + tuple(
        LayerSpec("deconv", w(c), 4, 2) for c in (32, 16)) + (
        LayerSpec("deconv", 1, 4, 2, batchnorm=False, activation="sigmoid"),)
    return VaeArchitecture((32, 32, 1), latent_dim, enc, dec, (4, 4, w(64)),
                           upsample=upsample, name="st")


PRESETS = {"celeba": celeba_architecture, "st": st_architecture}


def preset(name, **kw):
    try:
        return PRESETS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class LatentCode:
    mean: np.ndarray
    log_var: np.ndarray
    sample: np.ndarray | None = None

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(f"latent mean shape {self.mean.shape} != log-variance shape {self.log_var.shape}")
        if self.sample is not None and self.sample.shape != self.mean.shape:
            raise ShapeError(f"latent sample shape {self.sample.shape} != mean shape {self.mean.shape}")

    @property
    def latent_dim(self):
        return self.mean.shape[-1]


@dataclass
class TrainingInfo:
    epochs: int = 0
    seed: int | None = None
    lr: float | None = None
    batch_size: int | None = None
    kl_warmup: int = 0
    loss_history: list = field(default_factory=list)  # per epoch: {"total", "reconstruction", "kl"}


class VaeModel:
    """Parameters, batchnorm statistics and architecture of a VAE."""

    def __init__(self, arch: VaeArchitecture, params: dict, bn: dict, info: TrainingInfo | None = None):
        self.arch = arch
        self.params = params
        self.bn = bn
        self.info = info or TrainingInfo()

    @property
    def latent_dim(self):
        return self.arch.latent_dim

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype):
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        bn = {}
        for k, st in self.bn.items():
            new = BatchNormState(st.mean.shape[0], st.momentum, st.eps, dtype=dtype)
            new.mean, new.var = st.mean.astype(dtype), st.var.astype(dtype)
            bn[k] = new
        return VaeModel(self.arch, params, bn, self.info)

    def param_tensors(self, requires_grad=False):
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}


def _param_shapes(arch: VaeArchitecture):
    shapes = {}
    bn = {}
    h, w, c = arch.input_shape
    flat = None
    for i, ls in enumerate(arch.encoder):
        name = f"enc{i}"
        if ls.kind == "conv":
            shapes[name + ".w"] = (ls.kernel, ls.kernel, c, ls.size)
            pad = (ls.kernel - 1) // 2
            h, w, c = conv_out_size(h, ls.kernel, ls.stride, pad), conv_out_size(w, ls.kernel, ls.stride, pad), ls.size
        else:
            fan_in = flat if flat is not None else h * w * c
            shapes[name + ".w"] = (fan_in, ls.size)
            flat = ls.size
        shapes[name + ".b"] = (ls.size,)
        if ls.batchnorm:
            bn[name] = ls.size
    feat = flat if flat is not None else h * w * c
    shapes["mu.w"], shapes["mu.b"] = (feat, arch.latent_dim), (arch.latent_dim,)
    shapes["logvar.w"], shapes["logvar.b"] = (feat, arch.latent_dim), (arch.latent_dim,)
    d0 = arch.decoder[0]
    shapes["dec0.w"], shapes["dec0.b"] = (arch.latent_dim, d0.size), (d0.size,)
    if d0.batchnorm:
        bn["dec0"] = d0.size
    c = arch.decoder_grid[2]
    for i, ls in enumerate(arch.decoder[1:], start=1):
        name = f"dec{i}"
        if arch.upsample:
            shapes[name + ".w"] = (ls.kernel, ls.kernel, c, ls.size)
        else:
            shapes[name + ".w"] = (ls.kernel, ls.kernel, ls.size, c)
        shapes[name + ".b"] = (ls.size,)
        if ls.batchnorm:
            bn[name] = ls.size
        c = ls.size
    return shapes, bn


def init_model(arch: VaeArchitecture, seed=0, dtype=DEFAULT_DTYPE, zero_heads=False) -> VaeModel:
    """Fan-in scaled Gaussian weights (He for ReLU layers), zero biases, BN gamma=1 beta=0."""
    rng = np.random.default_rng(seed)
    shapes, bn_sizes = _param_shapes(arch)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if name.startswith(("mu.", "logvar.")):
            fan_in, gain = shape[0], 1.0
            if zero_heads:
                params[name] = np.zeros(shape, dtype=dtype)
                continue
        elif len(shape) == 4:
            k = shape[0]
            # transposed conv: each output sees ~ (k/stride)^2 * c_in inputs
            fan_in = k * k * (shape[2] if name.startswith("enc") or arch.upsample else shape[3] / 4)
            gain = 2.0
        else:
            fan_in, gain = shape[0], 2.0
        params[name] = (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)
    for name, size in bn_sizes.items():
        params[name + ".gamma"] = np.ones(size, dtype=dtype)
        params[name + ".beta"] = np.zeros(size, dtype=dtype)
    bn = {name: BatchNormState(size, dtype=dtype) for name, size in bn_sizes.items()}
    return VaeModel(arch, params, bn)


# -- graph builders ----------------------------------------------------------------

def _post(h, name, ls, P, bn, training):
    if ls.batchnorm:
        h = ops.batchnorm(h, P[name + ".gamma"], P[name + ".beta"], bn[name], training)
    if ls.activation == "relu":
        h = ops.relu(h)
    elif ls.activation == "sigmoid":
        h = ops.sigmoid(h)
    return h


def encoder_graph(model: VaeModel, x: Tensor, P: dict, training=False):
    """Build the encoder graph; returns (mu, log_var) tensors of shape (N, latent)."""
    arch = model.arch
    if tuple(x.shape[1:]) != tuple(arch.input_shape):
        raise ShapeError(f"encode: input shape {tuple(x.shape[1:])} != architecture input shape {tuple(arch.input_shape)}")
    h = x
    for i, ls in enumerate(arch.encoder):
        name = f"enc{i}"
        if ls.kind == "conv":
            h = ops.conv2d(h, P[name + ".w"], P[name + ".b"], ls.stride, (ls.kernel - 1) // 2)
        else:
            if len(h.shape) > 2:
                h = ops.flatten(h)
            h = ops.dense(h, P[name + ".w"], P[name + ".b"])
        h = _post(h, name, ls, P, model.bn, training)
    if len(h.shape) > 2:
        h = ops.flatten(h)
    mu = ops.dense(h, P["mu.w"], P["mu.b"])
    log_var = ops.dense(h, P["logvar.w"], P["logvar.b"])
    return mu, log_var


def decoder_graph(model: VaeModel, z: Tensor, P: dict, training=False):
    arch = model.arch
    if z.shape[-1] != arch.latent_dim:
        raise ShapeError(f"decode: latent length {z.shape[-1]} != latent_dim {arch.latent_dim}")
    d0 = arch.decoder[0]
    h = _post(ops.dense(z, P["dec0.w"], P["dec0.b"]), "dec0", d0, P, model.bn, training)
    h = ops.reshape(h, (z.shape[0],) + tuple(arch.decoder_grid))
    for i, ls in enumerate(arch.decoder[1:], start=1):
        name = f"dec{i}"
        k = ls.kernel
        if arch.upsample:
            h = ops.upsample2x(h)
            lo = (k - 1) // 2
            h = ops.conv2d(h, P[name + ".w"], P[name + ".b"], 1, (lo, k - 1 - lo))
        else:
            pad = (k - 1) // 2
            outpad = ls.stride + 2 * pad - k
            h = ops.conv2d_transpose(h, P[name + ".w"], P[name + ".b"], ls.stride, pad, outpad)
        h = _post(h, name, ls, P, model.bn, training)
    return h


def _as_batch(x, shape, dtype):
    x = np.asarray(x, dtype=dtype)
    if x.shape == tuple(shape):
        return x[None], True
    return x, False


def encode(model: VaeModel, x) -> LatentCode:
    """Posterior mean and log-variance for an input (or batch) in inference mode."""
    xb, single = _as_batch(x, model.arch.input_shape, model.dtype)
    P = model.param_tensors()
    mu, lv = encoder_graph(model, Tensor(xb), P)
    forward(mu)
    forward(lv)
    if single:
        return LatentCode(mu.values[0], lv.values[0])
    return LatentCode(mu.values, lv.values)


def encode_means(model: VaeModel, x, batch_size=256):
    x = np.asarray(x)
    return np.concatenate([encode(model, x[i:i + batch_size]).mean for i in range(0, len(x), batch_size)])


def reparameterize(code: LatentCode, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=code.mean.dtype)
    if noise.shape != code.mean.shape:
        raise ShapeError(f"reparameterize: noise shape {noise.shape} != latent shape {code.mean.shape}")
    return code.mean + np.exp(code.log_var / 2) * noise


def decode(model: VaeModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=model.dtype)
    single = z.ndim == 1
    if z.shape[-1] != model.latent_dim:
        raise ShapeError(f"decode: latent length {z.shape[-1]} != latent_dim {model.latent_dim}")
    zb = z[None] if single else z
    out = forward(decoder_graph(model, Tensor(zb), model.param_tensors())).values
    return out[0] if single else out


# -- loss and training ---------------------------------------------------------------

def elbo_graph(model, x: Tensor, noise: Tensor, P, training=True, kl_weight=1.0):
    """Returns (total, reconstruction, kl) scalar tensors.

    reconstruction: squared error summed over pixels, averaged over the batch.
    kl: 0.5 * sum_d (mu^2 + sigma^2 - 1 - log sigma^2), averaged over the batch.
    total = reconstruction + kl_weight * kl.
    """
    n = x.shape[0]
    mu, lv = encoder_graph(model, x, P, training)
    z = ops.add(mu, ops.mul(ops.exp(ops.scale(lv, 0.5)), noise))
    xr = decoder_graph(model, z, P, training)
    recon = ops.scale(ops.sum(ops.square(ops.sub(xr, x))), 1.0 / n)
    kl_terms = ops.sub(ops.add(ops.square(mu), ops.exp(lv)), ops.add(lv, Tensor(np.ones(1, dtype=x.values.dtype))))
    kl = ops.scale(ops.sum(kl_terms), 0.5 / n)
    total = ops.add(recon, kl if kl_weight == 1.0 else ops.scale(kl, kl_weight))
    return total, recon, kl


def kl_divergence(mu, log_var):
    """Batch-averaged KL of N(mu, exp(log_var)) from N(0, I)."""
    mu, log_var = np.atleast_2d(mu), np.atleast_2d(log_var)
    # expm1 keeps sigma^2 - 1 - log sigma^2 >= 0 for tiny log-variances
    return float(0.5 * np.sum(mu**2 + (np.expm1(log_var) - log_var)) / mu.shape[0])


def elbo_loss(model: VaeModel, batch, noise, training=False):
    """Evaluate (total, reconstruction, kl) as floats; raises NumericalError on non-finite terms."""
    batch = np.asarray(batch, dtype=model.dtype)
    noise = np.asarray(noise, dtype=model.dtype)
    if batch.shape[1:] != tuple(model.arch.input_shape):
        raise ShapeError(f"elbo_loss: batch shape {batch.shape} != (N,) + {tuple(model.arch.input_shape)}")
    if noise.shape != (batch.shape[0], model.latent_dim):
        raise ShapeError(f"elbo_loss: noise shape {noise.shape} != {(batch.shape[0], model.latent_dim)}")
    total, recon, kl = elbo_graph(model, Tensor(batch), Tensor(noise), model.param_tensors(), training)
    forward(total)
    vals = {"reconstruction": float(recon.values), "kl": float(kl.values), "total": float(total.values)}
    _check_finite(vals)
    return vals["total"], vals["reconstruction"], vals["kl"]


def _check_finite(vals, where=""):
    for term, v in vals.items():
        if not np.isfinite(v):
            raise NumericalError(f"non-finite {term} loss{where}")


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def train(model: VaeModel, data, epochs=50, lr=1e-3, batch_size=32, seed=0, progress=None,
          kl_warmup=0) -> VaeModel:
    """Train in place with Adam on the ELBO; returns ``model``.

    ``kl_warmup`` > 0 ramps the KL weight linearly from 0 to 1 over that many
    epochs (per batch), which delays posterior collapse on low-contrast
    features. Off by default. The loss history always records the unweighted
    ELBO terms.

    ``data`` is an (N, H, W, C) array or a Dataset. Shuffling and
    reparameterisation noise come from one generator seeded with ``seed``, so
    a run is deterministic. ``progress(epoch, record)`` is called after each
    epoch when given.
    """
    x = np.asarray(getattr(data, "samples", data), dtype=model.dtype)
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if len(x) == 0:
        raise ValueError("training data is empty")
    if x.shape[1:] != tuple(model.arch.input_shape):
        raise ShapeError(f"train: data sample shape {x.shape[1:]} != architecture input shape {tuple(model.arch.input_shape)}")
    if kl_warmup < 0:
        raise ValueError(f"kl_warmup must be >= 0, got {kl_warmup}")
    rng = np.random.default_rng(seed)
    opt = Adam(model.params, lr=lr)
    info = model.info
    info.seed, info.lr, info.batch_size, info.kl_warmup = seed, lr, batch_size, kl_warmup
    n = len(x)
    n_batches = -(-n // batch_size)
    for epoch in range(epochs):
        order = rng.permutation(n)
        sums = {"total": 0.0, "reconstruction": 0.0, "kl": 0.0}
        for bi, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # batch statistics need two samples
            xb = x[idx]
            noise = rng.standard_normal((len(idx), model.latent_dim)).astype(model.dtype)
            P = model.param_tensors(requires_grad=True)
            beta = min(1.0, (epoch + (bi + 1) / n_batches) / kl_warmup) if kl_warmup else 1.0
            objective, recon, kl = elbo_graph(model, Tensor(xb), Tensor(noise), P, training=True, kl_weight=beta)
            forward(objective)
            r, k = float(recon.values), float(kl.values)
            vals = {"total": r + k, "reconstruction": r, "kl": k}
            _check_finite(vals, f" at epoch {info.epochs + 1}, batch {bi}")
            backward(objective)
            opt.step(model.params, {k: t.grad for k, t in P.items()})
            for k in sums:
                sums[k] += vals[k] * len(idx)
        info.epochs += 1
        record = {k: v / n for k, v in sums.items()}
        info.loss_history.append(record)
        log.info("epoch %d total %.4f recon %.4f kl %.4f", info.epochs, record["total"],
                 record["reconstruction"], record["kl"])
        if progress is not None:
            progress(info.epochs, record)
    return model


# -- checkpoints -------------------------------------------------------------------------

def save_checkpoint(model: VaeModel, path) -> Path:
    arrays = {f"param/{k}": v.astype(np.float32) for k, v in model.params.items()}
    for k, st in model.bn.items():
        arrays[f"bn/{k}/mean"] = st.mean.astype(np.float32)
        arrays[f"bn/{k}/var"] = st.var.astype(np.float32)
    manifest = {
        "kind": "vae-checkpoint",
        "architecture": model.arch.to_dict(),
        "training": asdict(model.info),
        "bn": {k: {"momentum": st.momentum, "eps": st.eps} for k, st in model.bn.items()},
    }
    return save_container(path, manifest, arrays)


def load_checkpoint(path) -> VaeModel:
    doc, arrays = load_container(path)
    if doc.get("kind") != "vae-checkpoint":
        raise ShapeError(f"{path}: not a VAE checkpoint (kind={doc.get('kind')!r})")
    arch = VaeArchitecture.from_dict(doc["architecture"])
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    bn = {}
    for k, meta in doc["bn"].items():
        st = BatchNormState(len(arrays[f"bn/{k}/mean"]), meta["momentum"], meta["eps"])
        st.mean, st.var = arrays[f"bn/{k}/mean"], arrays[f"bn/{k}/var"]
        bn[k] = st
    expected, _ = _param_shapes(arch)
    for k, shape in expected.items():
        if k not in params or params[k].shape != tuple(shape):
            raise ShapeError(f"{path}: parameter {k} missing or shaped {params.get(k, np.empty(0)).shape}, expected {shape}")
    return VaeModel(arch, params, bn, TrainingInfo(**doc["training"]))


def write_loss_history(model: VaeModel, path):
    Path(path).write_text(json.dumps(model.info.loss_history, indent=2))
