"""Attentive neural process over (phi, sw, f_clay) -> sigma_o.

Three networks share one flat dict of named tensors:

* latent encoder: 3-layer MLP on (x, y), uniform self-attention, mean-pool,
  then mean and sigma heads for q(z | points);
* deterministic encoder: 2-layer MLP on (x, y) giving attention values,
  with keys and queries embedded by a shared 2-layer MLP on x and an
  8-head scaled dot-product cross-attention from targets to context;
* decoder: 3-layer MLP on (x*, r*, z) giving a mean and a raw scale.

Conductivity is modelled on a log scale by default (``y_transform="log"``).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import grad as G
from .datagen import NoiseConfig, SamplingRanges, gen_realization, make_training_batch, sample_params
from .grad import Tensor

SIGMA_FLOOR = 0.1
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

DEFAULT_HYPER = {
    "hidden": 16,
    "x_dim": 3,
    "y_dim": 1,
    "z_dim": 16,
    "heads": 8,
    "y_transform": "log",
}


def _layer_shapes(h: dict) -> list:
    hid, xd, yd, zd, heads = h["hidden"], h["x_dim"], h["y_dim"], h["z_dim"], h["heads"]
    if hid % heads:
        raise ValueError(f"hidden size {hid} is not divisible by {heads} heads")
    hs = hid // heads
    shapes = []

    def dense(name, fan_in, fan_out, bias=True):
        shapes.append((f"{name}.W", (fan_in, fan_out)))
        if bias:
            shapes.append((f"{name}.b", (fan_out,)))

    dense("lat.l1", xd + yd, hid)
    dense("lat.l2", hid, hid)
    dense("lat.l3", hid, hid)
    dense("lat.mu", hid, zd)
    dense("lat.sigma", hid, zd)
    dense("det.l1", xd + yd, hid)
    dense("det.l2", hid, hid)
    dense("att.emb1", xd, hid)
    dense("att.emb2", hid, hid)
    for k in range(heads):
        dense(f"att.h{k}.q", hid, hs, bias=False)
        dense(f"att.h{k}.k", hid, hs, bias=False)
        dense(f"att.h{k}.v", hid, hs, bias=False)
        dense(f"att.h{k}.o", hs, hid, bias=False)
    shapes.append(("att.out.b", (hid,)))
    dense("dec.l1", xd + hid + zd, hid)
    dense("dec.l2", hid, hid)
    dense("dec.l3", hid, 2 * yd)
    return shapes


@dataclass
class AnpWeights:
    tensors: dict
    hyper: dict = field(default_factory=lambda: dict(DEFAULT_HYPER))

    def __post_init__(self):
        expected = dict(_layer_shapes(self.hyper))
        missing = [k for k in expected if k not in self.tensors]
        if missing:
            raise KeyError(f"missing tensors: {missing}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"tensor {name} has shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def parameters(self) -> list:
        return list(self.tensors.values())

    def frozen(self) -> "AnpWeights":
        """Same data wrapped in tensors that record no graph."""
        return AnpWeights({k: Tensor(t.data) for k, t in self.tensors.items()}, dict(self.hyper))

    def copy(self) -> "AnpWeights":
        return AnpWeights(
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.tensors.items()},
            dict(self.hyper),
        )


def init_weights(rng: np.random.Generator, **hyper) -> AnpWeights:
    """Glorot-uniform matrices, zero biases."""
    h = dict(DEFAULT_HYPER, **hyper)
    tensors = {}
    for name, shape in _layer_shapes(h):
        if len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return AnpWeights(tensors, h)


def count_parameters(**hyper) -> int:
    h = dict(DEFAULT_HYPER, **hyper)
    return sum(int(np.prod(s)) for _, s in _layer_shapes(h))


# ---------------------------------------------------------------- forward pieces


def _dense(h, w: AnpWeights, name, act=True):
    out = G.broadcast_add_row(G.matmul(h, w[f"{name}.W"]), w[f"{name}.b"])
    return G.relu(out) if act else out


def _uniform_self_attention(h):
    # equal weights 1/n: every row is averaged with the set mean
    return G.mul(G.add(h, G.mean_over_axis(h, axis=0, keepdims=True)), 0.5)


def _scale(raw):
    return G.add(G.mul(G.softplus(raw), 1.0 - SIGMA_FLOOR), SIGMA_FLOOR)


def transform_y(y, weights: AnpWeights) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1, 1)
    mode = weights.hyper.get("y_transform", "log")
    if mode == "log":
        return np.log(y)
    if mode == "identity":
        return y
    raise ValueError(f"unknown y_transform {mode!r}")


def _xy(points, weights):
    x, y = points
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    if x.shape[0] == 0:
        raise ValueError("empty point set")
    return Tensor(x), Tensor(transform_y(y, weights))


@dataclass
class LatentStats:
    mu: Tensor
    sigma: Tensor


@dataclass
class Prediction:
    mean: Tensor
    sigma: Tensor


def latent_encode(points, weights: AnpWeights) -> LatentStats:
    """q(z | points) from (x, y) pairs."""
    x, y = _xy(points, weights)
    return _latent(x, y, weights)


def _latent(x: Tensor, y: Tensor, w: AnpWeights) -> LatentStats:
    h = G.concat([x, y], axis=1)
    h = _dense(h, w, "lat.l1")
    h = _dense(h, w, "lat.l2")
    h = _dense(h, w, "lat.l3", act=False)
    h = _uniform_self_attention(h)
    s = G.mean_over_axis(h, axis=0, keepdims=True)
    mu = _dense(s, w, "lat.mu", act=False)
    sigma = _scale(_dense(s, w, "lat.sigma", act=False))
    return LatentStats(mu, sigma)


def _embed(x: Tensor, w: AnpWeights) -> Tensor:
    return _dense(_dense(x, w, "att.emb1"), w, "att.emb2", act=False)


def _attention(queries: Tensor, keys: Tensor, values: Tensor, w: AnpWeights) -> Tensor:
    heads = w.hyper["heads"]
    head_size = w.hyper["hidden"] // heads
    scale = 1.0 / math.sqrt(head_size)
    rep = None
    for k in range(heads):
        q = G.matmul(queries, w[f"att.h{k}.q.W"])
        kk = G.matmul(keys, w[f"att.h{k}.k.W"])
        v = G.matmul(values, w[f"att.h{k}.v.W"])
        logits = G.mul(G.matmul(q, G.transpose(kk)), scale)
        o = G.matmul(G.softmax_over_axis(logits, axis=1), v)
        o = G.matmul(o, w[f"att.h{k}.o.W"])
        rep = o if rep is None else G.add(rep, o)
    return G.broadcast_add_row(rep, w["att.out.b"])


def _deterministic(xc: Tensor, yc: Tensor, xt: Tensor, w: AnpWeights) -> Tensor:
    h = G.concat([xc, yc], axis=1)
    h = _dense(h, w, "det.l1")
    h = _dense(h, w, "det.l2", act=False)
    values = _uniform_self_attention(h)
    return _attention(_embed(xt, w), _embed(xc, w), values, w)


def det_encode(context, x_targets, weights: AnpWeights) -> Tensor:
    """Per-target representation r* (n_targets x hidden)."""
    xc, yc = _xy(context, weights)
    xt = np.asarray(x_targets, dtype=float).reshape(len(x_targets), -1)
    if xt.shape[0] == 0:
        raise ValueError("no target points")
    return _deterministic(xc, yc, Tensor(xt), weights)


def _decode(r: Tensor, z: Tensor, xt: Tensor, w: AnpWeights) -> Prediction:
    n = xt.shape[0]
    z_rows = G.matmul(Tensor(np.ones((n, 1))), z)
    h = G.concat([xt, r, z_rows], axis=1)
    h = _dense(h, w, "dec.l1")
    h = _dense(h, w, "dec.l2")
    out = _dense(h, w, "dec.l3", act=False)
    mean = G.matmul(out, Tensor(np.array([[1.0], [0.0]])))
    raw = G.matmul(out, Tensor(np.array([[0.0], [1.0]])))
    return Prediction(mean, _scale(raw))


def decode(r, z, x_target, weights: AnpWeights) -> Prediction:
    xt = Tensor(np.asarray(x_target, dtype=float).reshape(len(x_target), -1))
    return _decode(G.as_tensor(r), G.as_tensor(z), xt, weights)


def gaussian_nll(y: Tensor, pred: Prediction) -> Tensor:
    """Per-point 0.5*log(2*pi*sigma^2) + (y - mu)^2 / (2 sigma^2), as a column."""
    z = G.div(G.sub(y, pred.mean), pred.sigma)
    return G.add(G.add(G.log(pred.sigma), G.mul(G.square(z), 0.5)), HALF_LOG_2PI)


def gaussian_kl(q: LatentStats, p: LatentStats) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over latent dimensions."""
    ratio = G.div(G.add(G.square(q.sigma), G.square(G.sub(q.mu, p.mu))), G.mul(G.square(p.sigma), 2.0))
    terms = G.sub(G.add(G.sub(G.log(p.sigma), G.log(q.sigma)), ratio), 0.5)
    return G.sum_over_axis(terms)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass
class Elbo:
    loss: Tensor  # negative ELBO per target point
    nll: Tensor
    kl: Tensor


def elbo_loss(context, targets, weights: AnpWeights, rng: Optional[np.random.Generator] = None,
              eps: Optional[np.ndarray] = None) -> Elbo:
    """Negative ELBO: mean target NLL + KL(q(z|targets) || q(z|context)) / n_targets.

    ``z`` is drawn by reparameterization with standard-normal ``eps`` taken
    from ``rng`` unless ``eps`` is given.
    """
    xc, yc = _xy(context, weights)
    xt, yt = _xy(targets, weights)
    zd = weights.hyper["z_dim"]
    if eps is None:
        rng = np.random.default_rng() if rng is None else rng
        eps = rng.standard_normal((1, zd))
    eps = np.asarray(eps, dtype=float).reshape(1, zd)
    prior = _latent(xc, yc, weights)
    post = _latent(xt, yt, weights)
    z = G.add(post.mu, G.mul(post.sigma, eps))
    r = _deterministic(xc, yc, xt, weights)
    pred = _decode(r, z, xt, weights)
    nll = G.mean_over_axis(gaussian_nll(yt, pred))
    kl = gaussian_kl(post, prior)
    loss = G.add(nll, G.mul(kl, 1.0 / xt.shape[0]))
    if not np.isfinite(loss.data):
        raise NonFiniteLoss(
            "non-finite ELBO",
            {"n_context": xc.shape[0], "n_targets": xt.shape[0], "nll": float(nll.data), "kl": float(kl.data),
             "y_range": [float(yt.data.min()), float(yt.data.max())]},
        )
    return Elbo(loss, nll, kl)


def predict(context, x_targets, weights: AnpWeights) -> Prediction:
    """Deterministic predictive distribution with z at the context posterior mean."""
    w = weights.frozen()
    xc, yc = _xy(context, w)
    xt = Tensor(np.asarray(x_targets, dtype=float).reshape(len(x_targets), -1))
    prior = _latent(xc, yc, w)
    r = _deterministic(xc, yc, xt, w)
    return _decode(r, prior.mu, xt, w)


def predict_nll(context, targets, weights: AnpWeights, mc_samples: int = 0, seed: int = 0) -> tuple:
    """Per-target NLL array and its mean.

    With ``mc_samples == 0`` z is the mean of q(z | context); otherwise the
    NLL is averaged over that many z draws from a generator seeded by ``seed``.
    """
    w = weights.frozen()
    xc, yc = _xy(context, w)
    xt, yt = _xy(targets, w)
    prior = _latent(xc, yc, w)
    r = _deterministic(xc, yc, xt, w)
    if mc_samples <= 0:
        per = gaussian_nll(yt, _decode(r, prior.mu, xt, w)).data.reshape(-1)
    else:
        rng = np.random.default_rng(seed)
        acc = np.zeros(xt.shape[0])
        for _ in range(mc_samples):
            eps = rng.standard_normal(prior.mu.shape)
            z = Tensor(prior.mu.data + prior.sigma.data * eps)
            acc += gaussian_nll(yt, _decode(r, z, xt, w)).data.reshape(-1)
        per = acc / mc_samples
    return per, float(per.mean())


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 100
    sets_per_epoch: int = 3000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_points: int = 200
    context_range: tuple = (50, 100)
    noise: NoiseConfig = NoiseConfig()
    ranges: SamplingRanges = SamplingRanges()
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs < 1 or self.sets_per_epoch < 1:
            raise ValueError("epochs and sets_per_epoch must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        lo, hi = self.context_range
        if not 1 <= lo <= hi <= self.n_points:
            raise ValueError(f"context range {self.context_range} incompatible with {self.n_points} points")


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, last_good: AnpWeights, curve: list):
        super().__init__(message)
        self.last_good = last_good
        self.curve = curve


@dataclass
class TrainResult:
    weights: AnpWeights
    curve: list  # one dict per epoch: epoch, nll, kl, loss


def train(config: TrainConfig, rng: np.random.Generator, progress=None) -> TrainResult:
    """Fresh realizations every epoch, one realization per Adam step.

    ``progress`` is called as ``progress(epoch, row)`` after every epoch.
    """
    init_rng, data_rng, eps_rng = rng.spawn(3)
    weights = init_weights(init_rng, **config.hyper)
    opt = Adam(weights.parameters(), config.lr, config.beta1, config.beta2, config.adam_eps)
    curve = []
    last_good = weights.copy()
    for epoch in range(1, config.epochs + 1):
        nll_sum = kl_sum = loss_sum = 0.0
        for step in range(config.sets_per_epoch):
            params = sample_params(data_rng, config.ranges)
            real = gen_realization(params, config.n_points, config.noise, data_rng, config.ranges)
            batch = make_training_batch(real, data_rng, config.context_range)
            opt.zero_grad()
            try:
                elbo = elbo_loss(batch.context, batch.targets, weights, eps_rng)
                elbo.loss.backward()
            except (NonFiniteLoss, FloatingPointError) as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}", last_good, curve) from exc
            if not all(np.all(np.isfinite(p.grad)) for p in weights.parameters() if p.grad is not None):
                raise TrainingDiverged(f"epoch {epoch} step {step}: non-finite gradient", last_good, curve)
            opt.step()
            nll_sum += float(elbo.nll.data)
            kl_sum += float(elbo.kl.data)
            loss_sum += float(elbo.loss.data)
        n = config.sets_per_epoch
        row = {"epoch": epoch, "nll": nll_sum / n, "kl": kl_sum / n, "loss": loss_sum / n}
        curve.append(row)
        last_good = weights.copy()
        if progress is not None:
            progress(epoch, row)
    return TrainResult(weights, curve)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"ANPCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointMissingTensorError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def save_checkpoint(weights: AnpWeights, path) -> None:
    """Magic, u64 manifest length, JSON manifest, then little-endian float32 buffers."""
    table, offset = [], 0
    names = [name for name, _ in _layer_shapes(weights.hyper)]
    for name in names:
        t = weights[name]
        nbytes = t.size * 4
        table.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += nbytes
    manifest = {"format_version": FORMAT_VERSION, "hyperparams": weights.hyper, "tensors": table}
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in names:
            fh.write(weights[name].data.astype("<f4").tobytes())


def load_checkpoint(path) -> AnpWeights:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes, not an ANP checkpoint")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointTruncatedError(f"{path}: truncated before manifest length")
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    if len(blob) < pos + hlen:
        raise CheckpointTruncatedError(f"{path}: truncated inside manifest")
    try:
        manifest = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable manifest ({exc})") from exc
    pos += hlen
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {manifest.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    hyper = dict(DEFAULT_HYPER, **manifest.get("hyperparams", {}))
    expected = dict(_layer_shapes(hyper))
    entries = {e["name"]: e for e in manifest.get("tensors", [])}
    for name, shape in expected.items():
        if name not in entries:
            raise CheckpointMissingTensorError(f"{path}: tensor {name!r} missing from manifest")
        if tuple(entries[name]["shape"]) != shape:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {tuple(entries[name]['shape'])}, expected {shape}"
            )
    tensors = {}
    for name, shape in expected.items():
        start = pos + entries[name]["offset"]
        count = int(np.prod(shape))
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointTruncatedError(f"{path}: data for tensor {name!r} is truncated")
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=start).astype(np.float64).reshape(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return AnpWeights(tensors, hyper)
