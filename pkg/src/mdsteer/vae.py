"""Dense variational autoencoder over flattened contact maps, numpy only.

Encoder: x -> relu(W1 x + b1) -> (mu, logvar).  Decoder: z -> relu(Wd1 z + bd1)
-> sigmoid(Wd2 . + bd2).  Gradients are written out by hand and checked against
finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CorruptBlob, NonFiniteError, ShapeMismatch

PARAM_ORDER = ("enc_W1", "enc_b1", "enc_Wmu", "enc_bmu", "enc_Wlv", "enc_blv",
               "dec_W1", "dec_b1", "dec_W2", "dec_b2")
CLAMP = 1e-7
_MAGIC = b"VAEW"
_HEADER = struct.Struct("<4sqqqqd")


def param_shapes(beads: int, hidden: int, latent: int) -> dict[str, tuple[int, ...]]:
    p = beads * beads
    return {
        "enc_W1": (hidden, p), "enc_b1": (hidden,),
        "enc_Wmu": (latent, hidden), "enc_bmu": (latent,),
        "enc_Wlv": (latent, hidden), "enc_blv": (latent,),
        "dec_W1": (hidden, latent), "dec_b1": (hidden,),
        "dec_W2": (p, hidden), "dec_b2": (p,),
    }


@dataclass(frozen=True, eq=False)
class VaeModel:
    beads: int
    hidden: int
    latent: int
    params: dict[str, np.ndarray]
    dropout_p: float = 0.4
    version: int = 0
    rmsprop_state: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.beads, self.hidden, self.latent)
        for name, shape in shapes.items():
            if name not in self.params or self.params[name].shape != shape:
                got = None if name not in self.params else self.params[name].shape
                raise ShapeMismatch(f"{name}: expected {shape}, got {got}")
        if not self.rmsprop_state:
            object.__setattr__(self, "rmsprop_state", {k: np.zeros(s) for k, s in shapes.items()})

    @property
    def input_size(self) -> int:
        return self.beads * self.beads


def init_model(beads: int, hidden: int = 128, latent: int = 10, dropout: float = 0.4, seed: int = 0) -> VaeModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(beads, hidden, latent).items():
        if len(shape) == 2:
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-lim, lim, size=shape)
        else:
            params[name] = np.zeros(shape)
    return VaeModel(beads, hidden, latent, params, dropout)


def _as_batch(model: VaeModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x.reshape(len(x), -1)
    if x2.shape[1] != model.input_size:
        raise ShapeMismatch(f"input has {x2.shape[1]} features, model expects {model.input_size}")
    return x2, single


def _relu(a):
    return np.maximum(a, 0.0)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def encode(model: VaeModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic encoder pass (no dropout).  Accepts one input or a batch."""
    X, single = _as_batch(model, x)
    p = model.params
    a = _relu(X @ p["enc_W1"].T + p["enc_b1"])
    mu = a @ p["enc_Wmu"].T + p["enc_bmu"]
    lv = a @ p["enc_Wlv"].T + p["enc_blv"]
    return (mu[0], lv[0]) if single else (mu, lv)


def reparameterize(mu, logvar, noise) -> np.ndarray:
    mu, logvar, noise = (np.asarray(v, dtype=np.float64) for v in (mu, logvar, noise))
    if not (mu.shape == logvar.shape == noise.shape):
        raise ShapeMismatch(f"shapes {mu.shape}, {logvar.shape}, {noise.shape} differ")
    return mu + np.exp(0.5 * logvar) * noise


def decode(model: VaeModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    Z = z[None, :] if single else z
    if Z.shape[1] != model.latent:
        raise ShapeMismatch(f"latent has {Z.shape[1]} dims, model expects {model.latent}")
    p = model.params
    h = _relu(Z @ p["dec_W1"].T + p["dec_b1"])
    xhat = _sigmoid(h @ p["dec_W2"].T + p["dec_b2"])
    return xhat[0] if single else xhat


def kl_divergence(mu, logvar) -> float:
    """Batch-mean KL(N(mu, exp(logvar)) || N(0, 1))."""
    mu, logvar = np.atleast_2d(mu), np.atleast_2d(logvar)
    return float(-0.5 * np.sum(1.0 + logvar - mu**2 - np.exp(logvar)) / len(mu))


def bce(target, xhat) -> float:
    """Batch-mean of the pixel-summed binary cross entropy, on clamped predictions."""
    target, xhat = np.atleast_2d(target), np.atleast_2d(xhat)
    xc = np.clip(xhat, CLAMP, 1.0 - CLAMP)
    return float(-np.sum(target * np.log(xc) + (1.0 - target) * np.log1p(-xc)) / len(target))


def loss_and_grads(model: VaeModel, X: np.ndarray, noise: np.ndarray,
                   masks: tuple[np.ndarray, np.ndarray] | None = None, with_loss: bool = True):
    """ELBO loss pieces and parameter gradients for one batch.

    ``masks`` are the (already inverse-scaled) dropout masks for the encoder
    and decoder hidden layers; ``None`` disables dropout.  With
    ``with_loss=False`` the loss values are skipped (returned as NaN).
    """
    p = model.params
    n = len(X)
    a_pre = X @ p["enc_W1"].T + p["enc_b1"]
    a = _relu(a_pre)
    if masks is not None:
        a = a * masks[0]
    mu = a @ p["enc_Wmu"].T + p["enc_bmu"]
    lv = a @ p["enc_Wlv"].T + p["enc_blv"]
    std = np.exp(0.5 * lv)
    z = mu + std * noise
    h_pre = z @ p["dec_W1"].T + p["dec_b1"]
    h = _relu(h_pre)
    if masks is not None:
        h = h * masks[1]
    xhat = _sigmoid(h @ p["dec_W2"].T + p["dec_b2"])

    if with_loss:
        xc = np.clip(xhat, CLAMP, 1.0 - CLAMP)
        bce_v = float(-np.sum(X * np.log(xc) + (1.0 - X) * np.log1p(-xc)) / n)
        kl_v = float(-0.5 * np.sum(1.0 + lv - mu**2 - np.exp(lv)) / n)
        loss = bce_v + kl_v
        if not np.isfinite(loss):
            raise NonFiniteError("ELBO loss is not finite")
    else:
        loss = bce_v = kl_v = float("nan")

    inside = (xhat > CLAMP) & (xhat < 1.0 - CLAMP)
    d_logit = np.where(inside, xhat - X, 0.0) / n
    g = {}
    g["dec_W2"] = d_logit.T @ h
    g["dec_b2"] = d_logit.sum(axis=0)
    d_h = d_logit @ p["dec_W2"]
    if masks is not None:
        d_h = d_h * masks[1]
    d_hpre = d_h * (h_pre > 0)
    g["dec_W1"] = d_hpre.T @ z
    g["dec_b1"] = d_hpre.sum(axis=0)
    d_z = d_hpre @ p["dec_W1"]
    d_mu = d_z + mu / n
    d_lv = d_z * 0.5 * std * noise + 0.5 * (np.exp(lv) - 1.0) / n
    g["enc_Wmu"] = d_mu.T @ a
    g["enc_bmu"] = d_mu.sum(axis=0)
    g["enc_Wlv"] = d_lv.T @ a
    g["enc_blv"] = d_lv.sum(axis=0)
    d_a = d_mu @ p["enc_Wmu"] + d_lv @ p["enc_Wlv"]
    if masks is not None:
        d_a = d_a * masks[0]
    d_apre = d_a * (a_pre > 0)
    g["enc_W1"] = d_apre.T @ X
    g["enc_b1"] = d_apre.sum(axis=0)
    return loss, bce_v, kl_v, g


def elbo_loss(model: VaeModel, batch, noise) -> tuple[float, float, float]:
    """(loss, bce, kl) with dropout disabled and the given reparameterization noise."""
    X, _ = _as_batch(model, batch)
    if len(X) == 0:
        raise ValueError("empty batch")
    noise = np.asarray(noise, dtype=np.float64).reshape(len(X), model.latent)
    loss, b, k, _ = loss_and_grads(model, X, noise)
    return loss, b, k


def rmsprop_update(params, state, grads, lr: float, rho: float, eps: float):
    """Return updated (params, state); s <- rho s + (1-rho) g^2, theta <- theta - lr g / (sqrt(s) + eps)."""
    new_p, new_s = {}, {}
    for k in PARAM_ORDER:
        s = rho * state[k] + (1.0 - rho) * grads[k] ** 2
        new_s[k] = s
        new_p[k] = params[k] - lr * grads[k] / (np.sqrt(s) + eps)
    return new_p, new_s


def _rmsprop_inplace(params, state, grads, lr: float, rho: float, eps: float):
    """Same arithmetic (and rounding) as :func:`rmsprop_update`, without new arrays."""
    for k in PARAM_ORDER:
        g, s = grads[k], state[k]
        g2 = g * g
        g2 *= 1.0 - rho
        s *= rho
        s += g2
        den = np.sqrt(s)
        den += eps
        step = lr * g
        step /= den
        params[k] -= step


def train(model: VaeModel, batch, epochs: int, rng: np.random.Generator, *, lr: float = 0.001,
          rho: float = 0.9, eps: float = 1e-8, batch_size: int | None = None,
          dropout: bool = True) -> VaeModel:
    """Run ``epochs`` shuffled passes of minibatch RMSprop; returns a new model, version + 1."""
    X, _ = _as_batch(model, batch)
    n = len(X)
    if n == 0:
        raise ValueError("empty training batch")
    bs = n if not batch_size else min(batch_size, n)
    params = {k: v.copy() for k, v in model.params.items()}
    state = {k: v.copy() for k, v in model.rmsprop_state.items()}
    keep = 1.0 - model.dropout_p
    use_dropout = dropout and model.dropout_p > 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            xb = X[idx]
            noise = rng.standard_normal((len(idx), model.latent))
            masks = None
            if use_dropout:
                masks = tuple((rng.random((len(idx), model.hidden)) < keep) / keep for _ in range(2))
            work = replace(model, params=params, rmsprop_state=state)
            _, _, _, grads = loss_and_grads(work, xb, noise, masks, with_loss=False)
            _rmsprop_inplace(params, state, grads, lr, rho, eps)
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"parameter {k} became non-finite during training")
    return replace(model, params=params, rmsprop_state=state, version=model.version + 1)


# ---------------------------------------------------------------------------
# weight blobs


def export_weights(model: VaeModel) -> bytes:
    """Little-endian blob: header (magic, B, h, d, version, dropout) then float64 params."""
    parts = [_HEADER.pack(_MAGIC, model.beads, model.hidden, model.latent, model.version, model.dropout_p)]
    for k in PARAM_ORDER:
        parts.append(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())
    return b"".join(parts)


def import_weights(blob: bytes) -> VaeModel:
    if len(blob) < _HEADER.size:
        raise CorruptBlob(f"blob of {len(blob)} bytes is shorter than the header")
    magic, beads, hidden, latent, version, dropout = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise CorruptBlob("bad magic")
    if min(beads, hidden, latent) < 1 or beads > 1 << 16 or hidden > 1 << 20 or latent > 1 << 16:
        raise CorruptBlob(f"implausible header B={beads} h={hidden} d={latent}")
    shapes = param_shapes(beads, hidden, latent)
    expected = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(blob) != expected:
        raise CorruptBlob(f"blob is {len(blob)} bytes, header implies {expected}")
    params, off = {}, _HEADER.size
    for k in PARAM_ORDER:
        size = int(np.prod(shapes[k]))
        params[k] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shapes[k])
        if not np.all(np.isfinite(params[k])):
            raise CorruptBlob(f"non-finite values in {k}")
        off += 8 * size
    return VaeModel(beads, hidden, latent, params, dropout, version)
