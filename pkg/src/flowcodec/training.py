"""Optimization: dequantized-likelihood warmup, the rate-distortion
objective with its dual reconstruction terms, AdaMax parameter updates,
and post-hoc tuning of the quantization steps.

The RD objective couples three terms per batch: total code length of the
dither-quantized latents (bits per image), the squared error of the full
reconstruction, and the squared error of the sampling-path
reconstruction that replaces all conditional latents by their mean
symbols.  Conditioning (mean, scale) during training comes from the
forward features, which keeps the graph cheap; the coder's
decoder-simulated conditioning is exercised separately in the codec.

Data loading may be concurrent; the optimization step owns the
parameters exclusively; evaluation helpers are read-only.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .entropy import QuantSpec, latent_rate_bits, mean_symbol
from .errors import NumericError
from .flow import FlowModel
from .quantize import draw_noise, round_to_grid, universal_quantize
from .tensor import Tensor, no_grad

PSNR_CAP_DB = 99.0


@dataclass
class TrainConfig:
    """Hyperparameters; the defaults mirror the reference configuration
    with desk-scale sizes."""

    lambda_rd: float = 500.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    delta_train: float = 1.0
    batch_size: int = 8
    steps: int = 500
    warmup_steps: int = 0
    patch: int = 32
    pixel_scale: float = 255.0
    dequant_amplitude: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.lambda_rd < 0 or self.lr <= 0 or self.delta_train <= 0:
            raise ValueError("lambda_rd must be >= 0; lr and delta_train > 0")
        if self.batch_size < 1 or self.steps < 0 or self.patch < 8:
            raise ValueError("batch_size >= 1, steps >= 0, patch >= 8 required")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """key=value text; '#' starts a comment; unknown keys rejected."""
        values = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                if "=" not in body:
                    raise ValueError(f"{path}:{lineno}: expected key=value, got {body!r}")
                key, raw = (s.strip() for s in body.split("=", 1))
                values[key] = raw
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            target = known[key]
            kwargs[key] = int(raw) if target == "int" else float(raw)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


# -- optimizers ------------------------------------------------------------------


class AdaMax:
    """Infinity-norm variant of Adam; state persists across steps."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-7):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.u = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        correction = 1.0 - self.beta1 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad_array()
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.u[i] = np.maximum(self.beta2 * self.u[i], np.abs(g))
            p.data = p.data - (self.lr / correction) * self.m[i] / (self.u[i] + self.eps)


class Adam:
    """Standard Adam; used for quantization-step tuning."""

    def __init__(self, params: list[Tensor], lr: float = 1e-1, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad_array()
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


# -- metrics ----------------------------------------------------------------------


def mse(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((np.asarray(x, dtype=np.float64) - y) ** 2))


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 255.0) -> float:
    """10 log10(peak^2 / mse), capped at 99 dB for identical inputs."""
    if np.asarray(x).shape != np.asarray(y).shape:
        raise ValueError(f"psnr: shape mismatch {np.shape(x)} vs {np.shape(y)}")
    err = mse(x, y)
    if err == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(peak * peak / err), PSNR_CAP_DB))


def bpp(n_bytes: int, height: int, width: int) -> float:
    """Bits per pixel of the original (uncropped) image."""
    return 8.0 * n_bytes / (height * width)


# -- losses ------------------------------------------------------------------------


def _forward_conditionals(model: FlowModel, hs: list[Tensor]):
    mu2, sig2 = model.conditioning_params(0, hs[0])
    mu1, sig1 = model.conditioning_params(1, hs[1])
    return mu1, sig1, mu2, sig2


def _train_spec(model: FlowModel, delta: float):
    return (delta, delta, np.full(model.base_channels, delta))


def nll_loss(model: FlowModel, batch: np.ndarray, cfg: TrainConfig,
             rng: np.random.Generator) -> Tensor:
    """Mean over the batch of total bits of the dequantized batch under
    the bin-integrated models at the training step size; no Jacobian term
    exists because every layer is volume preserving."""
    xi = rng.uniform(0.0, cfg.dequant_amplitude, size=batch.shape)
    x = Tensor((batch + xi).astype(model.dtype))
    zs, hs = model.forward(x)
    mu1, sig1, mu2, sig2 = _forward_conditionals(model, hs)
    rate = latent_rate_bits(zs[2], zs[1], zs[0], model.prior,
                            mu1, sig1, mu2, sig2, _train_spec(model, cfg.delta_train))
    return T.div(rate, float(batch.shape[0]))


def rd_terms(model: FlowModel, batch: np.ndarray, cfg: TrainConfig,
             quantize_fn, substitute_fn):
    """(rate_bits_per_image, mse_full, mse_sampled) for one batch.

    `quantize_fn(z, delta, level)` produces the coded latents;
    `substitute_fn(mu, delta)` produces the sampling-path stand-ins.
    Injecting these keeps one shared graph for training (dithered
    rounding, mean symbols) and for the smooth gradient-check variant.

    The rate term conditions on the forward features (cheap); the
    sampling path is sequential exactly like a one-level decode: each
    conditional mean comes from features rebuilt off the quantized base
    latent and the already-substituted shallower level.
    """
    x = Tensor(batch.astype(model.dtype))
    zs, hs = model.forward(x)
    d = cfg.delta_train
    z2_hat = quantize_fn(zs[0], d, 2)
    z1_hat = quantize_fn(zs[1], d, 1)
    z0_hat = quantize_fn(zs[2], d, 0)
    mu1, sig1, mu2, sig2 = _forward_conditionals(model, hs)

    rate = T.div(
        latent_rate_bits(z0_hat, z1_hat, z2_hat, model.prior,
                         mu1, sig1, mu2, sig2, _train_spec(model, d)),
        float(batch.shape[0]),
    )
    x_full = model.inverse([z2_hat, z1_hat, z0_hat])

    h1_hat = model.levels[2].inverse(z0_hat, None)
    mu1_s, _ = model.conditioning_params(1, h1_hat)
    z1_tilde = substitute_fn(mu1_s, d)
    h2_hat = model.levels[1].inverse(z1_tilde, h1_hat)
    mu2_s, _ = model.conditioning_params(0, h2_hat)
    z2_tilde = substitute_fn(mu2_s, d)
    x_sampled = model.levels[0].inverse(z2_tilde, h2_hat)

    err_full = T.reduce_mean(T.mul(T.sub(x, x_full), T.sub(x, x_full)))
    err_sampled = T.reduce_mean(T.mul(T.sub(x, x_sampled), T.sub(x, x_sampled)))
    return rate, err_full, err_sampled


def rd_loss(model: FlowModel, batch: np.ndarray, cfg: TrainConfig,
            rng: np.random.Generator):
    """Training objective: rate + lambda * (full + sampling distortion).

    Universal quantization with one shared dither draw per latent tensor
    per step; mean-symbol substitution on the sampling path.
    """
    draws = {level: draw_noise(rng, cfg.delta_train) for level in (2, 1, 0)}

    def quantize_fn(z, delta, level):
        return universal_quantize(z, delta, draws[level])

    rate, err_full, err_sampled = rd_terms(model, batch, cfg, quantize_fn, mean_symbol)
    loss = T.add(rate, T.mul(T.add(err_full, err_sampled), cfg.lambda_rd))
    return loss, {
        "rate": rate.item(),
        "distortion": err_full.item() + err_sampled.item(),
        "mse_full": err_full.item(),
        "psnr": psnr_from_mse(err_full.item(), cfg.pixel_scale),
    }


def psnr_from_mse(err: float, peak: float) -> float:
    if err <= 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(peak * peak / err), PSNR_CAP_DB))


# -- corpus ------------------------------------------------------------------------


def sample_batch(corpus: list[np.ndarray], rng: np.random.Generator,
                 batch_size: int, patch: int) -> np.ndarray:
    """Random crops of random corpus images, stacked to (B,C,patch,patch)."""
    if not corpus:
        raise ValueError("empty corpus")
    out = np.empty((batch_size, corpus[0].shape[0], patch, patch), dtype=np.float64)
    for b in range(batch_size):
        img = corpus[int(rng.integers(len(corpus)))]
        _, h, w = img.shape
        if h < patch or w < patch:
            raise ValueError(f"corpus image {img.shape} smaller than patch {patch}")
        top = int(rng.integers(h - patch + 1))
        left = int(rng.integers(w - patch + 1))
        out[b] = img[:, top : top + patch, left : left + patch]
    return out


# -- training loop -----------------------------------------------------------------


def train(model: FlowModel, corpus: list[np.ndarray], cfg: TrainConfig,
          metrics_path=None) -> list[dict]:
    """Optimize the model in place; returns per-step metric rows.

    Deterministic under a fixed config seed: batch sampling, dequant
    noise and dither draws all come from one seeded generator.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    opt = AdaMax(model.params.tensors(), lr=cfg.lr, beta1=cfg.beta1,
                 beta2=cfg.beta2, eps=cfg.eps)
    history: list[dict] = []
    writer = open(metrics_path, "w") if metrics_path else None
    try:
        if writer:
            writer.write("step,nll,rate,distortion,psnr\n")
        for step in range(cfg.steps):
            batch = sample_batch(corpus, rng, cfg.batch_size, cfg.patch)
            model.params.zero_grads()
            if step < cfg.warmup_steps:
                loss = nll_loss(model, batch, cfg, rng)
                row = {"step": step, "nll": loss.item(), "rate": loss.item(),
                       "distortion": float("nan"), "psnr": float("nan"),
                       "loss": loss.item()}
            else:
                loss, parts = rd_loss(model, batch, cfg, rng)
                with no_grad():
                    nll_now = nll_loss(model, batch, cfg, rng).item()
                row = {"step": step, "nll": nll_now, "rate": parts["rate"],
                       "distortion": parts["distortion"], "psnr": parts["psnr"],
                       "loss": loss.item()}
            if not np.isfinite(loss.item()):
                raise NumericError(f"training loss became non-finite at step {step}")
            loss.backward()
            opt.step()
            history.append(row)
            if writer:
                writer.write(
                    f"{row['step']},{row['nll']!r},{row['rate']!r},"
                    f"{row['distortion']!r},{row['psnr']!r}\n"
                )
    finally:
        if writer:
            writer.close()
    return history


# -- quantization-step tuning ---------------------------------------------------------


def finetune_deltas(model: FlowModel, images: list[np.ndarray], lam: float,
                    steps: int = 120, lr: float = 1e-1, seed: int = 0) -> QuantSpec:
    """Tune the step set on frozen parameters for one rate weight.

    Steps are optimized as log-values (positivity), with gradients
    flowing through the straight-through grid rounding and the
    bin-probability formulas.  On divergence the learning rate is halved
    once; a second failure aborts.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if not images:
        raise ValueError("empty calibration set")

    from .codec import pad_to_multiple  # local import avoids a cycle

    cached = []
    with no_grad():
        for img in images:
            padded = pad_to_multiple(np.asarray(img, dtype=np.float64), 8)
            zs, hs = model.forward(Tensor(padded[None]))
            mu1, sig1, mu2, sig2 = _forward_conditionals(model, hs)
            cached.append({
                "x": padded[None],
                "z": [z.data for z in zs],
                "cond": (mu1.data, sig1.data, mu2.data, sig2.data),
            })

    def attempt(rate_lr: float) -> QuantSpec | None:
        log_d2 = Tensor(np.array(0.0), requires_grad=True)
        log_d1 = Tensor(np.array(0.0), requires_grad=True)
        log_d0 = Tensor(np.zeros(model.base_channels), requires_grad=True)
        opt = Adam([log_d2, log_d1, log_d0], lr=rate_lr)
        for _ in range(steps):
            for p in (log_d2, log_d1, log_d0):
                p.zero_grad()
            total = None
            for entry in cached:
                d2, d1, d0 = T.exp(log_d2), T.exp(log_d1), T.exp(log_d0)
                z2 = round_to_grid(Tensor(entry["z"][0]), d2)
                z1 = round_to_grid(Tensor(entry["z"][1]), d1)
                z0 = round_to_grid(Tensor(entry["z"][2]), d0.reshape(1, -1, 1, 1))
                mu1, sig1, mu2, sig2 = (Tensor(a) for a in entry["cond"])
                rate = latent_rate_bits(z0, z1, z2, model.prior,
                                        mu1, sig1, mu2, sig2, (d2, d1, d0))
                x_hat = model.inverse([z2, z1, z0])
                x = Tensor(entry["x"])
                err = T.reduce_mean(T.mul(T.sub(x, x_hat), T.sub(x, x_hat)))
                term = T.add(rate, T.mul(err, lam))
                total = term if total is None else T.add(total, term)
            loss = T.div(total, float(len(cached)))
            if not np.isfinite(loss.item()):
                return None
            loss.backward()
            opt.step()
        if not (np.isfinite(log_d2.item()) and np.isfinite(log_d1.item())
                and np.all(np.isfinite(log_d0.data))):
            return None
        return QuantSpec(float(np.exp(log_d2.item())), float(np.exp(log_d1.item())),
                         np.exp(log_d0.data))

    result = attempt(lr)
    if result is None:
        result = attempt(lr / 2.0)
    if result is None:
        raise NumericError("step tuning diverged even after halving the learning rate")
    return result
