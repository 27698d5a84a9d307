"""Contrastive pretraining of a tabular encoder over corrupted views."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset, Marginals, corrupt
from .ndcore import (Network, OptimizerState, ShapeError, TrainingDivergence,
                     adam_update, apply_deltas, backward, forward, init_network, load_checkpoint,
                     save_checkpoint, squared_error)


class FingerprintMismatch(ValueError):
    """Data preprocessed differently from the data the encoder was trained on."""


@dataclass
class ContrastiveModel:
    encoder: Network
    decoder: Network
    temperature: float = 0.1
    reconstructor: Network | None = None
    corruption_rate: float = 0.2
    fingerprint: str = ""

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.encoder.out_dim != self.decoder.in_dim:
            raise ShapeError("encoder output dim != decoder input dim")

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim

    def networks(self) -> list[Network]:
        nets = [self.encoder, self.decoder]
        return nets + [self.reconstructor] if self.reconstructor is not None else nets

    def params(self) -> list[np.ndarray]:
        return [p for net in self.networks() for p in net.params()]

    def touch(self) -> None:
        for net in self.networks():
            net.version += 1

    def copy(self) -> "ContrastiveModel":
        return ContrastiveModel(self.encoder.copy(), self.decoder.copy(), self.temperature,
                                self.reconstructor.copy() if self.reconstructor else None,
                                self.corruption_rate, self.fingerprint)


def build_model(in_dim: int, *, hidden: int = 256, latent: int = 128, projection: int = 64,
                temperature: float = 0.1, reconstruction: bool = False,
                seed: int = 0) -> ContrastiveModel:
    rng = np.random.default_rng(seed)
    encoder = init_network([in_dim, hidden, latent], ["relu", "relu"], rng)
    decoder = init_network([latent, latent, projection], ["relu", "identity"], rng)
    recon = init_network([latent, hidden, in_dim], ["relu", "identity"], rng) if reconstruction else None
    return ContrastiveModel(encoder, decoder, temperature, recon)


@dataclass
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 128
    corruption_rate: float = 0.2
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    recon_weight: float = 1.0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2: the loss needs negatives")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError("corruption_rate must lie in [0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


def _unit_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    return z / norms, norms


def nt_xent(z_a: np.ndarray, z_b: np.ndarray, temperature: float):
    """Symmetric normalized temperature-scaled cross-entropy.

    Row i of ``z_a`` and row i of ``z_b`` are the positive pair; every other
    row of either view is a negative.  Returns ``(loss, grad_a, grad_b)``.
    """
    m = z_a.shape[0]
    if m < 2 or z_b.shape != z_a.shape:
        raise ValueError(f"need two paired views with at least 2 rows, got {z_a.shape}, {z_b.shape}")
    u, norms = _unit_rows(np.vstack([z_a, z_b]))
    s = (u @ u.T) / temperature
    np.fill_diagonal(s, -np.inf)
    pos = np.concatenate([np.arange(m, 2 * m), np.arange(m)])
    rows = np.arange(2 * m)
    row_max = s.max(axis=1, keepdims=True)
    e = np.exp(s - row_max)
    denom = e.sum(axis=1)
    lse = np.log(denom) + row_max[:, 0]
    loss = float(np.mean(lse - s[rows, pos]))

    g = e / denom[:, None]
    g[rows, pos] -= 1.0
    g /= 2 * m
    du = (g + g.T) @ u / temperature
    dz = (du - u * np.sum(u * du, axis=1, keepdims=True)) / norms
    return loss, dz[:m], dz[m:]


def batch_gradients(model: ContrastiveModel, x: np.ndarray, views: tuple[np.ndarray, np.ndarray] | None,
                    recon_weight: float = 1.0) -> tuple[float, list[np.ndarray]]:
    """Loss and gradients (aligned with ``model.params()``) for one batch.

    With ``views`` the contrastive loss is used, plus the reconstruction term
    when the model has a reconstructor.  With ``views=None`` only the
    reconstruction loss on clean ``x`` is used.
    """
    grads = [np.zeros_like(p) for p in model.params()]
    n_enc = len(model.encoder.params())
    n_dec = len(model.decoder.params())
    if views is None:
        if model.reconstructor is None:
            raise ValueError("reconstruction objective needs a reconstructor")
        h, enc_cache = forward(model.encoder, x)
        r, rec_cache = forward(model.reconstructor, h)
        loss, gr = squared_error(r, x)
        rec_grads, gh = backward(model.reconstructor, rec_cache, gr, return_input_grad=True)
        grads[n_enc + n_dec:] = rec_grads.arrays()
        grads[:n_enc] = backward(model.encoder, enc_cache, gh).arrays()
        return loss, grads

    va, vb = views
    m = va.shape[0]
    h, enc_cache = forward(model.encoder, np.vstack([va, vb]))
    z, dec_cache = forward(model.decoder, h)
    loss, ga, gb = nt_xent(z[:m], z[m:], model.temperature)
    dec_grads, gh = backward(model.decoder, dec_cache, np.vstack([ga, gb]), return_input_grad=True)
    grads[n_enc:n_enc + n_dec] = dec_grads.arrays()
    if model.reconstructor is not None and recon_weight > 0:
        r, rec_cache = forward(model.reconstructor, h)
        rloss, gr = squared_error(r, np.vstack([x, x]))
        rec_grads, gh2 = backward(model.reconstructor, rec_cache, recon_weight * gr,
                                  return_input_grad=True)
        loss += recon_weight * rloss
        gh = gh + gh2
        grads[n_enc + n_dec:] = rec_grads.arrays()
    grads[:n_enc] = backward(model.encoder, enc_cache, gh).arrays()
    return loss, grads


GradHook = Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]]
UpdateHook = Callable[[list[np.ndarray]], list[np.ndarray]]


def train_contrastive(model: ContrastiveModel, x: np.ndarray, cfg: PretrainConfig, *,
                      blocks: list[slice] | None = None,
                      grad_hook: GradHook | None = None,
                      update_hook: UpdateHook | None = None) -> tuple[ContrastiveModel, list[float]]:
    """Shared training loop.  ``model`` is trained in place.

    ``grad_hook(params)`` returns an extra (loss, grads) term added to each
    batch; ``update_hook(deltas)`` may rescale the optimizer's parameter
    deltas before they are applied.  ``blocks`` groups one-hot columns so
    corruption resamples them as a unit.
    """
    n = x.shape[0]
    if n < 2:
        raise ValueError("contrastive training needs at least 2 rows")
    rng = np.random.default_rng(cfg.seed)
    marginals = Marginals.from_features(x, blocks)
    params = model.params()
    state = OptimizerState.for_params(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            batch = x[idx]
            views = (corrupt(batch, marginals, cfg.corruption_rate, rng),
                     corrupt(batch, marginals, cfg.corruption_rate, rng))
            loss, grads = batch_gradients(model, batch, views, cfg.recon_weight)
            if grad_hook is not None:
                extra_loss, extra = grad_hook(params)
                loss += extra_loss
                grads = [g + e for g, e in zip(grads, extra)]
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, batch starting {start}")
            deltas = adam_update(grads, state)
            if update_hook is not None:
                deltas = update_hook(deltas)
            apply_deltas(params, deltas)
            model.touch()
            total += loss * len(idx)
            count += len(idx)
        trace.append(total / count)
    if not all(np.isfinite(p).all() for p in params):
        raise TrainingDivergence("non-finite parameters after training")
    return model, trace


def pretrain(model: ContrastiveModel, ds: Dataset | np.ndarray,
             cfg: PretrainConfig) -> tuple[ContrastiveModel, list[float]]:
    """Train a copy of ``model``; returns (trained model, per-epoch mean loss)."""
    trained = model.copy()
    trained.corruption_rate = cfg.corruption_rate
    if isinstance(ds, Dataset):
        trained.fingerprint = ds.fingerprint()
        x, blocks = ds.features, ds.blocks()
    else:
        x, blocks = np.asarray(ds, dtype=np.float64), None
    if cfg.epochs == 0:
        return trained, []
    return train_contrastive(trained, x, cfg, blocks=blocks)


def encode(model: ContrastiveModel, x: np.ndarray) -> np.ndarray:
    """Deterministic representation of ``x`` (no corruption)."""
    return forward(model.encoder, x)[0]


def encode_dataset(model: ContrastiveModel, ds: Dataset) -> np.ndarray:
    if model.fingerprint and model.fingerprint != ds.fingerprint():
        raise FingerprintMismatch(f"encoder trained on data {model.fingerprint}, "
                                  f"got {ds.fingerprint()}")
    return encode(model, ds.features)


def save_model(path: str | Path, model: ContrastiveModel) -> None:
    nets = {"encoder": model.encoder, "decoder": model.decoder}
    if model.reconstructor is not None:
        nets["reconstructor"] = model.reconstructor
    header = {"kind": "contrastive", "temperature": model.temperature,
              "corruption_rate": model.corruption_rate, "fingerprint": model.fingerprint,
              "encoder_dims": model.encoder.dims, "decoder_dims": model.decoder.dims}
    save_checkpoint(path, nets, header)


def load_model(path: str | Path) -> ContrastiveModel:
    nets, header, _ = load_checkpoint(path)
    if header.get("kind") != "contrastive":
        raise ValueError(f"{path} is not a contrastive model checkpoint")
    return ContrastiveModel(nets["encoder"], nets["decoder"], header["temperature"],
                            nets.get("reconstructor"), header["corruption_rate"],
                            header["fingerprint"])
