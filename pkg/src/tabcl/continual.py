"""Continual adaptation of a pretrained contrastive model.

The adapted model starts from the pretrained one and is retrained on a
replay mix of in-distribution and OOD rows.  Forgetting is held back by a
quadratic anchor weighted by the diagonal Fisher information and by a
learner head that attenuates updates of important parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .contrastive import ContrastiveModel, PretrainConfig, batch_gradients, train_contrastive
from .data import Dataset, Marginals, corrupt, take
from .ndcore import ShapeError, TrainingDivergence, load_checkpoint, save_checkpoint
from .oodsplit import OODSplit, read_manifest, write_manifest


@dataclass
class FisherDiag:
    values: list[np.ndarray]

    def __post_init__(self):
        for v in self.values:
            if (v < 0).any() or not np.isfinite(v).all():
                raise ValueError("Fisher entries must be finite and nonnegative")

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values]) if self.values else np.zeros(0)

    def summary(self) -> dict[str, float]:
        f = self.flat()
        return {"min": float(f.min()), "mean": float(f.mean()), "max": float(f.max())}


@dataclass
class AnchorState:
    theta_star: list[np.ndarray]
    fisher: FisherDiag
    lam: float = 100.0
    gamma: float = 10.0
    floor: float = 1e-3

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be nonnegative")
        for t, f in zip(self.theta_star, self.fisher.values):
            if t.shape != f.shape:
                raise ShapeError("anchor parameters and Fisher are not shape-congruent")

    @classmethod
    def from_model(cls, model: ContrastiveModel, fisher: FisherDiag, lam: float = 100.0,
                   gamma: float = 10.0, floor: float = 1e-3) -> "AnchorState":
        return cls([p.copy() for p in model.params()], fisher, lam, gamma, floor)


@dataclass
class FisherConfig:
    batch_size: int = 64
    max_samples: int = 2000
    objective: str = "contrastive"  # or "reconstruction"
    corruption_rate: float | None = None  # defaults to the model's training rate
    seed: int = 0


def compute_fisher(model: ContrastiveModel, ds: Dataset | np.ndarray,
                   cfg: FisherConfig | None = None) -> FisherDiag:
    """Diagonal empirical Fisher: mean over batches of squared loss gradients."""
    cfg = cfg or FisherConfig()
    x = ds.features if isinstance(ds, Dataset) else np.asarray(ds, dtype=np.float64)
    blocks = ds.blocks() if isinstance(ds, Dataset) else None
    if x.shape[0] == 0:
        raise ValueError("Fisher needs a nonempty dataset")
    rng = np.random.default_rng(cfg.seed)
    if x.shape[0] > cfg.max_samples:
        x = x[np.sort(rng.choice(x.shape[0], cfg.max_samples, replace=False))]
    rate = model.corruption_rate if cfg.corruption_rate is None else cfg.corruption_rate
    marginals = Marginals.from_features(x, blocks)
    acc = [np.zeros_like(p) for p in model.params()]
    n_batches = 0
    for start in range(0, x.shape[0], cfg.batch_size):
        batch = x[start:start + cfg.batch_size]
        if cfg.objective == "contrastive":
            if len(batch) < 2:
                continue
            views = (corrupt(batch, marginals, rate, rng), corrupt(batch, marginals, rate, rng))
            _, grads = batch_gradients(model, batch, views)
        elif cfg.objective == "reconstruction":
            _, grads = batch_gradients(model, batch, None)
        else:
            raise ValueError(f"unknown Fisher objective {cfg.objective!r}")
        for a, g in zip(acc, grads):
            a += g * g
        n_batches += 1
    if n_batches == 0:
        raise ValueError("no usable batch for the Fisher estimate")
    return FisherDiag([a / n_batches for a in acc])


def ewc_penalty(theta: list[np.ndarray], anchor: AnchorState) -> tuple[float, list[np.ndarray]]:
    """(lam / 2) * sum F * (theta - theta*)^2 and its gradient."""
    if len(theta) != len(anchor.theta_star):
        raise ShapeError("parameter list does not match the anchor")
    value, grads = 0.0, []
    for t, t0, f in zip(theta, anchor.theta_star, anchor.fisher.values):
        diff = t - t0
        value += float(np.sum(f * diff * diff))
        grads.append(anchor.lam * f * diff)
    return 0.5 * anchor.lam * value, grads


def gate_factors(anchor: AnchorState) -> list[np.ndarray]:
    """Per-parameter factor 1 / (1 + gamma * (F / mean F + floor))."""
    mean = anchor.fisher.flat().mean()
    scale = 1.0 / mean if mean > 0 else 0.0
    return [1.0 / (1.0 + anchor.gamma * (f * scale + anchor.floor)) for f in anchor.fisher.values]


def gate_gradients(grads: list[np.ndarray], anchor: AnchorState) -> list[np.ndarray]:
    """Attenuate per-parameter updates in proportion to their Fisher importance.

    Accepts raw gradients or optimizer deltas; training applies it to the
    deltas because an adaptive optimizer would undo a constant gradient scale.
    """
    return [g * s for g, s in zip(grads, gate_factors(anchor))]


@dataclass
class ReplaySets:
    s_in: np.ndarray
    s_ood: np.ndarray
    seed: int = 0

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate([self.s_in, self.s_ood])


def build_replay(in_pool: np.ndarray | OODSplit, ood_pool: np.ndarray | None = None,
                 n_in: int | None = None, n_ood: int | None = None, seed: int = 0) -> ReplaySets:
    """Uniform draws without replacement from each pool.

    Defaults: the whole OOD pool and ``min(len(in_pool), 4 * n_ood)`` in-distribution rows.
    """
    if isinstance(in_pool, OODSplit):
        in_pool, ood_pool = in_pool.in_indices, in_pool.ood_indices
    in_pool = np.asarray(in_pool, dtype=np.int64)
    ood_pool = np.asarray(ood_pool, dtype=np.int64)
    n_ood = len(ood_pool) if n_ood is None else n_ood
    n_in = min(len(in_pool), 4 * n_ood) if n_in is None else n_in
    if n_in > len(in_pool) or n_ood > len(ood_pool) or n_in < 0 or n_ood < 0:
        raise ValueError(f"replay sizes ({n_in}, {n_ood}) exceed pools "
                         f"({len(in_pool)}, {len(ood_pool)})")
    rng = np.random.default_rng(seed)
    return ReplaySets(rng.choice(in_pool, n_in, replace=False),
                      rng.choice(ood_pool, n_ood, replace=False), seed)


def continual_train(model: ContrastiveModel, anchor: AnchorState, replay: ReplaySets,
                    data: Dataset, cfg: PretrainConfig) -> tuple[ContrastiveModel, list[float]]:
    """Contrastive retraining on the replay rows with the anchor and the learner head.

    Returns a new model; ``model`` is not modified.
    """
    adapted = model.copy()
    if cfg.epochs == 0:
        return adapted, []
    if len(anchor.theta_star) != len(adapted.params()):
        raise ShapeError("anchor was not built from this model")
    replay_ds = take(data, replay.indices)
    factors = gate_factors(anchor)

    def penalty(params):
        return ewc_penalty(params, anchor)

    def gate(deltas):
        return [d * s for d, s in zip(deltas, factors)]

    try:
        adapted, trace = train_contrastive(adapted, replay_ds.features, cfg, blocks=replay_ds.blocks(),
                                           grad_hook=penalty, update_hook=gate)
    except TrainingDivergence as exc:
        raise TrainingDivergence(f"continual training diverged; pretrained model kept: {exc}") from exc
    return adapted, trace


def save_anchor(path: str | Path, anchor: AnchorState) -> None:
    extra = {}
    for i, (t, f) in enumerate(zip(anchor.theta_star, anchor.fisher.values)):
        extra[f"theta.{i}"] = t
        extra[f"fisher.{i}"] = f
    save_checkpoint(path, {}, {"kind": "anchor", "lam": anchor.lam, "gamma": anchor.gamma,
                               "floor": anchor.floor, "n": len(anchor.theta_star)}, extra)


def load_anchor(path: str | Path) -> AnchorState:
    _, header, extra = load_checkpoint(path)
    if header.get("kind") != "anchor":
        raise ValueError(f"{path} is not an anchor checkpoint")
    n = header["n"]
    return AnchorState([extra[f"theta.{i}"] for i in range(n)],
                       FisherDiag([extra[f"fisher.{i}"] for i in range(n)]),
                       header["lam"], header["gamma"], header["floor"])


def save_replay(path: str | Path, replay: ReplaySets) -> None:
    write_manifest(path, {"kind": "replay", "seed": replay.seed,
                          "counts": {"s_in": len(replay.s_in), "s_ood": len(replay.s_ood)}},
                   {"s_in": replay.s_in, "s_ood": replay.s_ood})


def load_replay(path: str | Path) -> ReplaySets:
    header, sections = read_manifest(path)
    if header.get("kind") != "replay":
        raise ValueError(f"{path}: not a replay manifest")
    return ReplaySets(sections["s_in"], sections["s_ood"], header["seed"])
