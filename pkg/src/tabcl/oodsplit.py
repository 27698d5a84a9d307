"""Split a dataset into in-distribution and OOD rows.

A small proxy classifier supplies class logits; either OpenMax (Weibull
models of distances to class mean activations) or temperature-scaled
max-softmax confidence decides which rows are out of distribution.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .data import Dataset, quantile_bins
from .ndcore import Network, cross_entropy, fit_supervised, forward, mlp, softmax

log = logging.getLogger(__name__)

DETECTORS = ("openmax", "temperature")


class SplitError(RuntimeError):
    """A split with an empty side.  Carries the partition and a score histogram."""

    def __init__(self, message: str, split: "OODSplit", histogram: tuple[np.ndarray, np.ndarray]):
        super().__init__(message)
        self.split = split
        self.histogram = histogram


@dataclass
class ProxyConfig:
    hidden: int = 64
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    val_fraction: float = 0.2
    n_bins: int = 10
    seed: int = 0


@dataclass
class ProxyClassifier:
    net: Network
    labels: np.ndarray
    train_indices: np.ndarray
    val_indices: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.net.out_dim

    def logits(self, x: np.ndarray) -> np.ndarray:
        return forward(self.net, x)[0]

    def penultimate(self, x: np.ndarray) -> np.ndarray:
        body = Network(self.net.weights[:-1], self.net.biases[:-1], self.net.activations[:-1])
        return forward(body, x)[0]


def proxy_labels(ds: Dataset, n_bins: int = 10) -> np.ndarray:
    """Class labels, or quantile-bin pseudo-classes for a regression target."""
    if ds.task.is_classification:
        return ds.target.astype(np.int64)
    return quantile_bins(ds.target, n_bins)


def train_proxy(ds: Dataset, cfg: ProxyConfig | None = None) -> ProxyClassifier:
    cfg = cfg or ProxyConfig()
    labels = proxy_labels(ds, cfg.n_bins)
    k = int(labels.max()) + 1 if len(labels) else 0
    if len(np.unique(labels)) < 2:
        raise ValueError("proxy classifier needs at least two classes")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(ds.n)
    n_val = max(1, int(round(cfg.val_fraction * ds.n)))
    val, train = np.sort(order[:n_val]), np.sort(order[n_val:])
    net = mlp(ds.d, [cfg.hidden], k, rng)
    fit_supervised(net, ds.features[train], labels[train], cross_entropy,
                   epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, rng=rng)
    return ProxyClassifier(net, labels, train, val)


# -- Weibull tail fitting ---------------------------------------------------

@dataclass
class Weibull:
    shape: float
    scale: float
    shift: float = 0.0

    def cdf(self, x) -> np.ndarray:
        z = np.maximum(np.asarray(x, dtype=np.float64) - self.shift, 0.0)
        with np.errstate(over="ignore"):  # overflow to inf is the correct limit, cdf -> 1
            return 1.0 - np.exp(-((z / self.scale) ** self.shape))


def weibull_mle(x: np.ndarray, tol: float = 1e-10, max_iter: int = 100) -> tuple[float, float]:
    """Maximum-likelihood (shape, scale) of a two-parameter Weibull.

    Newton iteration on the profile equation for the shape, started from the
    coefficient-of-variation approximation.  Values must be positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or (x <= 0).any():
        raise ValueError("Weibull MLE needs positive samples")
    if x.size == 1 or np.ptp(x) <= 1e-12 * x.max():
        return 1.0, float(x.mean())
    top = x.max()
    y = x / top  # shape is scale free; rescale to keep y**k finite
    ly = np.log(y)
    mean_ly = ly.mean()

    def h(k):
        w = y ** k
        sw = w.sum()
        a = (w * ly).sum() / sw
        b = (w * ly * ly).sum() / sw
        return a - 1.0 / k - mean_ly, b - a * a + 1.0 / k ** 2

    cv = x.std() / x.mean()
    k = float(np.clip(cv ** -1.086, 0.05, 50.0))
    lo, hi = 1e-3, None
    for _ in range(max_iter):
        val, slope = h(k)
        if val < 0:
            lo = k
        else:
            hi = k
        step = k - val / slope
        if step <= lo or (hi is not None and step >= hi):
            step = 0.5 * (lo + hi) if hi is not None else 2.0 * k
        if abs(step - k) < tol * k:
            k = step
            break
        k = step
    scale = top * float(np.mean(y ** k) ** (1.0 / k))
    return k, scale


def fit_tail(distances: np.ndarray, tail_size: int) -> Weibull:
    """Weibull fit to the largest ``tail_size`` distances, shifted to the tail minimum."""
    tail = np.sort(np.asarray(distances, dtype=np.float64))[-tail_size:]
    spread = tail[-1] - tail[0]
    # keep every shifted value strictly positive so the log-likelihood is finite
    shift = tail[0] - max(1e-3 * spread, 1e-9 * max(abs(tail[0]), 1.0))
    shape, scale = weibull_mle(tail - shift)
    return Weibull(shape, scale, shift)


# -- OpenMax ----------------------------------------------------------------

@dataclass
class OpenMaxModel:
    mavs: np.ndarray  # (K, dim)
    weibulls: list[Weibull]
    tail_size: int
    alpha: int

    @property
    def n_classes(self) -> int:
        return self.mavs.shape[0]


def fit_openmax(activations: np.ndarray, labels: np.ndarray, predictions: np.ndarray,
                tail_size: int = 20, alpha: int | None = None,
                n_classes: int | None = None) -> OpenMaxModel:
    labels = np.asarray(labels)
    k = n_classes or int(max(labels.max(), predictions.max())) + 1
    alpha = min(3, k) if alpha is None else alpha
    if not 1 <= alpha <= k:
        raise ValueError(f"alpha must lie in [1, {k}]")
    correct = labels == predictions
    mavs, weibulls = [], []
    for c in range(k):
        acts = activations[correct & (labels == c)]
        if len(acts) == 0:
            acts = activations[labels == c]
            if len(acts) == 0:
                raise ValueError(f"class {c} has no samples")
            log.warning("class %d: no correctly classified samples, using all %d of its samples",
                        c, len(acts))
        if len(acts) < tail_size:
            log.warning("class %d: only %d correct samples, tail size %d", c, len(acts), tail_size)
        mav = acts.mean(axis=0)
        dist = np.linalg.norm(acts - mav, axis=1)
        mavs.append(mav)
        weibulls.append(fit_tail(dist, min(tail_size, len(dist))))
    return OpenMaxModel(np.array(mavs), weibulls, tail_size, alpha)


def openmax_probs(model: OpenMaxModel, activation: np.ndarray,
                  features: np.ndarray | None = None) -> np.ndarray:
    """K known-class probabilities followed by the unknown probability.

    The top-``alpha`` classes give up a share of their softmax mass equal to
    rank weight times the Weibull CDF of their distance to the class MAV;
    the shaved mass becomes the unknown probability.  When the MAVs live in
    a feature space other than the logits, pass those ``features``.
    """
    v = np.atleast_2d(np.asarray(activation, dtype=np.float64))
    f = v if features is None else np.atleast_2d(np.asarray(features, dtype=np.float64))
    a = model.alpha
    probs = softmax(v)
    dist = np.linalg.norm(f[:, None, :] - model.mavs[None, :, :], axis=2)
    cdf = np.column_stack([w.cdf(dist[:, c]) for c, w in enumerate(model.weibulls)])
    ranks = np.argsort(-v, axis=1, kind="stable")
    weight = np.zeros_like(v)
    rows = np.arange(v.shape[0])
    for r in range(a):
        weight[rows, ranks[:, r]] = (a - r) / a
    shaved = probs * weight * cdf
    out = np.column_stack([probs - shaved, shaved.sum(axis=1)])
    return out[0] if np.ndim(activation) == 1 else out


# -- temperature scaling ----------------------------------------------------

@dataclass
class TemperatureModel:
    temperature: float

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def fit_temperature(logits: np.ndarray, labels: np.ndarray) -> TemperatureModel:
    """Temperature minimizing validation NLL, searched over log T in [-4, 4]."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("temperature fitting needs validation labels from at least two classes")
    res = minimize_scalar(lambda t: nll(logits, labels, np.exp(t)), bounds=(-4.0, 4.0),
                          method="bounded", options={"xatol": 1e-8})
    return TemperatureModel(float(np.exp(res.x)))


def msp_confidence(logits: np.ndarray, temperature: float) -> np.ndarray | float:
    """Maximum softmax probability of ``logits / temperature`` (per row)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    conf = softmax(np.asarray(logits, dtype=np.float64) / temperature).max(axis=-1)
    return float(conf) if np.ndim(conf) == 0 else conf


# -- splitting --------------------------------------------------------------

@dataclass
class SplitConfig:
    detector: str = "openmax"
    tail_size: int = 20
    alpha: int | None = None
    epsilon: float = 0.0
    delta: float | None = None
    delta_percentile: float = 5.0
    activations: str = "logits"  # or "penultimate"
    proxy: ProxyConfig = field(default_factory=ProxyConfig)

    def __post_init__(self):
        if self.detector not in DETECTORS:
            raise ValueError(f"detector must be one of {DETECTORS}, got {self.detector!r}")
        if isinstance(self.proxy, dict):
            self.proxy = ProxyConfig(**self.proxy)


@dataclass
class OODSplit:
    in_indices: np.ndarray
    ood_indices: np.ndarray
    detector: str
    threshold: float
    config: dict = field(default_factory=dict)
    scores: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_in(self) -> int:
        return len(self.in_indices)

    @property
    def n_ood(self) -> int:
        return len(self.ood_indices)

    @property
    def counts(self) -> dict[str, int]:
        return {"in": self.n_in, "ood": self.n_ood}


def partition(is_ood: np.ndarray, detector: str, threshold: float, config: dict | None = None,
              scores: np.ndarray | None = None) -> OODSplit:
    is_ood = np.asarray(is_ood, dtype=bool)
    return OODSplit(np.flatnonzero(~is_ood), np.flatnonzero(is_ood), detector, float(threshold),
                    config or {}, scores)


def _activations(proxy: ProxyClassifier, x: np.ndarray, kind: str) -> np.ndarray:
    return proxy.logits(x) if kind == "logits" else proxy.penultimate(x)


def detector_scores(ds: Dataset, proxy: ProxyClassifier, cfg: SplitConfig):
    """Per-row OOD decision inputs.

    Returns ``(scores, is_ood, threshold)``.  For OpenMax the score is the
    unknown probability; for temperature scaling it is the calibrated
    max-softmax confidence.
    """
    logits = proxy.logits(ds.features)
    labels = proxy.labels
    if cfg.detector == "openmax":
        acts = _activations(proxy, ds.features, cfg.activations)
        tr = proxy.train_indices
        preds = logits[tr].argmax(axis=1)
        model = fit_openmax(acts[tr], labels[tr], preds, cfg.tail_size, cfg.alpha,
                            n_classes=proxy.n_classes)
        probs = openmax_probs(model, logits, None if cfg.activations == "logits" else acts)
        unknown = probs[:, -1]
        if cfg.epsilon > 0:
            return unknown, unknown > cfg.epsilon, cfg.epsilon
        return unknown, probs.argmax(axis=1) == proxy.n_classes, 0.0
    val = proxy.val_indices
    temp = fit_temperature(logits[val], labels[val])
    conf = msp_confidence(logits, temp.temperature)
    delta = cfg.delta if cfg.delta is not None else float(np.percentile(conf[val], cfg.delta_percentile))
    return conf, conf < delta, delta


def split_dataset(ds: Dataset, cfg: SplitConfig | None = None,
                  proxy: ProxyClassifier | None = None) -> OODSplit:
    cfg = cfg or SplitConfig()
    proxy = proxy or train_proxy(ds, cfg.proxy)
    scores, is_ood, threshold = detector_scores(ds, proxy, cfg)
    split = partition(is_ood, cfg.detector, threshold, config_echo(cfg), scores)
    if split.n_in == 0 or split.n_ood == 0:
        hist = np.histogram(scores, bins=20)
        side = "in-distribution" if split.n_in == 0 else "OOD"
        raise SplitError(f"{cfg.detector} split left the {side} side empty "
                         f"(threshold {threshold:g}, score range {scores.min():g}..{scores.max():g})",
                         split, hist)
    return split


def config_echo(cfg: SplitConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


# -- manifests --------------------------------------------------------------

MANIFEST_MAGIC = "#index-manifest v1"


def write_manifest(path: str | Path, header: dict, sections: dict[str, np.ndarray]) -> None:
    """Line-oriented text: a magic line, ``key<TAB>json`` header lines, then
    ``[name] count`` section markers each followed by one index per line."""
    lines = [MANIFEST_MAGIC]
    for key in sorted(header):
        lines.append(f"{key}\t{json.dumps(header[key], sort_keys=True)}")
    for name, idx in sections.items():
        idx = np.asarray(idx, dtype=np.int64)
        lines.append(f"[{name}] {len(idx)}")
        lines.extend(str(int(i)) for i in idx)
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise ValueError(f"{path}: not an index manifest")
    header, sections = {}, {}
    i = 1
    while i < len(lines) and not lines[i].startswith("["):
        key, value = lines[i].split("\t", 1)
        header[key] = json.loads(value)
        i += 1
    while i < len(lines):
        name, count = lines[i][1:].split("] ")
        count = int(count)
        sections[name] = np.array([int(s) for s in lines[i + 1:i + 1 + count]], dtype=np.int64)
        i += 1 + count
    return header, sections


def save_split(path: str | Path, split: OODSplit) -> None:
    write_manifest(path, {"kind": "split", "detector": split.detector,
                          "threshold": split.threshold, "config": split.config,
                          "counts": split.counts},
                   {"in": split.in_indices, "ood": split.ood_indices})


def load_split(path: str | Path) -> OODSplit:
    header, sections = read_manifest(path)
    if header.get("kind") != "split":
        raise ValueError(f"{path}: not a split manifest")
    return OODSplit(sections["in"], sections["ood"], header["detector"], header["threshold"],
                    header["config"])
