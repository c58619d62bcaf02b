"""Dataset generation, loading, standardization, folds, and chain persistence.

Synthetic shapes mirror the usual nonlinear clustering benchmarks: parallel
arcs, interleaved semicircles, concentric circles, and a pinwheel.  All of
them are label consistent (a point drawn from component c carries label c)
and deterministic per seed.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .gp import KernelParams
from .latent_mixture import NiwPrior
from .sampler import ChainConfig, HmcConfig, PosteriorSample

__all__ = [
    "Dataset",
    "FoldSpec",
    "InvalidSizeError",
    "InvalidFoldCountError",
    "ParseError",
    "StandardizeTransform",
    "generate",
    "load_libsvm",
    "save_dataset",
    "load_dataset",
    "standardize",
    "cv_folds",
    "save_chain",
    "load_chain",
    "ChainFile",
    "GENERATOR_SHAPES",
    "CHAIN_FORMAT",
    "CHAIN_FORMAT_VERSION",
]


class InvalidSizeError(ValueError):
    pass


class InvalidFoldCountError(ValueError):
    pass


class ParseError(Exception):
    """Malformed input text, located by 1-based line and column."""

    def __init__(self, message, line, column):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass
class Dataset:
    """Observation matrix with optional integer class labels."""

    y: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim != 2:
            raise ValueError("observations must be a 2-d array")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("observations contain nonfinite entries")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if self.labels.shape != (self.y.shape[0],):
                raise ValueError("labels length does not match observations")
            uniq = np.unique(self.labels)
            if uniq[0] != 0 or uniq[-1] != uniq.size - 1:
                raise ValueError("labels must be contiguous integers from 0")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.y.shape[1]

    @property
    def n_classes(self):
        return None if self.labels is None else int(self.labels.max()) + 1


def _balanced_labels(n, n_classes, rng):
    # Near-equal class sizes, order shuffled so row index carries no signal.
    labels = np.arange(n) % n_classes
    return labels[rng.permutation(n)]


def _two_curve(n, rng, span=4.0, curvature=0.25, gap=1.0, noise=None):
    if noise is None:
        noise = 0.05 * span
    labels = _balanced_labels(n, 2, rng)
    t = rng.uniform(-0.5 * span, 0.5 * span, size=n)
    y = np.column_stack([t, curvature * t**2 + gap * labels])
    return y + noise * rng.standard_normal((n, 2)), labels


def _three_semi(n, rng, radius=1.0, noise=None):
    if noise is None:
        noise = 0.05 * 2.0 * radius
    labels = _balanced_labels(n, 3, rng)
    t = rng.uniform(0.0, np.pi, size=n)
    # Two upward semicircles with a flipped one interleaved between them.
    flipped = labels == 1
    sign = np.where(flipped, -1.0, 1.0)
    cx = np.where(flipped, radius, 2.0 * radius * (labels > 0))
    cy = np.where(flipped, 0.5 * radius, 0.0)
    y = np.column_stack(
        [cx + radius * np.cos(t), cy + sign * radius * np.sin(t)]
    )
    return y + noise * rng.standard_normal((n, 2)), labels


def _two_circle(n, rng, radius=1.0, ratio=0.5, noise=None):
    if noise is None:
        noise = 0.05 * 2.0 * radius
    labels = _balanced_labels(n, 2, rng)
    r = np.where(labels == 0, radius, ratio * radius)
    t = rng.uniform(0.0, 2.0 * np.pi, size=n)
    y = np.column_stack([r * np.cos(t), r * np.sin(t)])
    return y + noise * rng.standard_normal((n, 2)), labels


def _pinwheel(n, rng, arms=5, rate=0.3, radial_noise=0.3, tangential_noise=0.05):
    labels = _balanced_labels(n, arms, rng)
    features = rng.standard_normal((n, 2)) * [radial_noise, tangential_noise]
    features[:, 0] += 1.0
    angles = labels * 2.0 * np.pi / arms + rate * np.exp(features[:, 0])
    cos, sin = np.cos(angles), np.sin(angles)
    y = np.column_stack(
        [
            features[:, 0] * cos - features[:, 1] * sin,
            features[:, 0] * sin + features[:, 1] * cos,
        ]
    )
    return y, labels


_GENERATORS = {
    "two_curve": (_two_curve, 2),
    "three_semi": (_three_semi, 3),
    "two_circle": (_two_circle, 2),
    "pinwheel": (_pinwheel, 5),
}

GENERATOR_SHAPES = tuple(_GENERATORS)


def generate(shape: str, n: int, seed=None, **params) -> Dataset:
    """Draw a labeled synthetic dataset of the named shape.

    Parameters
    ----------
    shape : str
        One of ``two_curve``, ``three_semi``, ``two_circle``, ``pinwheel``
        (hyphens accepted).
    n : int
        Number of points, at least the shape's class count.
    seed
        Anything ``numpy.random.default_rng`` accepts, or a Generator.
    **params
        Generator-specific geometry overrides (span, gap, noise, ...).

    Returns
    -------
    Dataset
        Two-dimensional observations with balanced contiguous labels.
    """
    key = shape.replace("-", "_")
    if key not in _GENERATORS:
        raise ValueError(f"unknown shape {shape!r}, expected one of {GENERATOR_SHAPES}")
    fn, n_classes = _GENERATORS[key]
    if n < n_classes:
        raise InvalidSizeError(f"{key} needs at least {n_classes} points, got {n}")
    rng = numerics.as_generator(seed)
    y, labels = fn(n, rng, **params)
    return Dataset(y=y, labels=labels, name=f"{key}-{n}")


_TOKEN = re.compile(r"\S+")


def load_libsvm(path) -> Dataset:
    """Parse a sparse `label idx:val ...` text file into a dense dataset.

    Indices are 1-based and must be strictly increasing within a line;
    absent indices are zero filled up to the maximum index seen anywhere.
    Labels are remapped to 0..C-1 in sorted order.
    """
    raw_labels = []
    rows = []
    max_index = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            tokens = list(_TOKEN.finditer(line))
            if not tokens:
                continue
            first = tokens[0]
            try:
                raw_labels.append(float(first.group()))
            except ValueError:
                raise ParseError(
                    f"bad label {first.group()!r}", line_no, first.start() + 1
                ) from None
            entries = []
            prev_index = 0
            for tok in tokens[1:]:
                col = tok.start() + 1
                text = tok.group()
                idx_text, sep, val_text = text.partition(":")
                if not sep or not val_text:
                    raise ParseError(f"expected idx:val, got {text!r}", line_no, col)
                try:
                    idx = int(idx_text)
                except ValueError:
                    raise ParseError(
                        f"bad index {idx_text!r}", line_no, col
                    ) from None
                if idx <= prev_index:
                    raise ParseError(
                        f"index {idx} not strictly increasing", line_no, col
                    )
                try:
                    val = float(val_text)
                except ValueError:
                    raise ParseError(
                        f"bad value {val_text!r}", line_no, col + len(idx_text) + 1
                    ) from None
                entries.append((idx, val))
                prev_index = idx
            rows.append(entries)
            if prev_index > max_index:
                max_index = prev_index
    if not rows:
        raise ParseError("no data lines", 1, 1)
    y = np.zeros((len(rows), max_index))
    for i, entries in enumerate(rows):
        for idx, val in entries:
            y[i, idx - 1] = val
    classes = sorted(set(raw_labels))
    class_map = {c: i for i, c in enumerate(classes)}
    labels = np.array([class_map[c] for c in raw_labels], dtype=int)
    return Dataset(y=y, labels=labels, name="")


def save_dataset(dataset: Dataset, path) -> None:
    """Write `y1,...,yD[,label]` CSV with shortest round-trip floats."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = [f"y{j + 1}" for j in range(dataset.dim)]
        if dataset.labels is not None:
            header.append("label")
        fh.write(",".join(header) + "\n")
        for i in range(dataset.n):
            cells = [repr(float(v)) for v in dataset.y[i]]
            if dataset.labels is not None:
                cells.append(str(int(dataset.labels[i])))
            fh.write(",".join(cells) + "\n")


def load_dataset(path) -> Dataset:
    """Read a dataset CSV written by save_dataset."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        has_labels = bool(header) and header[-1] == "label"
        n_cols = len(header)
        y_cols = n_cols - 1 if has_labels else n_cols
        rows, labels = [], []
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != n_cols:
                raise ParseError(
                    f"expected {n_cols} cells, got {len(cells)}", line_no, 1
                )
            try:
                rows.append([float(c) for c in cells[:y_cols]])
                if has_labels:
                    labels.append(int(cells[-1]))
            except ValueError as exc:
                raise ParseError(str(exc), line_no, 1) from None
    return Dataset(
        y=np.array(rows),
        labels=np.array(labels, dtype=int) if has_labels else None,
        name="",
    )


@dataclass(frozen=True)
class StandardizeTransform:
    """Per-column shift and scale, invertible."""

    mean: np.ndarray
    scale: np.ndarray

    def apply(self, y: np.ndarray) -> np.ndarray:
        return (y - self.mean) / self.scale

    def invert(self, y: np.ndarray) -> np.ndarray:
        return y * self.scale + self.mean

    @property
    def log_jacobian(self) -> float:
        """Log density correction per point when scoring in original units."""
        return -float(np.sum(np.log(self.scale)))


def standardize(dataset: Dataset) -> tuple[Dataset, StandardizeTransform]:
    """Shift and scale every column to mean 0, variance 1.

    Zero-variance columns are shifted only and their scale recorded as 1 so
    the transform stays invertible.
    """
    if dataset.n < 2:
        raise ValueError("need at least two points to standardize")
    mean = dataset.y.mean(axis=0)
    scale = dataset.y.std(axis=0)
    scale[scale == 0.0] = 1.0
    transform = StandardizeTransform(mean=mean, scale=scale)
    out = Dataset(
        y=transform.apply(dataset.y), labels=dataset.labels, name=dataset.name
    )
    return out, transform


@dataclass(frozen=True)
class FoldSpec:
    """A k-way partition of 0..n-1 into near-equal folds."""

    k: int
    assignments: np.ndarray

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices of (train, test) rows for one held-out fold."""
        if not 0 <= fold < self.k:
            raise IndexError(f"fold {fold} out of range for k={self.k}")
        test = np.flatnonzero(self.assignments == fold)
        train = np.flatnonzero(self.assignments != fold)
        return train, test


def cv_folds(n: int, k: int, seed=None) -> FoldSpec:
    """Seeded uniform random partition into k folds of near-equal size."""
    if not 2 <= k <= n:
        raise InvalidFoldCountError(f"need 2 <= k <= n, got k={k}, n={n}")
    rng = numerics.as_generator(seed)
    assignments = np.empty(n, dtype=int)
    assignments[rng.permutation(n)] = np.arange(n) % k
    return FoldSpec(k=k, assignments=assignments)


CHAIN_FORMAT = "warpmix-chain"
CHAIN_FORMAT_VERSION = 1


def _config_to_dict(config: ChainConfig) -> dict:
    prior = None
    if config.prior is not None:
        prior = {
            "mean": config.prior.mean.tolist(),
            "precision_scale": config.prior.precision_scale,
            "scale": config.prior.scale.tolist(),
            "dof": config.prior.dof,
        }
    return {
        "latent_dim": config.latent_dim,
        "prior": prior,
        "concentration": config.concentration,
        "init_params": list(config.init_params.as_array()),
        "param_prior_std": config.param_prior_std,
        "n_iter": config.n_iter,
        "burn_in": config.burn_in,
        "thin": config.thin,
        "hmc_x": [config.hmc_x.step_size, config.hmc_x.leapfrog_steps, config.hmc_x.target_accept],
        "hmc_params": [
            config.hmc_params.step_size,
            config.hmc_params.leapfrog_steps,
            config.hmc_params.target_accept,
        ],
        "single_cluster": config.single_cluster,
        "scan_order": config.scan_order,
        "check_every": config.check_every,
    }


def _config_from_dict(d: dict) -> ChainConfig:
    prior = None
    if d["prior"] is not None:
        p = d["prior"]
        prior = NiwPrior(
            mean=np.array(p["mean"]),
            precision_scale=p["precision_scale"],
            scale=np.array(p["scale"]),
            dof=p["dof"],
        )
    return ChainConfig(
        latent_dim=d["latent_dim"],
        prior=prior,
        concentration=d["concentration"],
        init_params=KernelParams.from_array(np.array(d["init_params"])),
        param_prior_std=d["param_prior_std"],
        n_iter=d["n_iter"],
        burn_in=d["burn_in"],
        thin=d["thin"],
        hmc_x=HmcConfig(*d["hmc_x"]),
        hmc_params=HmcConfig(*d["hmc_params"]),
        single_cluster=d["single_cluster"],
        scan_order=d["scan_order"],
        check_every=d["check_every"],
    )


@dataclass
class ChainFile:
    """A persisted chain: training observations, config, seed, and samples."""

    y: np.ndarray
    config: ChainConfig
    seed: int | None
    samples: list[PosteriorSample]
    extra: dict = field(default_factory=dict)


def save_chain(
    path, y: np.ndarray, config: ChainConfig, seed, samples, extra: dict | None = None
) -> None:
    """Write one chain as line-delimited records with a header line.

    The header carries format version, config, seed, and the training
    observations so downstream scoring needs no side files.  ``extra``
    is an optional JSON-serializable mapping stored verbatim in the
    header; readers that do not know it ignore it.
    """
    y = np.asarray(y, dtype=float)
    header = {
        "format": CHAIN_FORMAT,
        "version": CHAIN_FORMAT_VERSION,
        "seed": None if seed is None else int(seed),
        "config": _config_to_dict(config),
        "n": y.shape[0],
        "d": y.shape[1],
        "y": y.tolist(),
    }
    if extra:
        header["extra"] = extra
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in samples:
            record = {
                "iteration": s.iteration,
                "x": s.x.tolist(),
                "z": s.labels.tolist(),
                "log_params": list(s.params.as_array()),
                "joint_log_prob": s.joint_log_prob,
            }
            fh.write(json.dumps(record) + "\n")


def load_chain(path) -> ChainFile:
    """Read a chain file written by save_chain."""
    with open(path, encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad header: {exc}", 1, 1) from None
        if header.get("format") != CHAIN_FORMAT:
            raise ParseError(f"not a {CHAIN_FORMAT} file", 1, 1)
        if header.get("version") != CHAIN_FORMAT_VERSION:
            raise ParseError(
                f"unsupported version {header.get('version')}", 1, 1
            )
        samples = []
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad record: {exc}", line_no, 1) from None
            samples.append(
                PosteriorSample(
                    iteration=rec["iteration"],
                    x=np.array(rec["x"]),
                    labels=np.array(rec["z"], dtype=int),
                    params=KernelParams.from_array(np.array(rec["log_params"])),
                    joint_log_prob=rec["joint_log_prob"],
                )
            )
    return ChainFile(
        y=np.array(header["y"]),
        config=_config_from_dict(header["config"]),
        seed=header["seed"],
        samples=samples,
        extra=header.get("extra", {}),
    )
