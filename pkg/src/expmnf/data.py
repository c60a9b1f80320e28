"""Dataset ingestion and preparation: Adult census preprocessing, stratified
splitting, optional z-normalization, and synthetic fixtures for oracle tests.

Prepared datasets cache as CSV plus a JSON provenance sidecar recording the
source, transforms, and encoding map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataValidationError
from .numerics import substream

ADULT_COLUMNS = [
    "age",
    "workclass",
    "fnlwgt",
    "education",
    "education_num",
    "marital_status",
    "occupation",
    "relationship",
    "race",
    "sex",
    "capital_gain",
    "capital_loss",
    "hours_per_week",
    "native_country",
    "income",
]
ADULT_NUMERIC = ["age", "education_num", "capital_gain", "capital_loss", "hours_per_week"]
ADULT_WEIGHT = "fnlwgt"
ADULT_TARGET = "income"


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    columns: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        n, p = self.X.shape
        if n == 0 or p == 0:
            raise DataValidationError("dataset must have positive row and column counts")
        if self.y.shape != (n,) or self.w.shape != (n,):
            raise DataValidationError("target/weight lengths disagree with the feature matrix")
        if not np.all((self.y == 0.0) | (self.y == 1.0)):
            raise DataValidationError("targets must be binary {0, 1}")
        if np.any(~np.isfinite(self.X)):
            raise DataValidationError("feature matrix contains non-finite values")
        if np.any(self.w < 0.0) or np.any(self.w > 1.0):
            raise DataValidationError("weights must lie in [0, 1]")
        if len(self.columns) != p:
            raise DataValidationError("column-name count disagrees with the feature matrix")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, rows, role: str | None = None) -> "Dataset":
        prov = dict(self.provenance)
        if role is not None:
            prov["split_role"] = role
        return Dataset(self.X[rows], self.y[rows], self.w[rows], list(self.columns), prov)

    def save(self, csv_path) -> None:
        csv_path = Path(csv_path)
        df = pd.DataFrame(self.X, columns=self.columns)
        df["__weight__"] = self.w
        df["__target__"] = self.y
        df.to_csv(csv_path, index=False)
        sidecar = csv_path.with_suffix(csv_path.suffix + ".provenance.json")
        sidecar.write_text(json.dumps(self.provenance, indent=2, sort_keys=True))

    @classmethod
    def load(cls, csv_path) -> "Dataset":
        csv_path = Path(csv_path)
        df = pd.read_csv(csv_path)
        if "__target__" not in df.columns or "__weight__" not in df.columns:
            raise DataValidationError(f"{csv_path} is not a prepared-dataset CSV")
        y = df.pop("__target__").to_numpy()
        w = df.pop("__weight__").to_numpy()
        sidecar = csv_path.with_suffix(csv_path.suffix + ".provenance.json")
        prov = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        return cls(df.to_numpy(), y, w, list(df.columns), prov)


@dataclass
class SplitSpec:
    ratios: tuple = (0.64, 0.16, 0.20)
    seed: int = 0
    stratify: bool = True

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0.0 for r in self.ratios):
            raise ValueError("ratios must be three positive numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError("ratios must sum to 1")


def _canon(name: str) -> str:
    return str(name).strip().lower().replace("-", "_").replace(" ", "_").lstrip("_")


def prepare_adult(raw_csv) -> Dataset:
    """Adult census ingestion: drop rows with missing markers, encode binary
    categoricals as {0,1}, one-hot the rest (lexicographic category order),
    pass numeric columns through, and extract fnlwgt as max-normalized
    weights."""
    df = pd.read_csv(raw_csv, skipinitialspace=True)
    df.columns = [_canon(c) for c in df.columns]
    if "__target__" in df.columns:
        raise DataValidationError("input looks already prepared; re-ingestion is rejected")
    missing = [c for c in ADULT_COLUMNS if c not in df.columns]
    if missing:
        raise DataValidationError(f"raw Adult file is missing columns: {missing}")
    df = df[ADULT_COLUMNS]

    # "?" (any surrounding whitespace) marks a missing value
    obj_cols = [c for c in df.columns if df[c].dtype == object]
    for c in obj_cols:
        df[c] = df[c].astype(str).str.strip()
    mask = pd.Series(False, index=df.index)
    for c in obj_cols:
        mask |= df[c] == "?"
    mask |= df.isna().any(axis=1)
    df = df.loc[~mask].reset_index(drop=True)
    if df.empty:
        raise DataValidationError("no rows remain after dropping missing values")

    target_raw = df.pop(ADULT_TARGET).str.rstrip(".")
    if not set(target_raw.unique()) <= {"<=50K", ">50K"}:
        raise DataValidationError(f"unexpected income labels: {sorted(target_raw.unique())}")
    y = (target_raw == ">50K").to_numpy(dtype=float)

    weights = df.pop(ADULT_WEIGHT).to_numpy(dtype=float)
    if np.any(weights < 0.0) or weights.max() <= 0.0:
        raise DataValidationError("fnlwgt weights must be positive")
    w = weights / weights.max()

    feature_frames = []
    encoding_map = {}
    for c in df.columns:
        col = df[c]
        if c in ADULT_NUMERIC:
            feature_frames.append(col.astype(float).to_frame())
            encoding_map[c] = "numeric"
            continue
        cats = sorted(col.unique())
        if len(cats) < 2:
            raise DataValidationError(f"categorical column {c!r} is constant after filtering")
        if len(cats) == 2:
            feature_frames.append(((col == cats[1]).astype(float)).to_frame(c))
            encoding_map[c] = {"kind": "binary", "one": cats[1], "zero": cats[0]}
        else:
            onehot = pd.DataFrame(
                {f"{c}={cat}": (col == cat).astype(float) for cat in cats}
            )
            feature_frames.append(onehot)
            encoding_map[c] = {"kind": "one-hot", "categories": cats}
    X = pd.concat(feature_frames, axis=1)

    provenance = {
        "source": str(raw_csv),
        "transforms": [
            "drop rows with '?' or NA",
            "binary categoricals -> {0,1}",
            "multi-valued categoricals -> one-hot (lexicographic)",
            "fnlwgt -> weights normalized by max",
        ],
        "encoding_map": encoding_map,
        "n_rows": int(len(X)),
        "n_features": int(X.shape[1]),
    }
    return Dataset(X.to_numpy(dtype=float), y, w, list(X.columns), provenance)


def stratified_split(ds: Dataset, spec: SplitSpec):
    """Disjoint, exhaustive (train, dev, test) partitions preserving class
    bias; deterministic under the split seed."""
    rng = substream(spec.seed, "split")
    classes = np.unique(ds.y)
    if spec.stratify and len(classes) < 2:
        raise DataValidationError("stratified split requires both classes present")
    parts = [[], [], []]
    groups = [np.flatnonzero(ds.y == c) for c in classes] if spec.stratify else [np.arange(ds.n_rows)]
    for idx in groups:
        if len(idx) < 3:
            raise DataValidationError("a class has fewer rows than partitions")
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        cut1 = int(round(spec.ratios[0] * n))
        cut2 = int(round((spec.ratios[0] + spec.ratios[1]) * n))
        parts[0].append(idx[:cut1])
        parts[1].append(idx[cut1:cut2])
        parts[2].append(idx[cut2:])
    roles = ("train", "dev", "test")
    out = []
    for part, role in zip(parts, roles):
        rows = np.sort(np.concatenate(part))
        out.append(ds.subset(rows, role=role))
    return tuple(out)


def znorm(datasets, mode: str = "per-partition", columns=None):
    """Z-score the selected columns. ``per-partition`` normalizes each dataset
    with its own statistics; ``fit-on-train`` fits on the first dataset and
    applies those statistics to all. Constant columns map to zero."""
    single = isinstance(datasets, Dataset)
    dss = [datasets] if single else list(datasets)
    if columns is None:
        col_idx = list(range(dss[0].n_features))
    else:
        col_idx = [dss[0].columns.index(c) if isinstance(c, str) else int(c) for c in columns]
    if mode not in ("per-partition", "fit-on-train"):
        raise ValueError(f"unknown znorm mode {mode!r}")

    def _stats(X):
        mu = X[:, col_idx].mean(axis=0)
        sd = X[:, col_idx].std(axis=0)
        return mu, sd

    out = []
    train_stats = _stats(dss[0].X) if mode == "fit-on-train" else None
    for ds in dss:
        mu, sd = train_stats if train_stats is not None else _stats(ds.X)
        X = ds.X.copy()
        safe = np.where(sd > 0.0, sd, 1.0)
        X[:, col_idx] = (X[:, col_idx] - mu) / safe
        X[:, col_idx] = np.where(sd > 0.0, X[:, col_idx], 0.0)
        prov = dict(ds.provenance)
        prov.setdefault("transforms", [])
        prov["transforms"] = list(prov["transforms"]) + [f"znorm ({mode})"]
        out.append(Dataset(X, ds.y, ds.w, list(ds.columns), prov))
    return out[0] if single else tuple(out)


def synth_blobs(seed: int, n: int, p: int, separation: float) -> Dataset:
    """Two unit-variance Gaussian clusters whose centers sit ``separation``
    standard deviations apart; balanced labels, unit weights."""
    if n < 2 or p < 1:
        raise ValueError("need n >= 2 and p >= 1")
    rng = substream(seed, "synth-blobs")
    n1 = n // 2
    n0 = n - n1
    offset = (separation / 2.0) / np.sqrt(p)
    X0 = rng.standard_normal((n0, p)) - offset
    X1 = rng.standard_normal((n1, p)) + offset
    X = np.concatenate([X0, X1])
    y = np.concatenate([np.zeros(n0), np.ones(n1)])
    order = rng.permutation(n)
    provenance = {
        "source": f"synth_blobs(seed={seed}, n={n}, p={p}, separation={separation})",
        "transforms": [],
    }
    return Dataset(X[order], y[order], np.ones(n), [f"x{i}" for i in range(p)], provenance)
