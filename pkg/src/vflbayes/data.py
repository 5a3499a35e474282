"""Synthetic generators, tabular preprocessing, partitioning and folds."""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .mathcore import RngStream, ShapeError, sigmoid
from .models import Dataset

ETA_CLIP = 30.0


class DataError(ValueError):
    pass


@dataclass
class GeneratorSpec:
    family: str
    n: int = 500
    p: int = 20
    J: int = 2
    block_sizes: Optional[list] = None
    seed: int = 0
    noise_sd: float = 1.0
    sigma: float = 1.0
    n_levels: int = 5
    pop_range: tuple = (250, 350)
    intercept: float = 0.0

    def __post_init__(self):
        if self.block_sizes is None:
            if self.p % self.J:
                raise DataError(f"p={self.p} does not split evenly over J={self.J}; give block_sizes")
            self.block_sizes = [self.p // self.J] * self.J
        self.block_sizes = [int(b) for b in self.block_sizes]
        if sum(self.block_sizes) != self.p or len(self.block_sizes) != self.J:
            raise DataError(f"block sizes {self.block_sizes} must sum to p={self.p} over J={self.J} clients")
        self.pop_range = tuple(self.pop_range)

    def to_dict(self):
        d = asdict(self)
        d["pop_range"] = list(self.pop_range)
        return d


def _rng(spec: GeneratorSpec) -> np.random.Generator:
    return RngStream(spec.seed, 0, epoch=2**62).generator()


def _truth_names(prefix, sizes):
    out = []
    for j, p in enumerate(sizes):
        out += [f"{prefix}_{j + 1}[{k}]" for k in range(p)]
    return out


def gen_linear(spec: GeneratorSpec):
    """``y = x beta + sigma eps`` with ``x, beta ~ N(0, 1)`` and no intercept."""
    rng = _rng(spec)
    x = rng.standard_normal((spec.n, spec.p))
    beta = rng.standard_normal(spec.p)
    y = x @ beta + spec.intercept + spec.sigma * rng.standard_normal(spec.n)
    truths = dict(zip(_truth_names("beta", spec.block_sizes), beta.tolist()))
    truths["b"] = spec.intercept
    truths["sigma"] = spec.sigma
    data = Dataset(y, vertical_partition(x, spec.block_sizes), truths=truths)
    return data, truths


def gen_logistic(spec: GeneratorSpec):
    """Logistic data with Gaussian noise on the linear predictor; ``b = 0``."""
    rng = _rng(spec)
    x = rng.standard_normal((spec.n, spec.p))
    beta = rng.standard_normal(spec.p)
    eta = spec.intercept + x @ beta + spec.noise_sd * rng.standard_normal(spec.n)
    y = (rng.random(spec.n) < sigmoid(eta)).astype(np.float64)
    truths = dict(zip(_truth_names("beta", spec.block_sizes), beta.tolist()))
    truths["b"] = spec.intercept
    data = Dataset(y, vertical_partition(x, spec.block_sizes), truths=truths)
    return data, truths


def gen_multilevel_poisson(spec: GeneratorSpec):
    """Counts with a log-population offset and level-varying slopes per client.

    Per client and level: ``mu ~ N(0, 1)``, ``sigma ~ HN(1)``,
    ``beta ~ N(mu, sigma)``. Truth keys match the parameter names of the
    multilevel block (``log_sigma`` entries hold ``log sigma``).
    """
    rng = _rng(spec)
    n, L = spec.n, spec.n_levels
    lo, hi = spec.pop_range
    pop = rng.integers(lo, hi + 1, size=n)
    group = rng.integers(0, L, size=n)
    offset = np.log(pop.astype(np.float64))
    blocks, truths = [], {"b": spec.intercept}
    eta = spec.intercept + offset
    for j, p in enumerate(spec.block_sizes):
        x = rng.standard_normal((n, p))
        mu = rng.standard_normal((L, p))
        sig = np.abs(rng.standard_normal((L, p)))
        beta = mu + sig * rng.standard_normal((L, p))
        eta = eta + np.einsum("ij,ij->i", x, beta[group])
        blocks.append(x)
        for name, arr in (("beta", beta), ("mu", mu), ("log_sigma", np.log(sig))):
            for r in range(L):
                for k in range(p):
                    truths[f"{name}_{j + 1}[{r + 1},{k}]"] = float(arr[r, k])
    if np.any(np.abs(eta) > ETA_CLIP):
        warnings.warn(f"{int(np.sum(np.abs(eta) > ETA_CLIP))} linear predictor value(s) clipped to +-{ETA_CLIP}")
        eta = np.clip(eta, -ETA_CLIP, ETA_CLIP)
    y = rng.poisson(np.exp(eta)).astype(np.float64)
    data = Dataset(y, blocks, offset=offset, group=group, n_levels=L, truths=truths)
    return data, truths


def generate(spec: GeneratorSpec):
    fn = {
        "linear-gaussian": gen_linear,
        "logistic": gen_logistic,
        "poisson-multilevel": gen_multilevel_poisson,
    }.get(spec.family)
    if fn is None:
        raise DataError(f"no generator for family {spec.family!r}")
    return fn(spec)


# ---------------------------------------------------------------------------
# Partitioning and folds
# ---------------------------------------------------------------------------


def vertical_partition(x, sizes: Sequence[int]) -> list:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or sum(sizes) != x.shape[1] or any(s < 0 for s in sizes):
        raise ShapeError(f"block sizes {list(sizes)} do not partition {x.shape[-1]} columns")
    edges = np.cumsum([0] + list(sizes))
    return [x[:, edges[j]:edges[j + 1]].copy() for j in range(len(sizes))]


def kfold(n: int, k: int, seed: int = 0) -> np.ndarray:
    """Fold label per row; folds differ in size by at most one."""
    if not 1 <= k <= n:
        raise DataError(f"need 1 <= k <= n, got k={k}, n={n}")
    perm = RngStream(seed, 0, epoch=2**62 + 1).generator().permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return folds


# ---------------------------------------------------------------------------
# Tabular ingestion
# ---------------------------------------------------------------------------


@dataclass
class SchemaConfig:
    continuous: list
    categorical: list
    response: str
    positive: object = 1
    clients: Optional[list] = None

    def __post_init__(self):
        cols = list(self.continuous) + list(self.categorical)
        if len(set(cols)) != len(cols):
            raise DataError("continuous and categorical columns must be disjoint")
        if self.response in cols:
            raise DataError("the response cannot also be a covariate")
        if self.clients is not None:
            flat = [c for grp in self.clients for c in grp]
            if sorted(flat) != sorted(cols):
                raise DataError("client covariate groups must cover every covariate exactly once")

    @property
    def covariates(self) -> list:
        if self.clients is not None:
            return [c for grp in self.clients for c in grp]
        return list(self.continuous) + list(self.categorical)


HEART_SCHEMA = SchemaConfig(
    continuous=["Age", "RestingBP", "Cholesterol", "MaxHR", "Oldpeak"],
    categorical=["Sex", "ChestPainType", "FastingBS", "RestingECG", "ExerciseAngina", "ST_Slope"],
    response="HeartDisease",
    positive=1,
    clients=[
        ["Age", "Sex", "ChestPainType", "RestingBP", "Cholesterol"],
        ["FastingBS", "RestingECG", "MaxHR", "ExerciseAngina", "Oldpeak", "ST_Slope"],
    ],
)


@dataclass
class Preprocessor:
    """Z-scores and one-hot encodings fitted on training rows only."""

    schema: SchemaConfig
    means: dict = field(default_factory=dict)
    stds: dict = field(default_factory=dict)
    levels: dict = field(default_factory=dict)
    dropped: list = field(default_factory=list)

    def fit(self, df: pd.DataFrame) -> "Preprocessor":
        _require(df, self.schema)
        for c in self.schema.continuous:
            col = _numeric(df, c)
            sd = float(col.std(ddof=0))
            if not sd > 0:
                warnings.warn(f"column {c!r} is constant on the training rows; dropped")
                self.dropped.append(c)
                continue
            self.means[c] = float(col.mean())
            self.stds[c] = sd
        for c in self.schema.categorical:
            self.levels[c] = sorted(df[c].astype(str).unique().tolist())
        return self

    def columns_for(self, c) -> list:
        if c in self.dropped:
            return []
        if c in self.means:
            return [c]
        return [f"{c}={lv}" for lv in self.levels[c]]

    def transform(self, df: pd.DataFrame):
        """Return ``(feature blocks, column names per block)``."""
        _require(df, self.schema)
        groups = self.schema.clients or [self.schema.covariates]
        blocks, names = [], []
        for grp in groups:
            cols, nm = [], []
            for c in grp:
                if c in self.dropped:
                    continue
                if c in self.means:
                    cols.append(((_numeric(df, c) - self.means[c]) / self.stds[c]).to_numpy(dtype=np.float64))
                    nm.append(c)
                    continue
                vals = df[c].astype(str).to_numpy()
                unseen = sorted(set(vals) - set(self.levels[c]))
                if unseen:
                    warnings.warn(f"unseen level(s) {unseen} in column {c!r}; encoded as all zeros")
                for lv in self.levels[c]:
                    cols.append((vals == lv).astype(np.float64))
                    nm.append(f"{c}={lv}")
            blocks.append(np.column_stack(cols) if cols else np.zeros((len(df), 0)))
            names.append(nm)
        return blocks, names

    def response(self, df: pd.DataFrame) -> np.ndarray:
        r = df[self.schema.response]
        return (r.astype(str) == str(self.schema.positive)).to_numpy(dtype=np.float64)


def _require(df, schema):
    missing = [c for c in schema.covariates + [schema.response] if c not in df.columns]
    if missing:
        raise DataError(f"missing column(s): {missing}")


def _numeric(df, c):
    col = pd.to_numeric(df[c], errors="coerce")
    if col.isna().any():
        bad = df[c][col.isna()].iloc[0]
        raise DataError(f"non-numeric value {bad!r} in continuous column {c!r}")
    return col.astype(np.float64)


def read_table(path) -> pd.DataFrame:
    return pd.read_csv(path, sep=",", header=0, encoding="utf-8")


def load_and_preprocess(source, schema: SchemaConfig, train_rows=None):
    """Preprocess a CSV (path or DataFrame) into a :class:`Dataset`.

    Statistics come from ``train_rows`` (all rows when ``None``). Returns
    ``(dataset, preprocessor)``; column names sit in ``dataset.truths`` under
    ``"_columns"``.
    """
    df = source if isinstance(source, pd.DataFrame) else read_table(source)
    train = df if train_rows is None else df.iloc[np.asarray(train_rows)]
    pre = Preprocessor(schema).fit(train)
    blocks, names = pre.transform(df)
    data = Dataset(pre.response(df), blocks, truths={"_columns": names})
    return data, pre


def heart_like_frame(n: int = 918, seed: int = 0) -> pd.DataFrame:
    """Synthetic table with the heart-disease schema and a separable response.

    The label is a deterministic threshold of a score built from covariates
    on both clients, so a good vertical model can classify nearly perfectly.
    """
    rng = RngStream(seed, 0, epoch=2**62 + 2).generator()
    df = pd.DataFrame({
        "Age": rng.integers(28, 78, n),
        "Sex": rng.choice(["M", "F"], n, p=[0.79, 0.21]),
        "ChestPainType": rng.choice(["ASY", "NAP", "ATA", "TA"], n, p=[0.54, 0.22, 0.19, 0.05]),
        "RestingBP": np.round(rng.normal(132, 18, n)),
        "Cholesterol": np.round(rng.normal(200, 60, n)),
        "FastingBS": rng.choice([0, 1], n, p=[0.77, 0.23]),
        "RestingECG": rng.choice(["Normal", "LVH", "ST"], n, p=[0.6, 0.2, 0.2]),
        "MaxHR": np.round(rng.normal(137, 25, n)),
        "ExerciseAngina": rng.choice(["N", "Y"], n, p=[0.6, 0.4]),
        "Oldpeak": np.round(np.abs(rng.normal(0.9, 1.0, n)), 1),
        "ST_Slope": rng.choice(["Up", "Flat", "Down"], n, p=[0.43, 0.5, 0.07]),
    })
    score = (
        0.04 * (df["Age"] - 53)
        + 0.8 * (df["Sex"] == "M")
        + 1.5 * (df["ChestPainType"] == "ASY")
        + 0.01 * (df["Cholesterol"] - 200)
        + 1.2 * (df["ExerciseAngina"] == "Y")
        + 0.9 * df["Oldpeak"]
        + 1.6 * (df["ST_Slope"] == "Flat")
        - 0.02 * (df["MaxHR"] - 137)
        - 3.3
    )
    df["HeartDisease"] = (score > 0).astype(int)
    return df


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------


def save_dataset(data: Dataset, directory, generator: Optional[dict] = None):
    """``features_<j>.csv`` per client, ``response.csv`` and ``meta.json``."""
    os.makedirs(directory, exist_ok=True)
    for j, x in enumerate(data.blocks):
        cols = [f"x{k}" for k in range(x.shape[1])]
        pd.DataFrame(x, columns=cols).to_csv(os.path.join(directory, f"features_{j + 1}.csv"), index=False)
    pd.DataFrame({"y": data.y}).to_csv(os.path.join(directory, "response.csv"), index=False)
    meta = {
        "schema_version": 1,
        "n": data.n,
        "n_clients": data.n_clients,
        "block_sizes": data.block_sizes,
        "offset": None if data.offset is None else data.offset.tolist(),
        "group": None if data.group is None else data.group.tolist(),
        "n_levels": data.n_levels,
        "truths": data.truths,
        "generator": generator,
    }
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)


def load_dataset(directory) -> Dataset:
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.exists(meta_path):
        raise DataError(f"{directory} is not a dataset directory (no meta.json)")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    def read(name):
        # the default C parser can be off by an ulp
        return pd.read_csv(os.path.join(directory, name), float_precision="round_trip")

    blocks = [read(f"features_{j + 1}.csv").to_numpy(dtype=np.float64) for j in range(meta["n_clients"])]
    y = read("response.csv")["y"].to_numpy(dtype=np.float64)
    return Dataset(
        y,
        blocks,
        offset=None if meta["offset"] is None else np.array(meta["offset"]),
        group=None if meta["group"] is None else np.array(meta["group"]),
        n_levels=meta["n_levels"],
        truths=meta.get("truths") or {},
    )
