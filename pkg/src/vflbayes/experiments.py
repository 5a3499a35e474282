"""Config-driven experiment runs, evaluation metrics and oracles."""
from __future__ import annotations

import copy
import json
import os
import struct
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy.integrate import simpson, trapezoid

from . import __version__
from .data import (
    HEART_SCHEMA,
    GeneratorSpec,
    generate,
    heart_like_frame,
    kfold,
    load_and_preprocess,
    load_dataset,
    read_table,
)
from .federation import ConfigError, FitConfig, FitResult, fit
from .mathcore import AdamState, RngStream, adam_step, sigmoid
from .models import (
    Dataset,
    ModelSpec,
    SharedParams,
    build_blocks,
    linear_predictor,
    log_evidence_linear,
    loglik_rows,
    marginalized_posterior_linear,
)
from .neural import MlpSpec, mlp_backward, mlp_forward, mlp_init
from .soul import SoulConfig, run_soul
from .variational import GaussianFactor, ThetaFactor

SCHEMA_VERSION = 1
ALGORITHMS = ("alg1", "alg2", "soul", "monolithic")
SAMPLE_EPOCH = 2**62 + 3


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    name: str
    model: dict
    algorithm: str = "alg1"
    fit: dict = field(default_factory=dict)
    soul: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    n_samples: int = 1000
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config key(s): {sorted(extra)}")
        if "name" not in d or "model" not in d:
            raise ConfigError("config needs 'name' and 'model'")
        cfg = cls(**copy.deepcopy(d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, env=None) -> "ExperimentConfig":
        env = os.environ if env is None else env
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if "VFLB_SEED" in env:
            d["seeds"] = [int(env["VFLB_SEED"])]
        if "VFLB_OUTPUT_DIR" in env:
            d["output_dir"] = env["VFLB_OUTPUT_DIR"]
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_spec(self) -> ModelSpec:
        try:
            return ModelSpec.from_dict(self.model)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model: {exc}") from exc

    def fit_config(self, seed: int) -> FitConfig:
        try:
            return FitConfig(**{**self.fit, "seed": seed})
        except TypeError as exc:
            raise ConfigError(f"invalid fit settings: {exc}") from exc

    def soul_config(self, seed: int) -> SoulConfig:
        try:
            return SoulConfig(**{**self.soul, "seed": seed})
        except TypeError as exc:
            raise ConfigError(f"invalid soul settings: {exc}") from exc

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {self.schema_version} is not supported")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        spec = self.model_spec()
        fc = self.fit_config(self.seeds[0] if self.seeds else 0)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        validate_combination(spec, self.algorithm, fc.aux_family, fc.y_visibility)
        if self.algorithm == "soul":
            self.soul_config(self.seeds[0])


def validate_combination(spec: ModelSpec, algorithm: str, aux_family: str, y_visibility: str) -> None:
    """Reject model/algorithm pairs that cannot run.

    Without auxiliary variables there is nothing to amortize; the protocols
    are tied to their formulation; the power likelihood needs the response on
    every client.
    """
    if spec.formulation == "true" and aux_family == "amortized":
        raise ConfigError("the amortized family needs auxiliary variables; not available for the true model")
    if spec.formulation == "true" and algorithm != "monolithic":
        raise ConfigError("the true model has no federated protocol; use algorithm 'monolithic'")
    if algorithm == "alg1" and spec.formulation != "augmented":
        raise ConfigError("alg1 fits the augmented formulation")
    if algorithm == "alg2" and spec.formulation != "power":
        raise ConfigError("alg2 fits the power formulation")
    if spec.formulation == "power" and y_visibility != "shared":
        raise ConfigError("the power formulation needs the response on every client (y_visibility='shared')")
    if algorithm == "soul" and spec.formulation == "true":
        raise ConfigError("SOUL needs auxiliary variables")


# ---------------------------------------------------------------------------
# Data sources
# ---------------------------------------------------------------------------


def heart_frame(path: Optional[str]) -> tuple:
    """Heart table from ``path``, or the synthetic stand-in when absent."""
    if path and os.path.exists(path):
        return read_table(path), False
    warnings.warn("heart dataset not found; using the synthetic stand-in with the same schema")
    return heart_like_frame(), True


def load_data(source: dict, seed: int = 0) -> Dataset:
    kind = source.get("kind", "generate")
    if kind == "generate":
        g = dict(source.get("generator", {}))
        g.setdefault("seed", seed)
        try:
            spec = GeneratorSpec(**g)
        except TypeError as exc:
            raise ConfigError(f"invalid generator settings: {exc}") from exc
        return generate(spec)[0]
    if kind == "directory":
        return load_dataset(source["path"])
    if kind in ("csv", "heart"):
        df, _ = heart_frame(source.get("path")) if kind == "heart" else (read_table(source["path"]), False)
        return load_and_preprocess(df, HEART_SCHEMA)[0]
    raise ConfigError(f"unknown data kind {kind!r}")


# ---------------------------------------------------------------------------
# Factor files
# ---------------------------------------------------------------------------


def write_factors(path, entries: list) -> None:
    """``uint32`` little-endian header length, JSON header, float64 LE payload.

    ``entries`` is a list of ``(name, array, meta)``.
    """
    header = {"schema_version": SCHEMA_VERSION, "entries": []}
    chunks = []
    offset = 0
    for name, arr, meta in entries:
        arr = np.asarray(arr, dtype=np.float64).ravel()
        header["entries"].append({"name": name, "offset": offset, "length": int(arr.size), "meta": meta})
        offset += arr.size
        chunks.append(arr.astype("<f8").tobytes())
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def read_factors(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    (hlen,) = struct.unpack_from("<I", raw, 0)
    header = json.loads(raw[4:4 + hlen].decode("utf-8"))
    data = np.frombuffer(raw, dtype="<f8", offset=4 + hlen).astype(np.float64)
    out = {}
    for e in header["entries"]:
        out[e["name"]] = (data[e["offset"]:e["offset"] + e["length"]].copy(), e["meta"])
    return out


# ---------------------------------------------------------------------------
# Fitted model: reconstruction and sampling
# ---------------------------------------------------------------------------


@dataclass
class FittedModel:
    """Everything needed to draw from or predict with a finished run."""

    spec: ModelSpec
    phis: list
    locals_: list
    shared_factor: Optional[GaussianFactor]
    shared_point: Optional[np.ndarray] = None
    conditional: bool = False

    @classmethod
    def from_fit(cls, res: FitResult, averaged: bool = True):
        phis = res.averaged_phis if averaged and res.averaged_phis is not None else res.phis
        sf = res.shared_factor
        if sf is not None and averaged and res.averaged_shared is not None:
            sf = GaussianFactor(sf.dim, True, params=res.averaged_shared.copy())
        locals_ = [None if b.local is None else b.local.copy() for b in res.blocks]
        return cls(res.spec, [p.copy() for p in phis], locals_, sf)

    def blocks(self, data: Dataset) -> list:
        blocks = build_blocks(self.spec, data)
        for b, loc in zip(blocks, self.locals_):
            if loc is not None:
                b.local[...] = loc
        return blocks

    def entries(self) -> list:
        out = []
        for j, phi in enumerate(self.phis):
            out.append((f"phi_{j + 1}", phi.params, {"dim": phi.dim, "diagonal": phi.diagonal}))
            if self.locals_[j] is not None:
                out.append((f"local_{j + 1}", self.locals_[j], {}))
        if self.shared_factor is not None:
            out.append(("shared", self.shared_factor.params, {"dim": self.shared_factor.dim, "diagonal": True}))
        if self.shared_point is not None:
            out.append(("shared_point", self.shared_point, {}))
        return out

    @classmethod
    def from_entries(cls, spec: ModelSpec, entries: dict, conditional=False):
        phis, locals_ = [], []
        j = 1
        while f"phi_{j}" in entries:
            arr, meta = entries[f"phi_{j}"]
            phis.append(ThetaFactor(meta["dim"], meta["diagonal"], params=arr))
            locals_.append(entries[f"local_{j}"][0] if f"local_{j}" in entries else None)
            j += 1
        sf = None
        if "shared" in entries:
            arr, meta = entries["shared"]
            sf = GaussianFactor(meta["dim"], True, params=arr)
        sp = entries["shared_point"][0] if "shared_point" in entries else None
        return cls(spec, phis, locals_, sf, sp, conditional)

    def draw(self, n_draws: int, seed: int):
        """``(theta draws per client, shared draws)``, each with ``n_draws`` rows."""
        stream = RngStream(seed, 0, epoch=SAMPLE_EPOCH)
        thetas = []
        for phi in self.phis:
            eps = stream.normal(n_draws * phi.dim).reshape(n_draws, phi.dim)
            thetas.append(np.array([phi.sample(e) for e in eps]).reshape(n_draws, phi.dim))
        shared = SharedParams(self.spec)
        if self.shared_factor is not None:
            eps = stream.normal(n_draws * shared.dim).reshape(n_draws, shared.dim)
            us = np.array([self.shared_factor.sample(e) for e in eps])
        elif self.shared_point is not None:
            us = np.tile(self.shared_point, (n_draws, 1))
        else:
            us = np.zeros((n_draws, shared.dim))
        return thetas, us


def sample_table(model: FittedModel, data: Dataset, n_draws: int, seed: int) -> pd.DataFrame:
    """Posterior draws on the reported scale, one column per parameter."""
    blocks = model.blocks(data)
    thetas, us = model.draw(n_draws, seed)
    cols = {}
    for blk, th in zip(blocks, thetas):
        for k, name in enumerate(blk.param_names()):
            shown = name.replace("log_sigma", "sigma") if name.startswith("log_sigma") else name
            cols[shown] = blk.transform(name, th[:, k])
    shared = SharedParams(model.spec)
    for k, name in enumerate(shared.names):
        cols["sigma" if name == "log_sigma" else name] = np.exp(us[:, k]) if name == "log_sigma" else us[:, k]
    return pd.DataFrame(cols)


# ---------------------------------------------------------------------------
# Running a config
# ---------------------------------------------------------------------------


@dataclass
class RunOutput:
    directory: str
    model: FittedModel
    result: object
    meta: dict


def run_single(cfg: ExperimentConfig, seed: int, data: Optional[Dataset] = None,
               out_dir: Optional[str] = None, iterations: Optional[int] = None) -> RunOutput:
    """Fit one seed and write its output files."""
    spec = cfg.model_spec()
    data = load_data(cfg.data, seed) if data is None else data
    if cfg.algorithm == "soul":
        sc = cfg.soul_config(seed)
        if iterations is not None:
            sc.outer_iterations = iterations
        res = run_soul(spec, data, sc)
        phis = []
        for j, d in enumerate(res.theta_draws):
            f = ThetaFactor(d.shape[1])
            if len(d) > 1:
                half = d[len(d) // 2:]
                f.set_from_moments(half.mean(axis=0), np.atleast_2d(np.cov(half.T)) + 1e-12 * np.eye(d.shape[1]))
            phis.append(f)
        model = FittedModel(spec, phis, [None] * len(phis), None, res.u.copy(), conditional=True)
        trace = pd.DataFrame(res.trace, columns=["iteration", "grad_norm", "sigma"])
        trace["iteration"] = trace["iteration"].astype(int)
        extra = [(f"z_hat_{j + 1}", z, {}) for j, z in enumerate(res.z_hat)]
        counts = {"n_messages": res.n_messages}
    else:
        fc = cfg.fit_config(seed)
        if iterations is not None:
            fc.iterations = iterations
            fc.average_last = min(fc.average_last, iterations)
        res = fit(spec, data, fc, cfg.algorithm)
        model = FittedModel.from_fit(res)
        trace = pd.DataFrame(res.trace, columns=["iteration", "L0", "sum_Lj", "total"])
        trace["iteration"] = trace["iteration"].astype(int)
        extra = []
        counts = {"n_messages": res.n_messages, "n_bytes": res.n_bytes}

    out_dir = out_dir or os.path.join(cfg.output_dir, cfg.name, f"seed_{seed}")
    os.makedirs(out_dir, exist_ok=True)
    trace.to_csv(os.path.join(out_dir, "elbo_trace.csv"), index=False)
    write_factors(os.path.join(out_dir, "factors.bin"), model.entries() + extra)
    sample_table(model, data, cfg.n_samples, seed).to_csv(os.path.join(out_dir, "samples.csv"), index=False)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "config": cfg.to_dict(),
        "seed": seed,
        "algorithm": cfg.algorithm,
        "conditional": model.conditional,
        "iterations": len(trace),
        "wall_time_s": res.wall_time,
        "truths": {k: v for k, v in data.truths.items() if not k.startswith("_")},
        **counts,
    }
    with open(os.path.join(out_dir, "run_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
    return RunOutput(out_dir, model, res, meta)


def load_run(directory) -> tuple:
    """``(FittedModel, run_meta)`` from a run directory."""
    meta_path = os.path.join(directory, "run_meta.json")
    if not os.path.exists(meta_path):
        raise ConfigError(f"{directory} has no run_meta.json")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    spec = ModelSpec.from_dict(meta["config"]["model"])
    entries = read_factors(os.path.join(directory, "factors.bin"))
    return FittedModel.from_entries(spec, entries, meta.get("conditional", False)), meta


# ---------------------------------------------------------------------------
# Prediction metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    accuracy: list = field(default_factory=list)
    loglik_all: list = field(default_factory=list)
    loglik_incorrect: list = field(default_factory=list)

    def add(self, acc, ll_all, ll_inc):
        if not 0.0 <= acc <= 100.0:
            raise ValueError("accuracy must be a percentage")
        self.accuracy.append(float(acc))
        self.loglik_all.append(float(ll_all))
        self.loglik_incorrect.append(float(ll_inc))

    @staticmethod
    def _summ(v):
        v = np.array([x for x in v if np.isfinite(x)])
        if v.size == 0:
            return None
        return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0}

    def summary(self) -> dict:
        return {
            "folds": len(self.accuracy),
            "accuracy": self._summ(self.accuracy),
            "loglik_all": self._summ(self.loglik_all),
            "loglik_incorrect": self._summ(self.loglik_incorrect),
        }

    def to_dict(self) -> dict:
        na = [None if not np.isfinite(x) else x for x in self.loglik_incorrect]
        return {"accuracy": self.accuracy, "loglik_all": self.loglik_all, "loglik_incorrect": na,
                "summary": self.summary()}


def bernoulli_metrics(y, prob_draws):
    """Accuracy (%), mean log predictive and the same over misclassified rows.

    ``prob_draws`` is ``(S, n)``; predictions threshold the mean at 0.5.
    The misclassified-row average is NaN when every row is correct.
    """
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(prob_draws, 1e-12, 1 - 1e-12)
    lik = np.where(y[None, :] == 1, p, 1 - p)
    ll = np.log(np.mean(lik, axis=0))
    pred = (np.mean(prob_draws, axis=0) >= 0.5).astype(np.float64)
    wrong = pred != y
    acc = 100.0 * float(np.mean(~wrong))
    ll_inc = float(np.mean(ll[wrong])) if wrong.any() else float("nan")
    return acc, float(np.mean(ll)), ll_inc


def predictive_probabilities(model: FittedModel, data: Dataset, n_draws: int = 100, seed: int = 0):
    """``(S, n)`` success probabilities from the fitted posterior predictive.

    Under the auxiliary-variable formulations each draw adds
    ``z_j ~ N(g_j, rho)`` before the link.
    """
    if model.spec.likelihood != "bernoulli":
        raise ConfigError("predictive accuracy needs a Bernoulli model")
    blocks = model.blocks(data)
    thetas, us = model.draw(n_draws, seed)
    shared = SharedParams(model.spec)
    stream = RngStream(seed, 1, epoch=SAMPLE_EPOCH)
    out = np.empty((n_draws, data.n))
    for s in range(n_draws):
        tot = np.zeros(data.n)
        for blk, th in zip(blocks, thetas):
            g = blk.predictor(th[s])
            if model.spec.rho is not None:
                g = g + model.spec.rho * stream.normal(data.n)
            tot += g
        b, _ = shared.unpack(us[s])
        out[s] = sigmoid(linear_predictor(tot, b, data.offset))
    return out


def evaluate(model: FittedModel, data: Dataset, n_draws: int = 100, seed: int = 0) -> tuple:
    return bernoulli_metrics(data.y, predictive_probabilities(model, data, n_draws, seed))


# ---------------------------------------------------------------------------
# Split NN baseline (point estimates, no auxiliary variables)
# ---------------------------------------------------------------------------


@dataclass
class SplitNNBaseline:
    nets: list
    bias: float = 0.0

    def logits(self, data: Dataset) -> np.ndarray:
        out = np.full(data.n, self.bias)
        for net, x in zip(self.nets, data.blocks):
            out += mlp_forward(net, x)[0][:, 0]
        return out


def fit_splitnn_baseline(data: Dataset, hidden=(8, 8), iterations: int = 5000, lr: float = 1e-3,
                         seed: int = 0, activation: str = "tanh") -> SplitNNBaseline:
    """Each client maps its covariates to one logit contribution; the server sums and links."""
    nets, opts = [], []
    for j, x in enumerate(data.blocks):
        spec = MlpSpec((x.shape[1],) + tuple(hidden) + (1,), activation)
        nets.append(mlp_init(spec, RngStream(seed, 1000 + j + 1)))
        opts.append(AdamState(spec.n_params, lr=lr))
    bias_opt = AdamState(1, lr=lr)
    model = SplitNNBaseline(nets)
    y = data.y
    for _ in range(iterations):
        outs = [mlp_forward(net, x) for net, x in zip(nets, data.blocks)]
        eta = model.bias + np.sum([o[:, 0] for o, _ in outs], axis=0)
        d_eta = y - sigmoid(eta)
        for net, (_, tape), opt in zip(nets, outs, opts):
            g, _ = mlp_backward(net, tape, d_eta[:, None])
            net.flat[...] += adam_step(opt, g)
        model.bias += float(adam_step(bias_opt, np.array([d_eta.sum()]))[0])
    return model


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


def cross_validate(cfg: ExperimentConfig, seed: int = 0, folds_to_run: Optional[int] = None,
                   iterations: Optional[int] = None, frame: Optional[pd.DataFrame] = None) -> MetricsReport:
    """k-fold evaluation on a tabular source; preprocessing is refitted per fold.

    ``evaluation.baseline = true`` fits the point-estimate split network
    instead of the configured Bayesian model.
    """
    ev = cfg.evaluation
    k = int(ev.get("folds", 10))
    n_draws = int(ev.get("posterior_draws", 100))
    if frame is None:
        src = cfg.data
        if src.get("kind") == "heart":
            frame, _ = heart_frame(src.get("path"))
        elif src.get("kind") == "csv":
            frame = read_table(src["path"])
        else:
            raise ConfigError("cross-validation needs a tabular data source")
    folds = kfold(len(frame), k, seed)
    report = MetricsReport()
    n_run = k if folds_to_run is None else min(folds_to_run, k)
    for f in range(n_run):
        train_rows = np.flatnonzero(folds != f)
        test_rows = np.flatnonzero(folds == f)
        full, _ = load_and_preprocess(frame, HEART_SCHEMA, train_rows=train_rows)
        train, test = full.subset(train_rows), full.subset(test_rows)
        if ev.get("baseline", False):
            its = iterations if iterations is not None else int(cfg.fit.get("iterations", 5000))
            base = fit_splitnn_baseline(train, tuple(cfg.model.get("feature_widths", (8, 8, 2)))[:-1], its,
                                        float(cfg.fit.get("lr", 1e-3)), seed + f)
            report.add(*bernoulli_metrics(test.y, sigmoid(base.logits(test))[None, :]))
            continue
        fc = cfg.fit_config(seed + f)
        if iterations is not None:
            fc.iterations = iterations
            fc.average_last = min(fc.average_last, iterations)
        res = fit(cfg.model_spec(), train, fc, cfg.algorithm)
        model = FittedModel.from_fit(res)
        report.add(*evaluate(model, test, n_draws, seed + f))
    return report


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def linear_oracle(data: Dataset, sigma: float, rhos, prior_scale: float = 1.0) -> dict:
    """Conjugate posterior of the integrated-out linear model for each ``rho``."""
    out = {"sigma": sigma, "posteriors": []}
    for rho in rhos:
        post = marginalized_posterior_linear(data, prior_scale, sigma, rho)
        out["posteriors"].append({
            "rho": rho,
            "mean": post.mean.tolist(),
            "std": post.std.tolist(),
            "log_evidence": log_evidence_linear(data, prior_scale, sigma, rho),
        })
    return out


def grid_posterior(data: Dataset, spec: ModelSpec, lo=-5.0, hi=5.0, points: int = 201) -> dict:
    """Trapezoid-rule posterior over at most two free parameters (true model)."""
    blocks = build_blocks(spec, data)
    dims = [b.dim for b in blocks]
    shared = SharedParams(spec)
    total = sum(dims) + shared.dim
    if total > 2 or any(b.local is not None for b in blocks):
        raise ConfigError(f"grid mode handles at most 2 free parameters, model has {total}")
    axis = np.linspace(lo, hi, points)
    mesh = np.meshgrid(*([axis] * total), indexing="ij")
    flat = np.stack([m.ravel() for m in mesh], axis=1)
    logp = np.empty(len(flat))
    for i, v in enumerate(flat):
        off, eta_sum, lp = 0, np.zeros(data.n), 0.0
        for b in blocks:
            th = v[off:off + b.dim]
            eta_sum += b.predictor(th)
            lp += b.log_prior(th)[0]
            off += b.dim
        u = v[off:]
        bb, sig = shared.unpack(u)
        if shared.dim:
            lp += shared.log_prior(u)[0]
        lp += float(np.sum(loglik_rows(spec.likelihood, data.y, linear_predictor(eta_sum, bb, data.offset), sig)))
        logp[i] = lp
    dens = np.exp(logp - logp.max()).reshape(mesh[0].shape)

    def integrate(f, rule=trapezoid):
        for _ in range(total):
            f = rule(f, x=axis, axis=0)
        return float(f)

    z = integrate(dens)
    dens = dens / z
    means = [integrate(dens * m) for m in mesh]
    variances = [integrate(dens * (m - mu) ** 2) for m, mu in zip(mesh, means)]
    return {
        # a second rule on the same grid; departs from 1 when the grid is too coarse
        "normalization": integrate(dens, simpson),
        "mean": means,
        "std": [float(np.sqrt(v)) for v in variances],
        "log_normalizer": float(np.log(z) + logp.max()),
    }


def export_density(model: FittedModel, data: Dataset, parameter: str, n_draws: int = 10000,
                   seed: int = 0, truths: Optional[dict] = None) -> pd.DataFrame:
    table = sample_table(model, data, n_draws, seed)
    if parameter not in table.columns:
        raise ConfigError(f"unknown parameter {parameter!r}; available: {list(table.columns)}")
    df = pd.DataFrame({"draw": table[parameter].to_numpy()})
    truths = truths or {}
    key = parameter.replace("sigma_", "log_sigma_") if parameter.startswith("sigma_") else parameter
    if key in truths:
        t = truths[key]
        df["truth"] = np.exp(t) if key != parameter else t
    elif parameter in truths:
        df["truth"] = truths[parameter]
    return df
