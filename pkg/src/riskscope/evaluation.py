"""Evaluation indices, the repeated-fit experiment protocol and reports.

Band bins are ``(c - 0.1, c]`` for ``c = 0.1, ..., 1.0``; a band of exactly 0
goes to the first bin.  Integrals over the input region are cell sums on the
fit grid weighted by cell volume.
"""

from __future__ import annotations

import csv
import json
import threading
import time
import traceback
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import baselines, dlgp, simbench
from .dlgp import DlgpConfig, DlgpModel, LambdaPrior, RobustnessLevels
from .lgp import Grid, HyperPrior, bin_counts, make_grid
from .numerics import make_rng, pmap

__all__ = [
    "C_VALUES",
    "METHODS",
    "band_bins",
    "confidence_band_field",
    "ind_from_fields",
    "ind_index",
    "cred_ratio_from_band",
    "cred_ratio",
    "no_sample_ratio",
    "evaluate_model",
    "ExperimentConfig",
    "load_config",
    "run_experiment",
    "validate_report",
    "write_report",
    "write_plot_data",
    "load_model",
]

REPORT_SCHEMA = "riskscope.report/1"
C_VALUES = tuple(round(0.1 * k, 1) for k in range(1, 11))
METHODS = ("dlgp0", "dlgpopt", "dlgp1", "dkde", "gdp")

# sub-stream ids for make_rng
STREAM_REP = 31
STREAM_DATASET = 32


def band_bins(band) -> np.ndarray:
    """Bin index 0..9 of each band value."""
    band = np.asarray(band, dtype=float)
    return np.clip(np.searchsorted(np.asarray(C_VALUES), band, side="left"), 0, 9)


def _bin_of(c) -> int:
    k = int(round(float(c) * 10)) - 1
    if not 0 <= k <= 9 or abs(float(c) - C_VALUES[k]) > 1e-9:
        raise ValueError(f"c must be one of {C_VALUES}")
    return k


def confidence_band_field(model, beta: float = 0.05) -> np.ndarray:
    return model.query_cells(beta).band


def ind_from_fields(mean, truth, band, c, volumes=None):
    """Volume-weighted mean squared error over cells whose band falls in bin c.

    Returns None when the bin is empty.
    """
    mean, truth = np.asarray(mean, dtype=float), np.asarray(truth, dtype=float)
    vol = np.ones(len(mean)) if volumes is None else np.asarray(volumes, dtype=float)
    sel = band_bins(band) == _bin_of(c)
    if not sel.any():
        return None
    err = np.sum((mean[sel] - truth[sel]) ** 2, axis=1)
    return float(np.sum(err * vol[sel]) / np.sum(vol[sel]))


def ind_index(model, truth, c, beta: float = 0.05):
    q = model.query_cells(beta)
    return ind_from_fields(q.mean, _truth_pi(model, truth), q.band, c, model.grid.cell_volumes)


def cred_ratio_from_band(band, c, volumes=None) -> float:
    band = np.asarray(band, dtype=float)
    vol = np.ones(len(band)) if volumes is None else np.asarray(volumes, dtype=float)
    return float(np.sum(vol[band_bins(band) == _bin_of(c)]) / np.sum(vol))


def cred_ratio(model, c, beta: float = 0.05) -> float:
    return cred_ratio_from_band(confidence_band_field(model, beta), c, model.grid.cell_volumes)


def no_sample_ratio(inputs, grid: Grid) -> float:
    """Fraction of grid cells holding no input."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, grid.ndim)
    if len(inputs) == 0:
        return 1.0
    hit = np.zeros(grid.n_cells, dtype=bool)
    hit[grid.locate(inputs)] = True
    return float(1.0 - hit.mean())


def _truth_pi(model, truth) -> np.ndarray:
    if truth.grid != model.grid:
        raise ValueError("truth field and model use different grids")
    return truth.pi


def evaluate_model(model, truth, beta: float = 0.05) -> dict:
    """Ind and CredRatio for every bin from a single field query."""
    q = model.query_cells(beta)
    pi = _truth_pi(model, truth)
    vol = model.grid.cell_volumes
    return {
        "ind": [ind_from_fields(q.mean, pi, q.band, c, vol) for c in C_VALUES],
        "cred_ratio": [cred_ratio_from_band(q.band, c, vol) for c in C_VALUES],
    }


def load_model(d):
    """Rebuild a model from its JSON dict, dispatching on ``method``."""
    method = d.get("method")
    if method == "dlgp":
        return DlgpModel.from_dict(d)
    if method == "dkde":
        return baselines.KdeModel.from_dict(d)
    if method == "gdp":
        return baselines.GdpModel.from_dict(d)
    raise ValueError(f"unknown model method {method!r}")


# --- configuration ----------------------------------------------------------


@dataclass
class DataSection:
    source: str = "generate"  # "generate" or a CSV path
    n: int = 500
    seed: int = 0
    levels: list = field(default_factory=lambda: [-10.0, 0.0])
    region: list = field(default_factory=lambda: [[0.0, 10.0], [0.0, 10.0]])
    world: str = ""  # empty: shipped default
    formula: str = ""  # empty: shipped default
    sigmoid: str = "printed"


@dataclass
class TruthSection:
    source: str = "build"  # "build" or a JSON path
    m: int = 100_000
    bandwidth: float = 0.01
    seed: int = 1
    cache_dir: str = ""


@dataclass
class DlgpSection:
    grid_width: float = 0.5
    draws: int = 2000
    lambda_max: float = 10.0
    lambda_shape: float = 3.0
    lambda_scale: float = 1.0
    amplitude_scale: float = 1.0
    inv_lengthscale_scale: float = 1.0
    hyper_bounds: list = field(default_factory=lambda: [1e-2, 1e2])
    hyper_grid: int = 15
    alpha_prior: list = field(default_factory=list)  # empty: 1/m each
    count_measure: str = "density"


@dataclass
class GdpSection:
    alpha_eps: float = 0.01
    draws: int = 2000


@dataclass
class ExperimentConfig:
    methods: list = field(default_factory=lambda: list(METHODS))
    repetitions: int = 20
    seed: int = 0
    reseed: str = "inference"  # "inference": refit one dataset; "data": fresh dataset per rep
    beta: float = 0.05
    record_timing: bool = False
    out: str = "report.json"
    plots_dir: str = ""
    data: DataSection = field(default_factory=DataSection)
    truth: TruthSection = field(default_factory=TruthSection)
    dlgp: DlgpSection = field(default_factory=DlgpSection)
    gdp: GdpSection = field(default_factory=GdpSection)

    def __post_init__(self):
        for name, cls in (("data", DataSection), ("truth", TruthSection),
                          ("dlgp", DlgpSection), ("gdp", GdpSection)):
            val = getattr(self, name)
            if isinstance(val, dict):
                setattr(self, name, _build(cls, val, name))
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if self.reseed not in ("inference", "data"):
            raise ValueError("reseed must be 'inference' or 'data'")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")

    @property
    def levels(self) -> RobustnessLevels:
        return RobustnessLevels(tuple(self.data.levels))

    @property
    def region(self) -> tuple:
        return tuple(tuple(r) for r in self.data.region)

    def dlgp_config(self, seed: int) -> DlgpConfig:
        s = self.dlgp
        return DlgpConfig(
            grid_width=s.grid_width,
            hyper_prior=HyperPrior(s.amplitude_scale, s.inv_lengthscale_scale,
                                   tuple(s.hyper_bounds), s.hyper_grid),
            lambda_prior=LambdaPrior(s.lambda_shape, s.lambda_scale),
            alpha_prior=tuple(s.alpha_prior) or None,
            draws=s.draws, seed=seed, lambda_max=s.lambda_max,
            count_measure=s.count_measure,
        )

    def sim_config(self) -> simbench.SimConfig:
        return simbench.SimConfig(input_region=self.region, sigmoid=self.data.sigmoid)

    def to_dict(self) -> dict:
        """Experiment parameters; output locations are left out so reports
        written to different paths stay byte-identical."""
        d = asdict(self)
        d.pop("out")
        d.pop("plots_dir")
        return d


def _build(cls, d, where):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return cls(**d)


def load_config(path) -> ExperimentConfig:
    """Read a TOML experiment file: top-level keys plus optional
    ``[data]``, ``[truth]``, ``[dlgp]`` and ``[gdp]`` tables."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    raw = dict(raw.get("experiment", {}), **{k: v for k, v in raw.items() if k != "experiment"})
    return _build(ExperimentConfig, raw, "experiment")


# --- experiment -------------------------------------------------------------


def _sub_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=keys).generate_state(1)[0])


def _world_and_formula(cfg: ExperimentConfig):
    world = simbench.World.load(cfg.data.world) if cfg.data.world else simbench.default_world()
    if cfg.data.formula:
        from .stl import parse
        phi = parse(Path(cfg.data.formula).read_text())
    else:
        phi = simbench.default_formula()
    return world, phi


def _dataset(cfg: ExperimentConfig, rep: int | None, world, phi) -> simbench.LabeledDataset:
    if cfg.data.source != "generate":
        return simbench.LabeledDataset.from_csv(cfg.data.source, cfg.levels)
    keys = (STREAM_DATASET,) if rep is None else (STREAM_DATASET, rep)
    return simbench.generate_dataset(cfg.data.n, cfg.levels, phi,
                                     make_rng(cfg.data.seed, *keys), world, cfg.sim_config())


def _truth(cfg: ExperimentConfig, grid: Grid, world, phi) -> simbench.TruthField:
    if cfg.truth.source != "build":
        return simbench.TruthField.load(cfg.truth.source)
    return simbench.build_truth_proxy(cfg.truth.m, cfg.truth.bandwidth, cfg.levels, phi,
                                      cfg.truth.seed, grid, world, cfg.sim_config(),
                                      cfg.truth.cache_dir or None)


class _Fits:
    """Deterministic per-dataset fits shared by all repetitions on that dataset."""

    def __init__(self, cfg: ExperimentConfig, ds: simbench.LabeledDataset):
        self.cfg, self.ds = cfg, ds
        self.grid = make_grid(cfg.region, cfg.dlgp.grid_width)
        self._latents = self._kde = self._gdp = None
        self._lock = threading.RLock()

    def latents(self):
        with self._lock:
            return self._latents_locked()

    def _latents_locked(self):
        if self._latents is None:
            counts = bin_counts(self.grid, self.ds.inputs, self.ds.labels, self.cfg.levels.m)
            self._latents = dlgp.fit_latents(self.grid, counts.counts, self.cfg.dlgp_config(0))
        return self._latents

    def kde(self):
        with self._lock:
            return self._kde_locked()

    def _kde_locked(self):
        if self._kde is None:
            self._kde = baselines.dkde_fit(self.ds.inputs, self.ds.labels, self.cfg.levels,
                                           self.cfg.region, self.cfg.dlgp_config(0).alpha_prior,
                                           self.cfg.dlgp.grid_width)
        return self._kde

    def gdp(self):
        with self._lock:
            return self._gdp_locked()

    def _gdp_locked(self):
        if self._gdp is None:
            s = self.cfg.dlgp
            self._gdp = baselines.gdp_fit(
                self.ds.inputs, self.ds.labels, self.cfg.levels, self.cfg.region,
                self.cfg.gdp.alpha_eps, s.grid_width, self.cfg.gdp.draws, 0,
                HyperPrior(bounds=tuple(s.hyper_bounds), n_grid=s.hyper_grid))
        return self._gdp


def _run_rep(cfg: ExperimentConfig, fits: _Fits, truth, rep: int) -> dict:
    seed = _sub_seed(cfg.seed, STREAM_REP, rep)
    out = {}
    dlgp_methods = [m for m in cfg.methods if m.startswith("dlgp")]
    base = None
    for method in cfg.methods:
        t0 = time.perf_counter()
        row = {"repetition": rep, "seed": seed, "lambda": None, "error": None,
               "ind": [None] * 10, "cred_ratio": [None] * 10}
        try:
            if method in dlgp_methods:
                if base is None:
                    base = dlgp.fit(fits.ds.inputs, fits.ds.labels, cfg.levels, cfg.region,
                                    cfg.dlgp_config(seed), latents=fits.latents())
                lam = {"dlgp0": 0.0, "dlgp1": 1.0, "dlgpopt": base.lam_opt}[method]
                model = base.with_lambda(lam)
                row["lambda"] = lam
            elif method == "dkde":
                model = fits.kde()
            else:
                model = fits.gdp()
                model = baselines.GdpModel(model.grid, model.levels, model.inputs,
                                           model.targets, model.noise, model.params,
                                           model.alpha_eps, model.draws, seed)
            row.update(evaluate_model(model, truth, cfg.beta))
        except Exception as exc:  # recorded per repetition rather than aborting the batch
            row["error"] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        if cfg.record_timing:
            row["seconds"] = time.perf_counter() - t0
        out[method] = row
    return out


def _summary(rows: list) -> dict:
    ind = np.array([[np.nan if v is None else v for v in r["ind"]] for r in rows], dtype=float)
    cred = np.array([[np.nan if v is None else v for v in r["cred_ratio"]] for r in rows],
                    dtype=float)

    def stat(a, fn):
        out = []
        for col in a.T:
            col = col[~np.isnan(col)]
            out.append(None if col.size == 0 else float(fn(col)))
        return out

    ind_mean = stat(ind, np.mean)
    present = [v for v in ind_mean if v is not None]
    return {
        "ind_mean": ind_mean,
        "ind_std": stat(ind, lambda c: c.std(ddof=1) if c.size > 1 else 0.0),
        "cred_ratio_mean": stat(cred, np.mean),
        "cred_ratio_std": stat(cred, lambda c: c.std(ddof=1) if c.size > 1 else 0.0),
        "ind_overall": float(np.mean(present)) if present else None,
        "failures": sum(r["error"] is not None for r in rows),
    }


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Fit every method ``cfg.repetitions`` times and evaluate against the truth proxy."""
    world, phi = _world_and_formula(cfg)
    grid = make_grid(cfg.region, cfg.dlgp.grid_width)
    truth = _truth(cfg, grid, world, phi)
    if cfg.reseed == "inference":
        shared = _Fits(cfg, _dataset(cfg, None, world, phi))
        fits = [shared] * cfg.repetitions
    else:
        fits = [_Fits(cfg, _dataset(cfg, r, world, phi)) for r in range(cfg.repetitions)]
    results = pmap(lambda r: _run_rep(cfg, fits[r], truth, r), range(cfg.repetitions))
    methods = {}
    for m in cfg.methods:
        rows = [res[m] for res in results]
        methods[m] = {"repetitions": rows, "summary": _summary(rows)}
    return {
        "schema": REPORT_SCHEMA,
        "config": cfg.to_dict(),
        "c": list(C_VALUES),
        "no_sample_ratio": [no_sample_ratio(f.ds.inputs, grid) for f in fits],
        "level_counts": [f.ds.level_counts().tolist() for f in fits],
        "truth": {k: truth.meta.get(k) for k in ("M", "bandwidth", "seed", "geometry")},
        "methods": methods,
    }


def report_schema() -> dict:
    return json.loads(resources.files("riskscope").joinpath("data/report.schema.json").read_text())


def validate_report(report: dict) -> None:
    import jsonschema
    jsonschema.validate(report, report_schema())


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_report(report: dict, path) -> None:
    validate_report(report)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps_report(report))


def write_plot_data(report: dict, plots_dir) -> None:
    """Tidy CSVs ``ind.csv`` and ``cred_ratio.csv`` with columns
    method, repetition, c, value (empty value for an absent bin)."""
    d = Path(plots_dir)
    d.mkdir(parents=True, exist_ok=True)
    for key in ("ind", "cred_ratio"):
        with open(d / f"{key}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "repetition", "c", "value"])
            for method, block in report["methods"].items():
                for row in block["repetitions"]:
                    for c, v in zip(report["c"], row[key]):
                        w.writerow([method, row["repetition"], c, "" if v is None else repr(v)])
    with open(d / "no_sample_ratio.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "value"])
        for k, v in enumerate(report["no_sample_ratio"]):
            w.writerow([k, repr(v)])


def evaluate_models(models: dict, truth, beta: float = 0.05, inputs=None) -> dict:
    """Single-repetition report for already fitted models keyed by label."""
    methods = {}
    grid = None
    for label, model in models.items():
        grid = model.grid
        row = {"repetition": 0, "seed": getattr(model, "seed", 0),
               "lambda": getattr(model, "lam", None), "error": None}
        row.update(evaluate_model(model, truth, beta))
        methods[label] = {"repetitions": [row], "summary": _summary([row])}
    return {
        "schema": REPORT_SCHEMA,
        "config": {"beta": beta, "models": list(models)},
        "c": list(C_VALUES),
        "no_sample_ratio": [] if inputs is None else [no_sample_ratio(inputs, grid)],
        "level_counts": [],
        "truth": {k: truth.meta.get(k) for k in ("M", "bandwidth", "seed", "geometry")},
        "methods": methods,
    }
