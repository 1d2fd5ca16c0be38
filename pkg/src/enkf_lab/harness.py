"""Configuration-driven experiment recipes.

A configuration is a JSON document naming an experiment ``kind``, a model,
a data record (simulated or loaded), and kind-specific sizes and
tolerances. :func:`run_experiment` writes ``results.csv`` (RFC 4180),
``summary.json`` (resolved configuration, code version, results, checks)
and ``metadata.json`` (timestamps and other run-dependent facts, kept apart
so the first two are reproducible byte for byte).
"""

from __future__ import annotations

import copy
import csv
import datetime as _dt
import io
import json
import math
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .errors import ConfigurationError, EnkfLabError
from .measures import GaussianMeasure, axes_box, mean_cov, render, weighted_tv
from .meanfield import mf_run
from .model import ModelSpec, load_data, scalar_model, simulate_truth, validate_assumptions
from .particle import coupled_run, mc_rate_experiment, reference_measure
from .rates import fit_rate
from .suites import SUITES, run_suites
from .truefilter import GridPolicy, filter_run, kalman_exact

KINDS = ("exactness", "mc-rate", "eps-scaling", "chaos", "lipschitz-suite", "dg-convergence")

DEFAULT_TOLERANCES = {
    "exactness": {"meanfield": 1e-12, "truefilter": 1e-5, "refinement_ratio": 2.0},
    "mc-rate": {"slope": -0.5, "slope_tol": 0.1, "plateau_slope": -0.25},
    "eps-scaling": {"slope": 1.0, "slope_tol": 0.25},
    "chaos": {"sqrtN_ratio": 3.0, "z_slope": -0.5, "z_slope_tol": 0.15},
    "lipschitz-suite": {"max_violations": 0},
    "dg-convergence": {"ratio": 0.5},
}

_REQUIRED = {
    "exactness": ("model", "data"),
    "mc-rate": ("model", "data", "N", "replicates"),
    "eps-scaling": ("model", "data", "eps", "grid"),
    "chaos": ("model", "data", "N", "replicates"),
    "lipschitz-suite": (),
    "dg-convergence": ("n",),
}

_KNOWN = {"kind", "model", "data", "grid", "N", "eps", "replicates", "seed", "observables", "tolerances",
          "out", "threads", "reference", "analysis", "suites", "instances", "n", "pair", "box", "p", "t",
          "description"}


def code_version() -> dict:
    return {"package": "enkf_lab", "version": __version__, "kernel_backend": kernels.BACKEND}


# ---------------------------------------------------------------------------
# configuration


def _field_error(name, msg):
    return ConfigurationError(f"field '{name}': {msg}")


def _positive_int_list(cfg, name, min_len):
    v = cfg[name]
    if not isinstance(v, list) or len(v) < min_len:
        raise _field_error(name, f"expected a list of at least {min_len} entries")
    if not all(isinstance(x, int) and not isinstance(x, bool) and x > 0 for x in v):
        raise _field_error(name, "entries must be positive integers")
    return v


def _positive_float_list(cfg, name, min_len):
    v = cfg[name]
    if not isinstance(v, list) or len(v) < min_len:
        raise _field_error(name, f"expected a list of at least {min_len} entries")
    try:
        out = [float(x) for x in v]
    except (TypeError, ValueError):
        raise _field_error(name, "entries must be numbers") from None
    if not all(x > 0 and math.isfinite(x) for x in out):
        raise _field_error(name, "entries must be finite and positive")
    return out


def _read_json(path: Path, what: str):
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"{what}: cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{what} {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _resolve_model(spec, base: Path) -> ModelSpec:
    if isinstance(spec, str):
        spec = _read_json(base / spec, "model file")
    if not isinstance(spec, dict):
        raise _field_error("model", "expected an object or a path")
    try:
        if "scalar" in spec:
            return scalar_model(**spec["scalar"])
        return ModelSpec.from_dict(spec)
    except TypeError as exc:
        raise _field_error("model", str(exc)) from exc
    except KeyError as exc:
        raise _field_error("model", f"missing key {exc}") from exc
    except EnkfLabError as exc:
        raise _field_error("model", str(exc)) from exc


@dataclass
class ExperimentConfig:
    """Validated experiment configuration.

    ``raw`` is the configuration with defaults filled in and the model
    expanded; it is embedded verbatim in the summary.
    """

    kind: str
    seed: int
    raw: dict
    model: ModelSpec | None = None
    data_spec: dict | None = None
    grid: GridPolicy | None = None
    tolerances: dict = field(default_factory=dict)
    threads: int = 1
    out: str | None = None
    base_dir: Path = Path(".")

    def get(self, key, default=None):
        return self.raw.get(key, default)

    def data(self):
        """The data record: loaded from ``data.path`` or simulated from the model."""
        d = self.data_spec
        if d is None:
            raise ConfigurationError("this experiment has no data section")
        if "path" in d:
            return load_data(_read_json(self.base_dir / d["path"], "data file"))
        model = self.model.with_eps(float(d["eps"])) if "eps" in d else self.model
        return simulate_truth(model, int(d["J"]), int(d["seed"]))


def parse_config(cfg: dict, base_dir=".", seed=None, threads=None, out=None) -> ExperimentConfig:
    """Validate a configuration mapping; command-line overrides take precedence.

    Raises
    ------
    ConfigurationError
        Naming the offending field.
    """
    if not isinstance(cfg, dict):
        raise ConfigurationError("configuration must be a JSON object")
    cfg = copy.deepcopy(cfg)
    unknown = sorted(set(cfg) - _KNOWN)
    if unknown:
        raise _field_error(unknown[0], "unknown field")
    kind = cfg.get("kind")
    if kind not in KINDS:
        raise _field_error("kind", f"expected one of {list(KINDS)}, got {kind!r}")
    if seed is not None:
        cfg["seed"] = int(seed)
    if "seed" not in cfg:
        raise _field_error("seed", "an explicit seed is required")
    s = cfg["seed"]
    if not isinstance(s, int) or isinstance(s, bool) or not 0 <= s < 2 ** 64:
        raise _field_error("seed", "expected an unsigned 64-bit integer")
    for name in _REQUIRED[kind]:
        if name not in cfg:
            raise _field_error(name, f"required for kind '{kind}'")
    base = Path(base_dir)
    out_cfg = ExperimentConfig(kind, s, cfg, base_dir=base)
    if "model" in cfg:
        out_cfg.model = _resolve_model(cfg["model"], base)
        cfg["model"] = out_cfg.model.to_dict()
        try:
            out_cfg.model.check()
        except EnkfLabError as exc:
            raise _field_error("model", str(exc)) from exc
    if "data" in cfg:
        d = cfg["data"]
        if not isinstance(d, dict) or not ("path" in d or ("J" in d and "seed" in d)):
            raise _field_error("data", "expected {\"J\": int, \"seed\": int} or {\"path\": file}")
        if "J" in d and (not isinstance(d["J"], int) or d["J"] < 0):
            raise _field_error("data.J", "expected a non-negative integer")
        out_cfg.data_spec = d
    if "grid" in cfg:
        g = cfg["grid"]
        if not isinstance(g, dict):
            raise _field_error("grid", "expected an object")
        try:
            out_cfg.grid = GridPolicy(**g)
        except TypeError as exc:
            raise _field_error("grid", str(exc)) from exc
        if not isinstance(out_cfg.grid.n, int) or out_cfg.grid.n < 4:
            raise _field_error("grid.n", "expected an integer of at least 4")
        cfg["grid"] = out_cfg.grid.to_dict()
    if "N" in cfg:
        _positive_int_list(cfg, "N", 3 if kind == "mc-rate" else 2)
    if "eps" in cfg:
        _positive_float_list(cfg, "eps", 3 if kind == "eps-scaling" else 2)
    if "n" in cfg:
        _positive_int_list(cfg, "n", 3)
    if "replicates" in cfg and (not isinstance(cfg["replicates"], int) or cfg["replicates"] < 1):
        raise _field_error("replicates", "expected a positive integer")
    if "observables" in cfg and (not isinstance(cfg["observables"], list) or not cfg["observables"]):
        raise _field_error("observables", "expected a non-empty list")
    if "suites" in cfg:
        if not isinstance(cfg["suites"], list) or not cfg["suites"]:
            raise _field_error("suites", "expected a non-empty list")
        bad = [x for x in cfg["suites"] if x not in SUITES]
        if bad:
            raise _field_error("suites", f"unknown suite {bad[0]!r}")
    if kind == "eps-scaling" and not out_cfg.grid.fixed:
        raise _field_error("grid", "eps-scaling compares grids and needs a fixed box (lo, hi)")
    tol = dict(DEFAULT_TOLERANCES[kind])
    user_tol = cfg.get("tolerances", {})
    if not isinstance(user_tol, dict):
        raise _field_error("tolerances", "expected an object")
    tol.update(user_tol)
    cfg["tolerances"] = tol
    out_cfg.tolerances = tol
    out_cfg.threads = int(threads if threads is not None else cfg.pop("threads", 1))
    cfg.pop("threads", None)
    out_cfg.out = out if out is not None else cfg.pop("out", None)
    cfg.pop("out", None)
    return out_cfg


def load_config(path, seed=None, threads=None, out=None) -> ExperimentConfig:
    path = Path(path)
    return parse_config(_read_json(path, "config"), path.parent, seed=seed, threads=threads, out=out)


# ---------------------------------------------------------------------------
# results


@dataclass
class Check:
    name: str
    value: float
    tolerance: object
    passed: bool

    def to_dict(self):
        return {"name": self.name, "value": self.value, "tolerance": self.tolerance, "passed": self.passed}


@dataclass
class ExperimentReport:
    kind: str
    header: list
    rows: list
    results: dict
    checks: list
    config: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(self.header)
        for r in self.rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"kind": self.kind, "config": self.config, "code_version": code_version(),
                "results": self.results, "checks": [c.to_dict() for c in self.checks], "passed": self.passed}


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def summary_json(report: ExperimentReport) -> str:
    return json.dumps(report.summary(), indent=2, sort_keys=True, default=_json_default) + "\n"


# ---------------------------------------------------------------------------
# recipes


def _moment_err(a, b):
    ma, ca = a
    mb, cb = b
    return float(max(np.max(np.abs(ma - mb)), np.max(np.abs(ca - cb))))


def _run_exactness(cfg: ExperimentConfig) -> ExperimentReport:
    model, data = cfg.model, cfg.data()
    tol = cfg.tolerances
    kal = kalman_exact(model, data)
    mf = mf_run(model, data)
    header = ["step", "quantity", "kalman", "meanfield", "meanfield_err"]
    grids = []
    if cfg.grid is not None:
        header += ["truefilter", "truefilter_err", "truefilter_refined", "truefilter_refined_err"]
        analysis = cfg.get("analysis", "composed")
        g = cfg.grid
        fine = GridPolicy(2 * g.n, g.lo, g.hi, g.width, None if g.y_step is None else g.y_step / 2)
        grids = [filter_run(model, data, g, analysis), filter_run(model, data, fine, analysis)]
    rows, mf_err, tf_err = [], [], [[], []]
    for j in range(data.J + 1):
        k = kal[j]
        m = mf.measures[j]
        mf_err.append(_moment_err((m.mean, m.cov), (k.mean, k.cov)))
        tfm = [mean_cov(r.measures[j]) for r in grids]
        for e, t in zip(tf_err, tfm):
            e.append(_moment_err(t, (k.mean, k.cov)))
        for q, kv, mv, tv in _quantities(k, m, tfm):
            row = [j, q, kv, mv, abs(mv - kv)]
            for t in tv:
                row += [t, abs(t - kv)]
            rows.append(row)
    checks = [Check("meanfield_vs_kalman_max_err", max(mf_err), tol["meanfield"], max(mf_err) <= tol["meanfield"])]
    results = {"meanfield_max_err": max(mf_err), "representation": mf.representation}
    if grids:
        e0, e1 = max(tf_err[0]), max(tf_err[1])
        ratio = e0 / e1 if e1 > 0 else math.inf
        checks.append(Check("truefilter_vs_kalman_max_err", e0, tol["truefilter"], e0 <= tol["truefilter"]))
        checks.append(Check("truefilter_refinement_ratio", ratio, tol["refinement_ratio"],
                            ratio >= tol["refinement_ratio"]))
        results.update({"truefilter_max_err": e0, "truefilter_refined_max_err": e1, "refinement_ratio": ratio})
    return ExperimentReport(cfg.kind, header, rows, results, checks, cfg.raw)


def _quantities(k: GaussianMeasure, m, tfm):
    d = k.dim
    out = []
    for a in range(d):
        out.append((f"mean{a}", float(k.mean[a]), float(m.mean[a]), [float(t[0][a]) for t in tfm]))
    for a in range(d):
        for b in range(a, d):
            out.append((f"cov{a}{b}", float(k.cov[a, b]), float(m.cov[a, b]), [float(t[1][a, b]) for t in tfm]))
    return out


def _tail_slope(Ns, ys, k=3):
    return float(np.polyfit(np.log(Ns[-k:]), np.log(ys[-k:]), 1)[0])


def _run_mc_rate(cfg: ExperimentConfig) -> ExperimentReport:
    model, data = cfg.model, cfg.data()
    tol = cfg.tolerances
    Ns = cfg.get("N")
    R = cfg.get("replicates")
    obs = tuple(cfg.get("observables", ["u0", "u0u0"]))
    ref = cfg.get("reference", "auto")
    eps_list = cfg.get("eps")
    checks, results, rows = [], {}, []
    if eps_list is None:
        rep = mc_rate_experiment(model, data, Ns, R, obs, ref, cfg.seed, cfg.threads, cfg.grid)
        header = ["replicate", "step", "N", "phi", "value"]
        rows = [list(r) for r in rep.rows()]
        results = rep.summary()
        for name, fit in rep.fits.items():
            if fit is None:
                ok = bool(np.all(rep.rmse[name] == 0))
                checks.append(Check(f"rmse_identically_zero[{name}]", 0.0, 0.0, ok))
                continue
            lo, hi = tol["slope"] - tol["slope_tol"], tol["slope"] + tol["slope_tol"]
            checks.append(Check(f"rmse_slope[{name}]", fit.slope, [lo, hi], lo <= fit.slope <= hi))
        return ExperimentReport(cfg.kind, header, rows, results, checks, cfg.raw)
    # combined law: one sweep per eps against the reference of that eps
    header = ["eps", "replicate", "step", "N", "phi", "value"]
    plateaus = {name: [] for name in obs}
    per_eps = []
    for e in eps_list:
        m = model.with_eps(e)
        rep = mc_rate_experiment(m, data, Ns, R, obs, ref, cfg.seed, cfg.threads, cfg.grid)
        rows += [[e] + list(r) for r in rep.rows()]
        s = rep.summary()
        s["eps"] = e
        s["tail_slope"] = {}
        for name in obs:
            x = rep.rmse[name]
            plateaus[name].append(float(np.mean(x[-3:])))
            s["tail_slope"][name] = _tail_slope(Ns, x)
            checks.append(Check(f"rmse_decreases[eps={e!r},{name}]", float(x[-1] / x[0]), "< 1", bool(x[-1] < x[0])))
            checks.append(Check(f"rmse_plateaus[eps={e!r},{name}]", s["tail_slope"][name],
                                f"> {tol['plateau_slope']!r}", s["tail_slope"][name] > tol["plateau_slope"]))
        per_eps.append(s)
    order = np.argsort(eps_list)
    for name in obs:
        p = np.asarray(plateaus[name])[order]
        checks.append(Check(f"plateau_increasing_in_eps[{name}]", [float(v) for v in p], "strictly increasing",
                            bool(np.all(np.diff(p) > 0))))
    results = {"per_eps": per_eps, "plateaus": plateaus}
    return ExperimentReport(cfg.kind, header, rows, results, checks, cfg.raw)


def _run_eps_scaling(cfg: ExperimentConfig) -> ExperimentReport:
    model, data = cfg.model, cfg.data()
    tol = cfg.tolerances
    eps_list = cfg.get("eps")
    analysis = cfg.get("analysis", "composed")
    rows, dgJ = [], []
    for e in eps_list:
        m = model.with_eps(e)
        tf = filter_run(m, data, cfg.grid, analysis)
        mf = mf_run(m, data, cfg.grid)
        for j in range(data.J + 1):
            v = weighted_tv(mf.measures[j], tf.measures[j])
            rows.append([e, j, v])
        dgJ.append(rows[-1][2])
    fit = fit_rate(eps_list, dgJ)
    lo, hi = tol["slope"] - tol["slope_tol"], tol["slope"] + tol["slope_tol"]
    order = np.argsort(eps_list)
    mono = bool(np.all(np.diff(np.asarray(dgJ)[order]) > 0))
    checks = [Check("dg_slope", fit.slope, [lo, hi], lo <= fit.slope <= hi),
              Check("dg_monotone_in_eps", [float(v) for v in dgJ], "strictly increasing", mono)]
    results = {"eps": eps_list, "dg_final": dgJ, "fit": fit.to_dict()}
    return ExperimentReport(cfg.kind, ["eps", "step", "dg"], rows, results, checks, cfg.raw)


def _run_chaos(cfg: ExperimentConfig) -> ExperimentReport:
    model, data = cfg.model, cfg.data()
    tol = cfg.tolerances
    Ns, R = cfg.get("N"), cfg.get("replicates")
    ps = tuple(cfg.get("p", [1, 2]))
    ts = tuple(cfg.get("t", [2]))
    if 2 not in ps:
        ps = ps + (2,)
    mf = mf_run(model, data, cfg.grid)
    rows, scaled, zJ, d0 = [], [], [], []
    diags = []
    J = data.J
    for N in Ns:
        run = coupled_run(model, data, N, cfg.seed, R, mf=mf, ps=ps, ts=ts, threads=cfg.threads)
        dg = run.diagnostics
        diags.append(dg.to_dict())
        for j in range(J + 1):
            for k, p in enumerate(ps):
                rows.append([N, j, "D", p, float(dg.D[j, k])])
            rows.append([N, j, "Z", "", float(dg.Z[j])])
            for k, t in enumerate(ts):
                rows.append([N, j, "S", t, float(dg.S[j, k])])
        scaled.append(math.sqrt(N) * dg.d(J, 2))
        zJ.append(float(dg.Z[J]))
        d0.append(float(np.max(dg.D[0])))
    ratio = max(scaled) / min(scaled) if min(scaled) > 0 else math.inf
    checks = [Check("D0_zero", max(d0), 0.0, max(d0) == 0.0),
              Check("sqrtN_D_ratio", ratio, tol["sqrtN_ratio"], ratio <= tol["sqrtN_ratio"])]
    results = {"N": Ns, "sqrtN_D": scaled, "Z_final": zJ, "diagnostics": diags}
    if len(Ns) >= 3:
        fit = fit_rate(Ns, zJ)
        lo, hi = tol["z_slope"] - tol["z_slope_tol"], tol["z_slope"] + tol["z_slope_tol"]
        checks.append(Check("Z_slope", fit.slope, [lo, hi], lo <= fit.slope <= hi))
        results["Z_fit"] = fit.to_dict()
    header = ["N", "step", "diagnostic", "index", "value"]
    return ExperimentReport(cfg.kind, header, rows, results, checks, cfg.raw)


def _run_suites(cfg: ExperimentConfig) -> ExperimentReport:
    names = cfg.get("suites", list(SUITES))
    n = int(cfg.get("instances", 100))
    res = run_suites(names, n, cfg.seed, cfg.threads)
    rows = [[r.name, r.instances, r.comparisons, r.violations, r.worst] for r in res]
    checks = [Check(f"violations[{r.name}]", r.violations, cfg.tolerances["max_violations"],
                    r.violations <= cfg.tolerances["max_violations"]) for r in res]
    results = {"suites": [r.to_dict() for r in res]}
    header = ["suite", "instances", "comparisons", "violations", "worst"]
    return ExperimentReport(cfg.kind, header, rows, results, checks, cfg.raw)


def _run_dg_convergence(cfg: ExperimentConfig) -> ExperimentReport:
    ns = sorted(cfg.get("n"))
    pair = cfg.get("pair", [[[0.0], [[1.0]]], [[1.0], [[1.0]]]])
    box = cfg.get("box", [-12.0, 12.0])
    g1, g2 = (GaussianMeasure(np.asarray(m, float), np.asarray(c, float)) for m, c in pair)
    d = g1.dim
    vals = []
    for n in ns:
        axes = axes_box(box[0], box[1], n, d)
        vals.append(weighted_tv(render(g1, axes), render(g2, axes)))
    errs = [abs(v - vals[-1]) for v in vals[:-1]]
    ratios = [errs[k + 1] / errs[k] for k in range(len(errs) - 1) if errs[k] > 0]
    rows = [[n, v, (abs(v - vals[-1]) if k < len(ns) - 1 else "")] for k, (n, v) in enumerate(zip(ns, vals))]
    worst = max(ratios) if ratios else math.inf
    checks = [Check("successive_error_ratio", worst, cfg.tolerances["ratio"], worst <= cfg.tolerances["ratio"])]
    results = {"n": ns, "dg": vals, "errors_vs_finest": errs, "ratios": ratios}
    return ExperimentReport(cfg.kind, ["n", "dg", "err_vs_finest"], rows, results, checks, cfg.raw)


_RECIPES = {
    "exactness": _run_exactness,
    "mc-rate": _run_mc_rate,
    "eps-scaling": _run_eps_scaling,
    "chaos": _run_chaos,
    "lipschitz-suite": _run_suites,
    "dg-convergence": _run_dg_convergence,
}


def run_experiment(config, out_dir=None, threads=None, seed=None) -> ExperimentReport:
    """Run the recipe named by ``config`` and write its outputs.

    ``config`` is an :class:`ExperimentConfig`, a mapping, or a path to a
    JSON file. Outputs go to ``out_dir`` (else the config's ``out``, else
    ``enkf-lab-out``).
    """
    if isinstance(config, (str, os.PathLike)):
        config = load_config(config, seed=seed, threads=threads, out=out_dir)
    elif isinstance(config, dict):
        config = parse_config(config, seed=seed, threads=threads, out=out_dir)
    else:
        if threads is not None:
            config.threads = int(threads)
        if out_dir is not None:
            config.out = out_dir
    started = _dt.datetime.now(_dt.timezone.utc)
    t0 = time.perf_counter()
    report = _RECIPES[config.kind](config)
    elapsed = time.perf_counter() - t0
    out = Path(config.out or "enkf-lab-out")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        fh.write(report.csv_text())
    (out / "summary.json").write_text(summary_json(report))
    meta = {"started_utc": started.isoformat(), "elapsed_seconds": elapsed, "threads": config.threads,
            "python": platform.python_version(), "platform": platform.platform(), "numpy": np.__version__}
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return report


def validate_config(path) -> tuple:
    """Parse a configuration and check the model's standing assumptions.

    Returns ``(config, assumption_report or None)``.
    """
    cfg = load_config(path)
    report = None
    if cfg.model is not None:
        probe = np.linspace(-20.0, 20.0, 401)[:, None] * np.ones((1, cfg.model.dim_u))
        data = cfg.data() if cfg.data_spec is not None else None
        report = validate_assumptions(cfg.model, probe, data)
    return cfg, report


__all__ = ["DEFAULT_TOLERANCES", "ExperimentConfig", "ExperimentReport", "KINDS", "fit_rate", "load_config",
           "parse_config", "reference_measure", "run_experiment", "validate_config"]
