"""Run configuration, validation and result emission.

A run config is a JSON object selecting exactly one study::

    {"study": "design", "seed": 1, "design": {"c": 0.1}}

Unknown keys are rejected and every range violation is reported at once.
Outputs are CSV files with fixed column orders (listed in ``schema.json``)
plus ``summary.json`` carrying the config hash and library version.  Floats
are written with ``repr`` so reruns are byte-identical.
"""

import csv
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .design import DesignConfig
from .errors import ConfigError
from .portfolio import PortfolioConfig

STUDIES = ("design", "portfolio", "et-solve")
_TOP_KEYS = {"study", "seed", "out", "mc_samples", "tol", "max_iter", "threads", "design",
             "portfolio", "et_solve"}


@dataclass(frozen=True)
class EtSolveConfig:
    """Standalone tilt problem: normal/T models, weights, target and optional constraints.

    ``score`` is ``"identity"`` (``s(y) = y``) or ``"moments"``
    (``s(y) = (y, -y^2 / 2)`` for scalar ``y``).
    """

    models: tuple = ()
    weights: tuple = None
    target: tuple = ()
    target_mode: str = "absolute"
    score: str = "identity"
    a_ub: tuple = None
    b_ub: tuple = None
    n_samples: int = 10_000
    tol: float = 1e-8
    max_iter: int = 100

    def problems(self):
        out = []
        if not self.models:
            out.append("et_solve.models: at least one model is required")
        for i, m in enumerate(self.models):
            if not isinstance(m, dict) or m.get("family") not in ("normal", "t"):
                out.append(f"et_solve.models[{i}]: need family 'normal' or 't'")
        if self.weights is not None and len(self.weights) != len(self.models):
            out.append("et_solve.weights: one weight per model is required")
        if not self.target:
            out.append("et_solve.target: a target vector is required")
        if self.target_mode not in ("absolute", "multiplier"):
            out.append("et_solve.target_mode: must be 'absolute' or 'multiplier'")
        if self.score not in ("identity", "moments"):
            out.append("et_solve.score: must be 'identity' or 'moments'")
        if (self.a_ub is None) != (self.b_ub is None):
            out.append("et_solve.a_ub/b_ub: give both or neither")
        if self.n_samples < 10:
            out.append(f"et_solve.n_samples: must be >= 10, got {self.n_samples!r}")
        if not self.tol > 0 or self.max_iter < 1:
            out.append("et_solve.tol/max_iter: must be positive")
        return out


_BLOCKS = {"design": ("design", DesignConfig), "portfolio": ("portfolio", PortfolioConfig),
           "et-solve": ("et_solve", EtSolveConfig)}


@dataclass(frozen=True)
class RunConfig:
    study: str
    seed: int
    out: str = None
    threads: int = 1
    design: DesignConfig = None
    portfolio: PortfolioConfig = None
    et_solve: EtSolveConfig = None
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def block(self):
        return getattr(self, _BLOCKS[self.study][0])

    def to_dict(self):
        key = _BLOCKS[self.study][0]
        d = {"study": self.study, "seed": self.seed, "threads": self.threads, key: _plain(self.block)}
        if self.out is not None:
            d["out"] = self.out
        return d


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _build_block(cls, raw, prefix, problems):
    if not isinstance(raw, dict):
        problems.append(f"{prefix}: must be an object")
        return None
    names = {f.name for f in dataclasses.fields(cls)}
    for k in sorted(set(raw) - names):
        problems.append(f"{prefix}.{k}: unknown key")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items() if k in names}
    try:
        obj = cls.__new__(cls)
        for f in dataclasses.fields(cls):
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            object.__setattr__(obj, f.name, kwargs.get(f.name, default))
        local = obj.problems()
    except TypeError as exc:
        problems.append(f"{prefix}: {exc}")
        return None
    problems.extend(p if p.startswith(prefix) else f"{prefix}.{p}" for p in local)
    if local:
        return None
    return cls(**kwargs)


def config_from_dict(raw):
    """Validate a raw config mapping; raises :class:`ConfigError` listing every problem."""
    problems = []
    if not isinstance(raw, dict):
        raise ConfigError(["config: top level must be a JSON object"])
    for k in sorted(set(raw) - _TOP_KEYS):
        problems.append(f"{k}: unknown key")
    study = raw.get("study")
    if study not in STUDIES:
        problems.append(f"study: must be one of {list(STUDIES)}, got {study!r}")
    seed = raw.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        problems.append(f"seed: a non-negative integer is required, got {seed!r}")
    threads = raw.get("threads", 1)
    if not isinstance(threads, int) or threads < 1:
        problems.append(f"threads: must be a positive integer, got {threads!r}")
    mc = raw.get("mc_samples")
    if mc is not None and (not isinstance(mc, int) or mc < 10):
        problems.append(f"mc_samples: must be an integer >= 10, got {mc!r}")
    for name in ("tol",):
        v = raw.get(name)
        if v is not None and not (isinstance(v, (int, float)) and v > 0):
            problems.append(f"{name}: must be positive, got {v!r}")
    mi = raw.get("max_iter")
    if mi is not None and (not isinstance(mi, int) or mi < 1):
        problems.append(f"max_iter: must be a positive integer, got {mi!r}")
    for other, (key, _) in _BLOCKS.items():
        if study in STUDIES and other != study and key in raw:
            problems.append(f"{key}: block given but study is {study!r}")
    block = None
    if study in STUDIES:
        key, cls = _BLOCKS[study]
        braw = dict(raw.get(key, {})) if isinstance(raw.get(key, {}), dict) else raw.get(key)
        if isinstance(braw, dict) and isinstance(seed, int) and "seed" in {
                f.name for f in dataclasses.fields(cls)}:
            braw["seed"] = seed
        if isinstance(braw, dict):
            if mc is not None and study == "portfolio":
                braw["n_samples"] = mc
            if mc is not None and study == "et-solve":
                braw["n_samples"] = mc
            if study in ("portfolio", "et-solve"):
                if raw.get("tol") is not None:
                    braw["tol"] = float(raw["tol"])
                if mi is not None:
                    braw["max_iter"] = mi
        block = _build_block(cls, braw, key, problems)
    if problems:
        raise ConfigError(problems)
    key = _BLOCKS[study][0]
    return RunConfig(study, seed, raw.get("out"), threads, **{key: block})


def load_config(path, overrides=None):
    """Read and validate a JSON run config, applying ``overrides`` (a partial mapping) first."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})"]) from None
    return config_from_dict(merge(raw, overrides or {}))


def merge(base, over):
    """Recursive dict merge; values in ``over`` win."""
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def canonical_json(obj):
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(cfg):
    """Short SHA-256 of the canonical materialised config."""
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else cfg
    d = {k: v for k, v in d.items() if k != "out"}
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:16]


def echo_config(cfg, directory):
    """Write the fully materialised config to ``config_echo.json``."""
    path = os.path.join(directory, "config_echo.json")
    write_json(path, cfg.to_dict())
    return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    try:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            for row in rows:
                wr.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror}") from exc


def write_json(path, obj):
    try:
        with open(path, "w") as fh:
            json.dump(_plain(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror}") from exc


def _prepare(directory):
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{directory}: {exc.strerror}") from exc


def design_schema(n_models=4):
    return {
        "report.csv": ["method", "x", "y_hat", "loss", "excess_pct"],
        "curves.csv": ["x", "tau", *[f"pi_tilde_{j}" for j in range(n_models)], "utility"],
    }


def portfolio_schema(assets, methods, n_models):
    schema = {}
    for meth in methods:
        schema[f"ledger_{meth}.csv"] = ["day", "date", "return", "value"]
        schema[f"weights_{meth}.csv"] = ["day", "date", *[f"x_{a}" for a in assets]]
    schema["model_probs_BPDS.csv"] = ["day", "date", *[f"pi_{j}" for j in range(n_models + 1)],
                                      *[f"pi_tilde_{j}" for j in range(n_models + 1)]]
    for meth in ("BMA", "AVS"):
        schema[f"model_probs_{meth}.csv"] = ["day", "date",
                                             *[f"pi_{j}" for j in range(1, n_models + 1)]]
    schema["tau.csv"] = ["day", "date", "tau_1", "tau_2", "d", "m_star", "target_1", "target_2",
                         "converged", "fallback", "bma_target", "avs_target"]
    return schema


def _summary(cfg, extra):
    return {"version": __version__, "config_hash": config_hash(cfg), "study": cfg.study,
            "seed": cfg.seed, **extra}


def emit_design(report, cfg, directory):
    """Write ``report.csv``, ``curves.csv``, schema, config echo and summary."""
    _prepare(directory)
    schema = design_schema(report.curves["pi_tilde"].shape[1])
    write_csv(os.path.join(directory, "report.csv"), schema["report.csv"],
              [[r[c] for c in schema["report.csv"]] for r in report.rows])
    cur = report.curves
    rows = [[cur["x"][i], cur["tau"][i], *cur["pi_tilde"][i], cur["utility"][i]]
            for i in range(cur["x"].size)]
    write_csv(os.path.join(directory, "curves.csv"), schema["curves.csv"], rows)
    write_json(os.path.join(directory, "schema.json"), schema)
    echo_config(cfg, directory)
    write_json(os.path.join(directory, "summary.json"), _summary(cfg, report.summary()))
    return sorted(os.listdir(directory))


def emit_portfolio(result, cfg, directory):
    """Write per-method ledgers, weights, model probabilities, tau path and Sharpe ratios."""
    _prepare(directory)
    methods = list(result.ledgers)
    J = len(result.config.model_grid)
    schema = portfolio_schema(result.assets, methods, J)
    first = result.ledgers["BPDS"]
    days = first.days
    dates = first.dates or [""] * days.size

    def base(i):
        return [days[i], dates[i].isoformat() if hasattr(dates[i], "isoformat") else dates[i]]

    for meth, led in result.ledgers.items():
        write_csv(os.path.join(directory, f"ledger_{meth}.csv"), schema[f"ledger_{meth}.csv"],
                  [base(i) + [led.returns[i], led.value[i]] for i in range(days.size)])
        write_csv(os.path.join(directory, f"weights_{meth}.csv"), schema[f"weights_{meth}.csv"],
                  [base(i) + list(led.x[i]) for i in range(days.size)])
    bp = result.ledgers["BPDS"]
    write_csv(os.path.join(directory, "model_probs_BPDS.csv"), schema["model_probs_BPDS.csv"],
              [base(i) + list(bp.pi[i]) + list(bp.pi_tilde[i]) for i in range(days.size)])
    for meth in ("BMA", "AVS"):
        led = result.ledgers[meth]
        write_csv(os.path.join(directory, f"model_probs_{meth}.csv"),
                  schema[f"model_probs_{meth}.csv"],
                  [base(i) + list(led.pi[i]) for i in range(days.size)])
    d = result.d
    write_csv(os.path.join(directory, "tau.csv"), schema["tau.csv"],
              [base(i) + [result.tau[i, 0], result.tau[i, 1], d[i], result.m_star[i],
                          result.target[i, 0], result.target[i, 1], result.converged[i],
                          result.fallback[i], result.bma_target[i], result.avs_target[i]]
               for i in range(days.size)])
    write_json(os.path.join(directory, "sharpe.json"), result.sharpe)
    write_json(os.path.join(directory, "schema.json"), schema)
    echo_config(cfg, directory)
    nd = result.next_decision
    extra = {"assets": result.assets, "test_days": int(days.size),
             "final_value": {k: float(v.value[-1]) for k, v in result.ledgers.items()},
             "fallback_days": int(result.fallback.sum()),
             "converged_days": int(result.converged.sum()),
             "jitter_count": int(result.jitter_count),
             "next_decision": None if nd is None else {"day": nd.day, "x": nd.x.tolist(),
                                                       "tau": nd.tau.tolist()}}
    write_json(os.path.join(directory, "summary.json"), _summary(cfg, extra))
    return sorted(os.listdir(directory))


def emit_tilt(solution, cfg, directory):
    """Write ``tilt_solution.json`` plus config echo and summary."""
    _prepare(directory)
    write_json(os.path.join(directory, "tilt_solution.json"), solution.to_dict())
    echo_config(cfg, directory)
    write_json(os.path.join(directory, "summary.json"),
               _summary(cfg, {"converged": bool(solution.converged)}))
    return sorted(os.listdir(directory))
