"""Command line runner: configuration, orchestration, persistence and plots.

A run is fully determined by one INI file.  Sections and keys (all optional,
defaults are written into the manifest so nothing stays implicit):

    [potential]   kind = A1 | A2 | constant;  gamma;  xi = 1, 1.4142135623730951;  value (constant kind)
    [quadrature]  abs_tol, rel_tol, max_subdivisions, polar_refinement_radius
    [model]       mu_max, size
    [grids]       T, t, eps, p_offsets, inclusion_eps -- "geometric START STOP COUNT" or a comma list
    [initial]     kind = cone | affine | smooth-bump with its parameters
    [experiment]  points, time, eps, p, observable, mode, r_points, negative_points, linger_points
    [assert]      thresholds checked with --assert (min_exponent, max_exponent, min_r2, max_error)
    [output]      cache = yes | no

Exit status: 0 success, 2 configuration error, 3 numerical failure,
4 threshold miss under --assert.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics, effective, ergodic, fitting, homog
from .errors import ConfigError, QPHJError, ResonantFrequencyError
from .quad import QuadratureSpec, sobolev_norm
from .torus import A1, A2, Frequency, Potential, Suspension, check_nonresonant, estimate_diophantine

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_ASSERT = 4

KINDS = ("effective", "corrector", "birkhoff", "unbounded-mean", "inclusion", "characteristics",
         "homogenize", "sweep")
COMMANDS = KINDS + ("validate",)

DEFAULTS = {
    "potential": {"kind": "A1", "gamma": "6", "xi": "1, 1.4142135623730951", "value": "0"},
    "quadrature": {"abs_tol": "1e-12", "rel_tol": "1e-10", "max_subdivisions": "400000",
                   "polar_refinement_radius": "0.15"},
    "model": {"mu_max": "64", "size": "60"},
    "grids": {"T": "geometric 1e2 3.1622776601683795e5 8", "t": "geometric 1e2 1e5 8",
              "eps": "geometric 0.125 0.001953125 7", "p_offsets": "geometric 1e-3 5 50",
              "inclusion_eps": "geometric 0.2 0.0125 5"},
    "initial": {"kind": "cone", "depth": "1", "radius": "1", "slope": "0", "offset": "0",
                "height": "1", "width": "0.5"},
    "experiment": {"points": "-1, -0.5, 0, 0.5, 1", "time": "1", "eps": "0.25", "p": "p0, p0+1",
                   "observable": "sqrt", "mode": "1, 0", "r_points": "200", "negative_points": "100",
                   "linger_points": "32"},
    "assert": {},
    "output": {"cache": "yes"},
}

# thresholds used by --assert when the config names none
DEFAULT_THRESHOLDS = {
    "effective": {"max_error": 1e-6},
    "sweep": {"min_exponent": 0.20},
}


# --------------------------------------------------------------------------
# configuration


def parse_grid(text: str, name: str) -> tuple[float, ...]:
    """'geometric a b n' or an explicit comma list; at least four points, geometric spacing."""
    words = text.split()
    try:
        if words and words[0] == "geometric":
            if len(words) != 4:
                raise ValueError
            a, b, n = float(words[1]), float(words[2]), int(words[3])
            values = tuple(float(v) for v in np.geomspace(a, b, n))
        else:
            values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"grid {name!r}: cannot parse {text!r}") from None
    arr = np.asarray(values)
    if len(arr) < 4:
        raise ConfigError(f"grid {name!r} needs at least four points")
    if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
        raise ConfigError(f"grid {name!r} must be positive")
    ratios = arr[1:] / arr[:-1]
    if not np.allclose(ratios, ratios[0], rtol=1e-6) or ratios[0] == 1.0:
        raise ConfigError(f"grid {name!r} must be geometric")
    return values


def _floats(text: str, name: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{name}: expected a comma list of numbers, got {text!r}") from None


@dataclass
class ExperimentConfig:
    kind: str
    sections: dict
    out_dir: Path
    potential: Potential = field(init=False)
    spec: QuadratureSpec = field(init=False)

    def __post_init__(self):
        if self.kind not in COMMANDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        self.potential = self._potential()
        self.spec = self._spec()

    @classmethod
    def load(cls, kind: str, path: str | None, out_dir: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        if path is not None:
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            except configparser.Error as exc:
                raise ConfigError(f"malformed config {path}: {exc}") from None
        sections = {name: dict(values) for name, values in DEFAULTS.items()}
        for name in parser.sections():
            if name not in DEFAULTS:
                raise ConfigError(f"unknown config section [{name}]")
            sections[name].update(parser[name])
        declared = sections["experiment"].pop("kind", kind)
        if declared != kind:
            raise ConfigError(f"config declares experiment {declared!r} but {kind!r} was requested")
        return cls(kind, sections, Path(out_dir))

    def get(self, section: str, key: str) -> str:
        return self.sections[section][key]

    def number(self, section: str, key: str) -> float:
        try:
            return float(self.get(section, key))
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number") from None

    def grid(self, name: str) -> tuple[float, ...]:
        return parse_grid(self.get("grids", name), name)

    def _potential(self) -> Potential:
        sec = self.sections["potential"]
        xi = _floats(sec["xi"], "xi")
        try:
            check_nonresonant(xi)
            freq = Frequency(xi)
        except ResonantFrequencyError as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        kind = sec["kind"]
        if kind in ("A1", "A2"):
            gamma = self.number("potential", "gamma")
            if len(xi) != 2:
                raise ConfigError("prototype potentials live on T^2: xi needs two components")
            if not gamma > 0:
                raise ConfigError("gamma must be positive")
            U = Suspension.prototype_a1(gamma) if kind == "A1" else Suspension.prototype_a2(gamma)
        elif kind == "constant":
            U = Suspension.constant(self.number("potential", "value"), len(xi))
        else:
            raise ConfigError(f"unknown potential kind {kind!r}")
        return Potential(U, freq)

    def _spec(self) -> QuadratureSpec:
        sec = self.sections["quadrature"]
        try:
            return QuadratureSpec(float(sec["abs_tol"]), float(sec["rel_tol"]), int(sec["max_subdivisions"]),
                                  float(sec["polar_refinement_radius"]))
        except ValueError as exc:
            raise ConfigError(f"[quadrature] {exc}") from None

    @property
    def gamma(self) -> float | None:
        return self.potential.suspension.gamma

    def initial_data(self) -> homog.InitialData:
        sec = self.sections["initial"]
        kind = sec["kind"]
        try:
            if kind == homog.CONE:
                return homog.InitialData.cone(float(sec["depth"]), float(sec["radius"]))
            if kind == homog.AFFINE:
                return homog.InitialData.affine(float(sec["slope"]), float(sec["offset"]))
            if kind == homog.BUMP:
                return homog.InitialData.bump(float(sec["height"]), float(sec["width"]))
        except ValueError as exc:
            raise ConfigError(f"[initial] {exc}") from None
        raise ConfigError(f"unknown initial data kind {kind!r}")

    def thresholds(self) -> dict:
        out = dict(DEFAULT_THRESHOLDS.get(self.kind, {}))
        for k, v in self.sections["assert"].items():
            try:
                out[k] = float(v)
            except ValueError:
                raise ConfigError(f"[assert] {k} must be a number") from None
        return out

    def manifest_config(self) -> dict:
        return {"experiment": self.kind, **{k: dict(v) for k, v in self.sections.items()}}


# --------------------------------------------------------------------------
# outputs


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _fit_dict(fit: fitting.RateFit | None) -> dict | None:
    if fit is None:
        return None
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in asdict(fit).items()}


def svg_loglog(path: Path, series: dict, title: str, xlabel: str, ylabel: str) -> None:
    """Self-contained log-log line plot of {label: (x, y)}."""
    W, H, m = 640, 440, 60
    pts = [(np.asarray(x, float), np.abs(np.asarray(y, float))) for x, y in series.values()]
    good = [(x[(x > 0) & (y > 0)], y[(x > 0) & (y > 0)]) for x, y in pts]
    xs = np.concatenate([g[0] for g in good]) if good else np.array([1.0])
    ys = np.concatenate([g[1] for g in good]) if good else np.array([1.0])
    if len(xs) == 0:
        xs, ys = np.array([1.0, 10.0]), np.array([1.0, 10.0])
    lx0, lx1 = math.log10(xs.min()), math.log10(xs.max())
    ly0, ly1 = math.log10(ys.min()), math.log10(ys.max())
    lx1 = lx1 if lx1 > lx0 else lx0 + 1
    ly1 = ly1 if ly1 > ly0 else ly0 + 1
    X = lambda v: m + (math.log10(v) - lx0) / (lx1 - lx0) * (W - 2 * m)
    Y = lambda v: H - m - (math.log10(v) - ly0) / (ly1 - ly0) * (H - 2 * m)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<rect x="{m}" y="{m}" width="{W - 2 * m}" height="{H - 2 * m}" fill="none" stroke="black"/>',
           f'<text x="{W / 2}" y="{m / 2}" text-anchor="middle" font-size="15">{_esc(title)}</text>',
           f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle" font-size="13">{_esc(xlabel)}</text>',
           f'<text x="18" y="{H / 2}" text-anchor="middle" font-size="13" '
           f'transform="rotate(-90 18 {H / 2})">{_esc(ylabel)}</text>']
    for d in range(math.floor(lx0), math.ceil(lx1) + 1):
        if lx0 <= d <= lx1:
            out.append(f'<text x="{X(10.0 ** d):.1f}" y="{H - m + 16}" text-anchor="middle" '
                       f'font-size="11">1e{d}</text>')
    for d in range(math.floor(ly0), math.ceil(ly1) + 1):
        if ly0 <= d <= ly1:
            out.append(f'<text x="{m - 6}" y="{Y(10.0 ** d) + 4:.1f}" text-anchor="end" '
                       f'font-size="11">1e{d}</text>')
    for i, (label, (x, y)) in enumerate(zip(series, good)):
        c = colors[i % len(colors)]
        if len(x):
            path_pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in zip(x, y))
            out.append(f'<polyline points="{path_pts}" fill="none" stroke="{c}" stroke-width="1.5"/>')
            out += [f'<circle cx="{X(a):.2f}" cy="{Y(b):.2f}" r="3" fill="{c}"/>' for a, b in zip(x, y)]
        out.append(f'<text x="{W - m - 4}" y="{m + 16 + 16 * i}" text-anchor="end" font-size="12" '
                   f'fill="{c}">{_esc(label)}</text>')
    out.append("</svg>")
    path.write_text("\n".join(out) + "\n")


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


@dataclass
class RunResult:
    csv_path: Path
    summary: dict
    checks: list = field(default_factory=list)  # (name, value, threshold, passed)
    series: dict = field(default_factory=dict)
    labels: tuple = ("", "", "")

    @property
    def passed(self) -> bool:
        return all(c[3] for c in self.checks)


# --------------------------------------------------------------------------
# effective model cache


def cached_model(cfg: ExperimentConfig) -> effective.EffectiveModel:
    mu_max = cfg.number("model", "mu_max")
    size = int(cfg.number("model", "size"))
    P, spec = cfg.potential, cfg.spec
    if cfg.get("output", "cache").lower() not in ("yes", "true", "1", "on"):
        return effective.build_model(P, mu_max, spec, size)
    key = effective.model_key(P, spec, mu_max, size)
    cache_dir = cfg.out_dir / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"model-{key}.csv"
    if path.exists():
        try:
            return effective.load_model(path, P, spec)
        except (ValueError, KeyError, OSError):
            pass
    M = effective.build_model(P, mu_max, spec, size)
    effective.save_model(M, path)
    return M


def _p_values(cfg: ExperimentConfig, M: effective.EffectiveModel) -> list[float]:
    out = []
    for item in cfg.get("experiment", "p").split(","):
        item = item.strip().replace(" ", "")
        try:
            if item.startswith("p0"):
                out.append(M.p0 + (float(item[2:]) if item[2:] else 0.0))
            else:
                out.append(float(item))
        except ValueError:
            raise ConfigError(f"[experiment] p: cannot parse {item!r}") from None
    return out


# --------------------------------------------------------------------------
# experiments


def _check(result: RunResult, thresholds: dict, value: float, kind: str, name: str) -> None:
    lo = thresholds.get(f"min_{kind}")
    hi = thresholds.get(f"max_{kind}")
    if lo is not None:
        result.checks.append((f"{name} >= min_{kind}", value, lo, bool(value >= lo)))
    if hi is not None:
        result.checks.append((f"{name} <= max_{kind}", value, hi, bool(value <= hi)))


def _fit_checks(result: RunResult, thresholds: dict, fit: fitting.RateFit, name: str) -> None:
    _check(result, thresholds, fit.exponent, "exponent", f"{name} exponent")
    _check(result, thresholds, fit.r_squared, "r2", f"{name} r2")


def run_effective(cfg: ExperimentConfig) -> RunResult:
    M = cached_model(cfg)
    p = M.p0 + np.asarray(cfg.grid("p_offsets"))
    H = effective.effective_H(M, p)
    dH = np.array([effective.effective_H_prime(M, v) for v in p])
    inv = np.abs(np.array([effective.phi(M, h) for h in H]) - p) / p
    path = cfg.out_dir / "effective.csv"
    write_csv(path, ["p", "Hbar", "Hbar_prime", "inversion_error"], zip(p, H, dH, inv))
    res = RunResult(path, {"p0": M.p0, "prime_at_p0": M.prime_at_p0, "max_inversion_error": float(inv.max()),
                           "model_key": M.key()})
    _check(res, cfg.thresholds(), float(inv.max()), "error", "max inversion error")
    res.series = {"Hbar(p)": (p - M.p0, H)}
    res.labels = ("effective Hamiltonian", "p - p0", "Hbar")
    return res


def run_corrector(cfg: ExperimentConfig) -> RunResult:
    M = cached_model(cfg)
    t = np.asarray(cfg.grid("t"))
    rows, summary, series = [], {}, {}
    res = RunResult(cfg.out_dir / "corrector.csv", summary)
    for p in _p_values(cfg, M):
        env = effective.corrector_envelope(M, p, t)
        fit = fitting.fit_power_law(t, env / t, decay=True, floor=1e-12)
        growth = fitting.fit_power_law(t, env, decay=False, floor=0.0)
        rows += [(p, T, e, e / T) for T, e in zip(t, env)]
        summary[f"p={p!r}"] = {"decay_of_v_over_t": _fit_dict(fit), "growth_of_sup_v": _fit_dict(growth)}
        series[f"p={p:.4g}"] = (t, env / t)
        _fit_checks(res, cfg.thresholds(), fit, f"p={p:.6g}")
    write_csv(res.csv_path, ["p", "t", "sup_abs_v", "sup_abs_v_over_t"], rows)
    res.series, res.labels = series, ("corrector growth", "t", "sup |v_p| / t")
    return res


def _mode_observable(cfg: ExperimentConfig):
    k = np.asarray(_floats(cfg.get("experiment", "mode"), "mode"))
    if len(k) != cfg.potential.frequency.n or np.any(k != np.round(k)) or not np.any(k):
        raise ConfigError("[experiment] mode must be a nonzero integer vector matching xi")
    return (lambda y: np.cos(2.0 * np.pi * (y @ k))), 0.0


def run_birkhoff(cfg: ExperimentConfig) -> RunResult:
    T = np.asarray(cfg.grid("T"))
    obs = cfg.get("experiment", "observable")
    xi = cfg.potential.frequency.vector
    if obs == "sqrt":
        F, mean = ergodic.sqrt_observable(cfg.potential.suspension)
    elif obs == "mode":
        F, mean = _mode_observable(cfg)
    else:
        raise ConfigError(f"[experiment] observable must be 'sqrt' or 'mode', got {obs!r}")
    rep = ergodic.birkhoff_rate_experiment(F, xi, T, mean, cfg.spec, tag=obs)
    return _ergodic_result(cfg, rep, "birkhoff.csv", "Birkhoff average error")


def run_unbounded(cfg: ExperimentConfig) -> RunResult:
    if cfg.potential.suspension.kind not in (A1, A2):
        raise ConfigError("unbounded-mean needs a prototype potential")
    rep = ergodic.unbounded_mean_experiment(cfg.potential, np.asarray(cfg.grid("T")), cfg.spec)
    return _ergodic_result(cfg, rep, "unbounded-mean.csv", "averages of U^-1/2")


def _ergodic_result(cfg, rep: ergodic.ErgodicReport, name: str, title: str) -> RunResult:
    path = cfg.out_dir / name
    write_csv(path, ["T", "value", "error"], rep.rows())
    summary = {"observable": rep.observable, "mean": rep.mean_value if math.isfinite(rep.mean_value) else None,
               "divergent": rep.divergent, "fit": _fit_dict(rep.fit), "target": rep.target}
    res = RunResult(path, summary)
    _fit_checks(res, cfg.thresholds(), rep.fit, "fit")
    res.series, res.labels = {"error": (rep.T_grid, rep.errors)}, (title, "T", "error")
    return res


def run_inclusion(cfg: ExperimentConfig) -> RunResult:
    eps = np.asarray(cfg.grid("inclusion_eps"))
    if np.any(np.diff(eps) >= 0):
        eps = eps[::-1]
    xi = cfg.potential.frequency.vector
    f = lambda y: np.sum(np.sin(2.0 * np.pi * y), axis=-1)
    lengths = ergodic.inclusion_lengths(f, eps, xi)
    fit = fitting.fit_power_law(1.0 / eps, lengths, decay=False, floor=0.0)
    path = cfg.out_dir / "inclusion.csv"
    write_csv(path, ["eps", "inclusion_length"], zip(eps, lengths))
    res = RunResult(path, {"fit": _fit_dict(fit), "observable": "sum_i sin(2 pi xi_i x)"})
    _fit_checks(res, cfg.thresholds(), fit, "slope")
    res.series, res.labels = {"l_eps": (1.0 / eps, lengths)}, ("inclusion length", "1/eps", "l_eps")
    return res


def run_characteristics(cfg: ExperimentConfig) -> RunResult:
    M = cached_model(cfg)
    t = np.asarray(cfg.grid("t"))
    rows, summary, series = [], {}, {}
    res = RunResult(cfg.out_dir / "characteristics.csv", summary)
    for p in _p_values(cfg, M):
        env = dynamics.velocity_errors(M, p, t, cfg.spec)
        fit = fitting.fit_power_law(t, env, decay=True, floor=1e-10)
        logfit = fitting.fit_reciprocal_log(t, env)
        rows += [(p, T, e) for T, e in zip(t, env)]
        summary[f"p={p!r}"] = {"power_law": _fit_dict(fit), "reciprocal_log": _fit_dict(logfit)}
        series[f"p={p:.4g}"] = (t, env)
        _fit_checks(res, cfg.thresholds(), fit, f"p={p:.6g}")
    write_csv(res.csv_path, ["p", "t", "velocity_error"], rows)
    res.series, res.labels = series, ("characteristic velocity error", "t", "sup |eta/t - Hbar'|")
    return res


def run_homogenize(cfg: ExperimentConfig) -> RunResult:
    M = cached_model(cfg)
    u0 = cfg.initial_data()
    eps = cfg.number("experiment", "eps")
    t = cfg.number("experiment", "time")
    ex = cfg.sections["experiment"]
    rows, worst = [], 0.0
    for x in _floats(ex["points"], "points"):
        r = homog.u_eps(cfg.potential, u0, x, t, eps, cfg.spec, int(ex["r_points"]), int(ex["negative_points"]),
                        int(ex["linger_points"]))
        uh = homog.u_hom(M, u0, x, t)
        worst = max(worst, abs(r.u_eps - uh))
        rows.append((x, r.u_eps, uh, abs(r.u_eps - uh), r.argmin_energy, r.branch))
    path = cfg.out_dir / "homogenize.csv"
    write_csv(path, ["x", "u_eps", "u_hom", "error", "energy", "branch"], rows)
    res = RunResult(path, {"eps": eps, "t": t, "max_error": worst})
    _check(res, cfg.thresholds(), worst, "error", "max error")
    return res


def run_sweep(cfg: ExperimentConfig) -> RunResult:
    M = cached_model(cfg)
    ex = cfg.sections["experiment"]
    eps = cfg.grid("eps")
    sc = homog.SweepConfig(cfg.potential, cfg.gamma, cfg.initial_data(), tuple(sorted(eps, reverse=True)),
                           _floats(ex["points"], "points"), cfg.number("experiment", "time"),
                           int(ex["r_points"]), int(ex["negative_points"]), cfg.spec)
    rep = homog.rate_sweep(sc, M)
    path = cfg.out_dir / "sweep.csv"
    write_csv(path, ["eps", "point", "u_eps", "u_hom", "error"], [row[:5] for row in rep.rows])
    summary = {"errors": [float(e) for e in rep.errors], "fit": _fit_dict(rep.fit),
               "reciprocal_log_fit": _fit_dict(rep.log_fit), "predicted": rep.predicted}
    res = RunResult(path, summary)
    _fit_checks(res, cfg.thresholds(), rep.fit, "error decay")
    res.series = {"e(eps)": (np.asarray(sc.epsilons), rep.errors)}
    res.labels = ("homogenization error", "eps", "max |u_eps - u|")
    return res


RUNNERS = {"effective": run_effective, "corrector": run_corrector, "birkhoff": run_birkhoff,
           "unbounded-mean": run_unbounded, "inclusion": run_inclusion,
           "characteristics": run_characteristics, "homogenize": run_homogenize, "sweep": run_sweep}


# --------------------------------------------------------------------------
# validate


def sqrt_sobolev_index(U: Suspension, s: float, tol: float = 1e-3) -> bool:
    """Empirical test of sqrt(U) in H^s: the truncated norm must settle as the mode cutoff doubles."""
    a = sobolev_norm(U, s, N=128)
    b = sobolev_norm(U, s, N=256)
    return abs(b - a) <= tol * b


def holder_exponent(U: Suspension) -> float:
    """Holder order of sqrt(U): sqrt(U) behaves like |y|^gamma next to the minimizer of a prototype."""
    if U.kind in (A1, A2):
        return min(float(U.gamma), 1.0)
    return 1.0


def validate(cfg: ExperimentConfig, K: int = 10_000) -> dict:
    """Which regularity/frequency hypotheses hold empirically, and the exponents they predict."""
    P = cfg.potential
    U = P.suspension
    n = P.frequency.n
    sigma, C = estimate_diophantine(P.frequency.components, K)
    s_needed = n / 2.0 + sigma
    smooth = sqrt_sobolev_index(U, s_needed + 0.05)
    alpha = holder_exponent(U)
    rows = {"P1": bool(smooth), "P2": None, "P3": None, "P4": bool(n == 2 and abs(sigma - 1.0) < 1e-9)}
    rates = homog.predicted_rates(U.gamma) if U.kind in (A1, A2) else {"upper": None, "lower": None}
    if smooth:
        lower, row = 1.0, "P1"
    elif rows["P4"]:
        lower, row = alpha / (alpha + 1.0), "P4"
    else:
        lower, row = None, None
    out = {"sigma_hat": sigma, "C_hat": C, "sobolev_index_needed": s_needed, "sqrt_U_in_H_s": bool(smooth),
           "holder_alpha": alpha, "hypotheses": rows, "applicable_row": row, "predicted_lower_exponent": lower,
           "predicted_upper_exponent": rates.get("upper")}
    if rates.get("upper") is not None and 1.0 < sigma < 2.0:
        out["note"] = "sigma_hat in (1, 2): the upper bound still holds under the relaxed frequency condition"
    return out


# --------------------------------------------------------------------------
# entry point


def run(cfg: ExperimentConfig, plot: bool = False, check: bool = False) -> int:
    try:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        probe = cfg.out_dir / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {cfg.out_dir} is not writable: {exc}") from None
    manifest = {"config": cfg.manifest_config(), "package": "qphj"}
    if cfg.kind == "validate":
        diag = validate(cfg)
        manifest["diagnostics"] = diag
        for k, v in diag.items():
            print(f"{k}: {v}")
        _write_manifest(cfg, manifest)
        return EXIT_OK
    result = RUNNERS[cfg.kind](cfg)
    manifest["outputs"] = [result.csv_path.name]
    manifest["summary"] = result.summary
    manifest["checks"] = [{"name": n, "value": v, "threshold": t, "passed": p} for n, v, t, p in result.checks]
    manifest["csv_sha256"] = hashlib.sha256(result.csv_path.read_bytes()).hexdigest()
    if plot and result.series:
        svg = result.csv_path.with_suffix(".svg")
        svg_loglog(svg, result.series, *result.labels)
        manifest["outputs"].append(svg.name)
    _write_manifest(cfg, manifest)
    print(f"{cfg.kind}: wrote {result.csv_path}")
    for key in ("fit", "max_error", "max_inversion_error"):
        if key in result.summary:
            print(f"{key}: {result.summary[key]}")
    for name, value, threshold, passed in result.checks:
        print(f"{'PASS' if passed else 'FAIL'} {name}: {value:.6g} (threshold {threshold:.6g})")
    if check and not result.passed:
        return EXIT_ASSERT
    return EXIT_OK


def _write_manifest(cfg: ExperimentConfig, manifest: dict) -> None:
    path = cfg.out_dir / f"{cfg.kind}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    return str(obj)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qphj", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file describing the run")
        p.add_argument("--out", default="qphj-out", help="output directory")
        p.add_argument("--assert", dest="check", action="store_true",
                       help="exit with status 4 when a configured threshold is missed")
        p.add_argument("--plot", action="store_true", help="also write a self-contained SVG plot")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.command, args.config, args.out)
        return run(cfg, plot=args.plot, check=args.check)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (QPHJError, FloatingPointError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
