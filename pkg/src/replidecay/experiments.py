"""Experiment drivers: replica fan-out, aggregation and the studies behind
each CLI subcommand.

Every study is a pure function of its config and seed.  Aggregates use the
normal approximation: mean +/- 1.96 standard errors over replicas.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dominating import run_coupled, run_dominating, simulate_tbar
from .mean_field import fp_solve, picard_iterate, poisson_r2_law
from .reduced_view import DiscreteMeasure, empirical_measure, measure_distance
from .sim_core import FixedTotal, SystemParams, run_trajectory
from .spectral_decay import (figure3_table, fit_decay_rate, kappa2, spectrum,
                             write_figure3_csv)

Z95 = 1.96
CI_METHOD = "normal approximation, mean +/- 1.96 * sd / sqrt(replicas)"
KINDS = ("simulate", "meanfield", "decay", "compare", "figure3", "convergence", "coupling")


@dataclass
class ExperimentConfig:
    kind: str
    params: SystemParams
    replicas: int = 1
    out: str = "out"
    n_list: list = field(default_factory=lambda: [100, 400, 1600])
    rho_list: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    d_list: list = field(default_factory=lambda: [2, 3, 4])
    delta_list: list = field(default_factory=lambda: [0.1, 0.5, 0.9])
    beta: float = 2.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")
        for name in ("n_list", "rho_list", "d_list", "delta_list"):
            if not getattr(self, name):
                raise ValueError(f"{name} must not be empty")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params.to_dict(), "replicas": self.replicas,
                "out": self.out, "n_list": list(self.n_list), "rho_list": list(self.rho_list),
                "d_list": list(self.d_list), "delta_list": list(self.delta_list),
                "beta": self.beta, "extra": self.extra}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        params = d.pop("params", {})
        if not isinstance(params, SystemParams):
            params = dict(params)
            params.setdefault("n_servers", 100)
            params.setdefault("lam", 1.0)
            params.setdefault("mu", 1.0)
            params = SystemParams.from_dict(params)
        known = {k: d.pop(k) for k in list(d) if k in cls.__dataclass_fields__}
        extra = dict(known.pop("extra", {}))
        extra.update(d)
        return cls(params=params, extra=extra, **known)


def load_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def normal_ci(samples: np.ndarray, axis: int = 0):
    """(mean, standard error, lo, hi) over ``axis``."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[axis]
    mean = samples.mean(axis=axis)
    se = samples.std(axis=axis, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, se, mean - Z95 * se, mean + Z95 * se


def _fmt(x) -> str:
    if x is None:
        return ""
    return format(float(x), ".12g")


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in r])


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)


def _outdir(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    if not os.access(p, os.W_OK):
        raise OSError(f"output directory {p} is not writable")
    return p


def _with(params: SystemParams, **kw) -> SystemParams:
    return replace(params, **kw)


# ---------------------------------------------------------------- simulate

def run_replicas(params: SystemParams, replicas: int, **kw) -> list:
    return [run_trajectory(params, r, **kw) for r in range(replicas)]


def cmd_simulate(cfg: ExperimentConfig) -> tuple[dict, bool]:
    out = _outdir(cfg)
    runs = run_replicas(cfg.params, cfg.replicas, keep_reduced=False, track_pairs=True)
    for s in runs:
        s.write_csv(out / f"replica_{s.replica_index:04d}.csv")
        s.write_json(out / f"replica_{s.replica_index:04d}.json", cfg.delta_list)
    frac = np.array([s.alive_fraction for s in runs])
    mean, se, lo, hi = normal_ci(frac)
    _write_rows(out / "aggregate.csv", ["t", "alive_fraction_mean", "ci_lo", "ci_hi", "replicas"],
                [(t, m, a, b, str(len(runs))) for t, m, a, b in zip(runs[0].times, mean, lo, hi)])
    dur = {}
    rows = []
    for dl in cfg.delta_list:
        vals = [s.durability(dl) for s in runs]
        fin = np.array([v for v in vals if v is not None])
        q = np.quantile(fin, [0.1, 0.5, 0.9]) if fin.size else [None] * 3
        dur[str(dl)] = {"finite": int(fin.size), "replicas": len(runs),
                        "q10": q[0], "q50": q[1], "q90": q[2],
                        "mean": float(fin.mean()) if fin.size else None}
        rows.append((dl, str(int(fin.size)), *q))
    _write_rows(out / "durability.csv", ["delta", "n_finite", "q10", "q50", "q90"], rows)
    summary = {"config": cfg.to_dict(), "ci_method": CI_METHOD, "replicas": len(runs),
               "durability": dur}
    ok = True
    if "check_all_finite" in cfg.extra:
        ok = all(v["finite"] == v["replicas"] for v in dur.values())
    summary["check_passed"] = ok
    _write_json(out / "summary.json", summary)
    return summary, ok


# ---------------------------------------------------------------- mean field

def initial_law_from(cfg: ExperimentConfig):
    spec = cfg.extra.get("initial", "poisson")
    if spec == "poisson":
        return poisson_r2_law(cfg.params.d_max * cfg.beta)
    return {tuple(r): w for r, w in spec}


def cmd_meanfield(cfg: ExperimentConfig) -> tuple[dict, bool]:
    out = _outdir(cfg)
    p = cfg.params
    if p.d_max != 2:
        raise ValueError("the mean-field solver covers d_max = 2 only")
    law = initial_law_from(cfg)
    times = p.sample_times()
    h = fp_solve(p.lam, p.mu, law, times)
    h.write_csv(out / "fp.csv")
    with open(out / "fp_final_law.json", "w") as fh:
        fh.write(h.snapshot_json(len(times) - 1, cutoff=1e-15))
    summary = {"config": cfg.to_dict(), "K_final": h.final.K, "clamped": h.n_clamped,
               "mass_error": float(np.max(np.abs(h.mass - 1)))}
    ok = summary["mass_error"] < 1e-10
    n_particles = int(cfg.extra.get("particles", 0))
    if n_particles:
        res = picard_iterate(p.lam, p.mu, law, n_particles, p.horizon, seed=p.seed,
                             max_iter=int(cfg.extra.get("max_iter", 10)), strict=False)
        gap = float(np.max(np.abs(res.p_at(times) - h.p)))
        _write_rows(out / "picard_p.csv", ["t", "p"], zip(res.times, res.p))
        summary["picard"] = {"residuals": res.residuals, "converged": res.converged,
                             "sup_gap_to_fp": gap, "noise_floor": res.noise_floor}
        ok = ok and res.converged
    summary["check_passed"] = ok
    _write_json(out / "summary.json", summary)
    return summary, ok


# ---------------------------------------------------------------- decay

def decay_study(cfg: ExperimentConfig) -> dict:
    p = cfg.params
    window = float(cfg.extra.get("window", 0.4))
    tol = float(cfg.extra.get("tolerance", 0.02))
    rows = []
    for rho in cfg.rho_list:
        times = np.linspace(0, float(cfg.extra.get("fp_horizon", 20.0)) / p.mu, 401)
        h = fp_solve(rho * p.mu, p.mu, poisson_r2_law(2 * cfg.beta), times, keep_grids=False)
        rate, r2 = fit_decay_rate(times, h.L, window)
        bound = p.mu * kappa2(rho).kappa_plus
        rows.append({"model": "mean_field", "d": 2, "rho": rho, "fitted_rate": rate, "r2": r2,
                     "bound": bound, "ok": rate >= bound - tol})
    for d in cfg.d_list:
        for rho in cfg.rho_list:
            q = _with(p, d_max=int(d), lam=rho * p.mu,
                      initial_load=FixedTotal(int(cfg.beta * p.n_servers)))
            runs = [run_dominating(q, r, keep_reduced=False) for r in range(cfg.replicas)]
            curve = np.mean([s.alive_per_server for s in runs], axis=0)
            rate, r2 = fit_decay_rate(runs[0].times, curve, window)
            bound = p.mu * spectrum(int(d), rho).kappa_d_plus
            rows.append({"model": "dominating", "d": int(d), "rho": rho, "fitted_rate": rate,
                         "r2": r2, "bound": bound, "ok": rate >= bound - tol})
    return {"rows": rows, "tolerance": tol, "window": window}


def cmd_decay(cfg: ExperimentConfig) -> tuple[dict, bool]:
    out = _outdir(cfg)
    res = decay_study(cfg)
    _write_rows(out / "decay.csv", ["model", "d", "rho", "fitted_rate", "r2", "bound", "ok"],
                [(r["model"], str(r["d"]), r["rho"], r["fitted_rate"], r["r2"], r["bound"],
                  str(r["ok"])) for r in res["rows"]])
    ok = all(r["ok"] for r in res["rows"])
    summary = {"config": cfg.to_dict(), **res, "check_passed": ok}
    _write_json(out / "summary.json", summary)
    return summary, ok


# ---------------------------------------------------------------- compare

def compare_study(params: SystemParams, replicas: int, law) -> dict:
    """Replica means of the per-server class averages against the mean-field moments."""
    runs = run_replicas(params, replicas, keep_reduced=False, track_pairs=False)
    r = np.array([s.mean_reduced for s in runs])
    mean, se, _, _ = normal_ci(r)
    h = fp_solve(params.lam, params.mu, law, runs[0].times, keep_grids=False)
    fp = np.stack([h.m1, h.m2], axis=1)
    z = np.abs(mean - fp) / np.maximum(se, 1e-12)
    return {"times": runs[0].times, "sim_mean": mean, "sim_se": se, "fp": fp, "z": z}


def cmd_compare(cfg: ExperimentConfig) -> tuple[dict, bool]:
    out = _outdir(cfg)
    p = cfg.params
    if p.d_max != 2:
        raise ValueError("compare needs d_max = 2")
    law = initial_law_from(cfg)
    res = compare_study(p, cfg.replicas, law)
    rows = [(t, *m, *s, *f) for t, m, s, f in
            zip(res["times"], res["sim_mean"], res["sim_se"], res["fp"])]
    _write_rows(out / "compare.csv",
                ["t", "sim_R1", "sim_R2", "se_R1", "se_R2", "fp_m1", "fp_m2"], rows)
    zmax = float(res["z"][1:].max()) if len(res["z"]) > 1 else 0.0
    ok = zmax <= 3.0
    summary = {"config": cfg.to_dict(), "ci_method": CI_METHOD, "max_z": zmax,
               "check_passed": ok}
    _write_json(out / "summary.json", summary)
    return summary, ok


# ---------------------------------------------------------------- figure 3

def cmd_figure3(cfg: ExperimentConfig) -> tuple[dict, bool]:
    out = _outdir(cfg)
    rows = figure3_table(cfg.d_list, cfg.rho_list)
    write_figure3_csv(rows, out / "figure3.csv")
    # gnuplot-friendly blocks: one block per rho, columns d ratio
    with open(out / "figure3.dat", "w") as fh:
        for rho in cfg.rho_list:
            fh.write(f"# rho = {rho}\n")
            for r in rows:
                if r.rho == float(rho):
                    fh.write(f"{r.d} {r.ratio:.12g}\n")
            fh.write("\n\n")
    ok = all(r.ratio >= 1 - 1e-12 and 0 < r.kappa_plus <= r.kappa_bar + 1e-12 for r in rows)
    summary = {"config": cfg.to_dict(), "rows": [r._asdict() for r in rows], "check_passed": ok}
    _write_json(out / "summary.json", summary)
    return summary, ok


# ---------------------------------------------------------------- convergence

def convergence_study(n_list, rho: float, mu: float, beta: float, t_eval: float, replicas: int,
                      seed: int = 0) -> dict:
    """TV distance between the empirical per-server law and the mean-field law at ``t_eval``.

    The system starts with beta N files, two copies each; the mean-field
    initial law is (0, Poisson(2 beta)).
    """
    law = poisson_r2_law(2 * beta)
    h = fp_solve(rho * mu, mu, law, [0.0, t_eval])
    target = DiscreteMeasure.from_grid(h.grid_at(1), cutoff=0.0)
    out = {"n": [], "tv_mean": [], "tv_se": [], "tv": [], "pair_fraction": []}
    for n in n_list:
        params = SystemParams(int(n), rho * mu, mu, d_max=2,
                              initial_load=FixedTotal(int(round(beta * n))),
                              horizon=t_eval, n_samples=1, seed=seed)
        tvs, flagged = [], []
        for r in range(replicas):
            s = run_trajectory(params, r, keep_reduced=True, track_pairs=True)
            emp = empirical_measure(s.reduced[-1])
            tvs.append(measure_distance(emp, target).tv)
            flagged.append(float(s.pair_flagged.mean()))
        mean, se, _, _ = normal_ci(np.array(tvs))
        out["n"].append(int(n))
        out["tv"].append(tvs)
        out["tv_mean"].append(float(mean))
        out["tv_se"].append(float(se))
        out["pair_fraction"].append(float(np.mean(flagged)))
    m, s = np.array(out["tv_mean"]), np.array(out["tv_se"])
    z = (m[:-1] - m[1:]) / np.sqrt(s[:-1] ** 2 + s[1:] ** 2 + 1e-300)
    out["drop_z"] = z.tolist()
    out["monotone"] = bool(np.all(np.diff(m) < 0))
    return out


def pair_scaling_study(n_list, rho: float, mu: float, beta: float, horizon: float,
                       replicas: int, seed: int = 0) -> dict:
    """Fraction of servers in a pair sharing >= 2 files at some time in [0, horizon]."""
    frac = []
    for n in n_list:
        params = SystemParams(int(n), rho * mu, mu, d_max=2,
                              initial_load=FixedTotal(int(round(beta * n))),
                              horizon=horizon, n_samples=1, seed=seed)
        vals = [float(run_trajectory(params, r, keep_reduced=False).pair_flagged.mean())
                for r in range(replicas)]
        frac.append(float(np.mean(vals)))
    c = frac[0] * n_list[0]
    ratio = [f * n / c if c > 0 else math.nan for f, n in zip(frac, n_list)]
    return {"n": list(map(int, n_list)), "fraction": frac, "C": c, "ratio": ratio,
            "within_factor_2": bool(all(0.5 <= r <= 2.0 for r in ratio))}


def cmd_convergence(cfg: ExperimentConfig) -> tuple[dict, bool]:
    out = _outdir(cfg)
    p = cfg.params
    if p.d_max != 2:
        raise ValueError("convergence needs d_max = 2")
    if len(cfg.n_list) < 3:
        raise ValueError("convergence needs at least three values of N")
    t_eval = float(cfg.extra.get("t_eval", 2.0 / p.mu))
    res = convergence_study(cfg.n_list, p.rho, p.mu, cfg.beta, t_eval, cfg.replicas, p.seed)
    _write_rows(out / "convergence.csv", ["N", "t", "tv_mean", "tv_se", "pair_fraction"],
                [(str(n), t_eval, m, s, f) for n, m, s, f in
                 zip(res["n"], res["tv_mean"], res["tv_se"], res["pair_fraction"])])
    ok = res["monotone"]
    summary = {"config": cfg.to_dict(), "ci_method": CI_METHOD,
               **{k: v for k, v in res.items() if k != "tv"}, "check_passed": ok}
    _write_json(out / "summary.json", summary)
    return summary, ok


# ---------------------------------------------------------------- coupling

def coupling_study(params: SystemParams, replicas: int) -> dict:
    violations = 0
    dominated = 0
    a_curves, b_curves = [], []
    for r in range(replicas):
        tr = run_coupled(params, r, strict=False)
        violations += tr.violations
        dominated += tr.dominated
        a_curves.append(tr.alive_a / params.n_servers)
        b_curves.append(tr.alive_b / params.n_servers)
    return {"replicas": replicas, "violations": violations, "dominated_runs": dominated,
            "times": tr.times, "mean_alg": np.mean(a_curves, axis=0),
            "mean_dom": np.mean(b_curves, axis=0)}


def cmd_coupling(cfg: ExperimentConfig) -> tuple[dict, bool]:
    out = _outdir(cfg)
    res = coupling_study(cfg.params, cfg.replicas)
    _write_rows(out / "coupling.csv", ["t", "L_alg_per_server", "L_dom_per_server"],
                zip(res["times"], res["mean_alg"], res["mean_dom"]))
    ok = res["violations"] == 0 and res["dominated_runs"] == res["replicas"]
    summary = {"config": cfg.to_dict(), "replicas": res["replicas"],
               "violations": res["violations"], "dominated_runs": res["dominated_runs"],
               "check_passed": ok}
    _write_json(out / "summary.json", summary)
    return summary, ok


def tbar_study(d: int, rho: float, mu: float, V0, M: int, horizon: float, seed: int = 0,
               initial: str = "fixed") -> dict:
    h = simulate_tbar(d, rho, mu, V0, M, horizon, seed=seed, initial=initial)
    z = np.abs(h.mean - h.drive) / np.maximum(h.sem, 1e-12)
    return {"history": h, "max_z": float(z[1:].max())}


COMMANDS = {
    "simulate": cmd_simulate,
    "meanfield": cmd_meanfield,
    "decay": cmd_decay,
    "compare": cmd_compare,
    "figure3": cmd_figure3,
    "convergence": cmd_convergence,
    "coupling": cmd_coupling,
}
