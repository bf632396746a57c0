"""Config-driven scenario runner.

A scenario is a line-oriented ``key = value`` file with square-bracket
sections: ``[scenario]`` holds the experiment kind and scale, and the
optional ``[law]``, ``[lagrangian]``, ``[shift]``, ``[map]``, ``[family]``,
``[bridge]``, ``[fbsde]`` sections hold parameters forwarded to the
registries.  Every run writes ``report.csv`` (statistics), ``verdict.txt``
(one line: kind, PASS or FAIL, max statistic) and optionally ``paths.csv``
and figures; the exit status is 0 on PASS, 1 on FAIL and 2 on configuration
errors.  Reruns with the same config and seed are byte-identical for any
``--threads`` value.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys

import numpy as np

from . import bridge as bridge_mod
from . import catalog, diagnostics, reporting
from .lagrangians import action, el_process
from .paths import (TimeGrid, adaptedness_probe, export_paths_csv, simulate,
                    summarize_terminal)
from .shifts import (EndpointError, GridCompatibilityError, delay_pn,
                     endpoint_rn, h_norm_sq, materialize, stop_truncate)

KINDS = ("simulate", "action", "el-certify", "variational", "noether",
         "bridge", "fbsde", "navier-stokes", "operators")

_COMMON_KEYS = {"kind", "law", "lagrangian", "shift", "map", "family", "m",
                "n_paths", "seed", "threshold", "t_max", "probes", "out",
                "plot", "paths_csv", "threads"}
_KIND_KEYS = {
    "simulate": {"expected_mean", "expected_var"},
    "action": {"expected", "allowance"},
    "el-certify": set(),
    "variational": {"endpointize", "expect_critical", "eps", "allowance"},
    "noether": set(),
    "bridge": {"expected_action", "expected_entropy", "entropy_tol",
               "allowance", "tv_tol", "tv_bins"},
    "fbsde": {"variant", "constancy_tol", "riccati_tol"},
    "navier-stokes": {"residual_tol", "div_tol"},
    "operators": {"shift_count", "peeking", "level"},
}
_PARAM_SECTIONS = {"law", "lagrangian", "shift", "map", "family", "bridge", "fbsde"}


class ConfigError(ValueError):
    pass


def _parse_value(raw: str):
    s = raw.strip()
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    if "," in s:
        try:
            return tuple(float(tok) for tok in s.split(","))
        except ValueError:
            return tuple(tok.strip() for tok in s.split(","))
    return s


def load_config(path) -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    if "scenario" not in parser:
        raise ConfigError("config must contain a [scenario] section")
    unknown_sections = set(parser.sections()) - ({"scenario"} | _PARAM_SECTIONS)
    if unknown_sections:
        raise ConfigError(f"unknown sections {sorted(unknown_sections)}; "
                          f"valid: scenario, {', '.join(sorted(_PARAM_SECTIONS))}")
    scen = {k: _parse_value(v) for k, v in parser["scenario"].items()}
    kind = scen.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {', '.join(KINDS)}")
    allowed = _COMMON_KEYS | _KIND_KEYS[kind]
    bad = set(scen) - allowed
    if bad:
        raise ConfigError(f"unknown [scenario] keys {sorted(bad)} for kind "
                          f"'{kind}'; valid keys: {', '.join(sorted(allowed))}")
    cfg = {"scenario": scen}
    for sec in _PARAM_SECTIONS:
        cfg[sec] = ({k: _parse_value(v) for k, v in parser[sec].items()}
                    if sec in parser else {})
    return cfg


def _scale(cfg):
    s = cfg["scenario"]
    grid = TimeGrid(int(s.get("m", 200)))
    n = int(s.get("n_paths", 100_000))
    seed = int(s.get("seed", 7))
    threads = int(s.get("threads", 1))
    threshold = float(s.get("threshold", 4.0))
    probes = s.get("probes", diagnostics.DEFAULT_PROBE_FRACTIONS)
    if isinstance(probes, float):
        probes = (probes,)
    return grid, n, seed, threads, threshold, probes


def _law(cfg, grid, n, seed, threads):
    from dataclasses import replace

    s = cfg["scenario"]
    if "law" not in s:
        raise ConfigError("this scenario kind requires a 'law' key")
    ens = catalog.build_law(str(s["law"]), grid, n, seed, threads=threads,
                            **cfg["law"])
    if "t_max" in s:
        ens = replace(ens, t_max=float(s["t_max"]))
    return ens


def _lagrangian(cfg, default="kinetic"):
    name = str(cfg["scenario"].get("lagrangian", default))
    return catalog.get_lagrangian(name, **cfg["lagrangian"])


def _report_rows(report):
    header = ["probe_s", "probe_t", "column", "z"]
    return header, list(report.rows())


def run_simulate(cfg, grid, n, seed, threads, threshold, probes):
    ens = _law(cfg, grid, n, seed, threads)
    ens.validate()
    (mean, se), (mean2, se2) = summarize_terminal(ens)
    s = cfg["scenario"]
    rows, stats = [], [0.0]
    for k in range(ens.dim):
        var_k = mean2[k] - mean[k] ** 2
        rows.append((f"terminal_mean[{k}]", float(mean[k]), float(se[k])))
        rows.append((f"terminal_var[{k}]", float(var_k), float(se2[k])))
        if "expected_mean" in s:
            stats.append(abs(float(mean[k]) - float(s["expected_mean"])) / max(float(se[k]), 1e-300))
        if "expected_var" in s:
            stats.append(abs(var_k - float(s["expected_var"])) / max(float(se2[k]), 1e-300))
    max_stat = float(max(stats))
    header = ["quantity", "value", "stderr"]
    return max_stat <= threshold, max_stat, header, rows, ens, None


def run_action(cfg, grid, n, seed, threads, threshold, probes):
    ens = _law(cfg, grid, n, seed, threads)
    lag = _lagrangian(cfg)
    t_max = float(cfg["scenario"].get("t_max", 1.0))
    est = action(ens, lag, t_max=t_max)
    s = cfg["scenario"]
    rows = [("action", est.mean, est.stderr), ("n_paths", est.n_paths, 0.0),
            ("m", est.m, 0.0)]
    max_stat = 0.0
    if "expected" in s:
        allowance = float(s.get("allowance", 0.0))
        gap = max(0.0, abs(est.mean - float(s["expected"])) - allowance)
        max_stat = gap / max(est.stderr, 1e-300)
        rows.append(("expected", float(s["expected"]), allowance))
    return max_stat <= threshold, max_stat, ["quantity", "value", "stderr"], rows, ens, None


def run_el_certify(cfg, grid, n, seed, threads, threshold, probes):
    ens = _law(cfg, grid, n, seed, threads)
    lag = _lagrangian(cfg)
    report = diagnostics.el_certify(ens, lag, probe_fractions=probes,
                                    threshold=threshold)
    header, rows = _report_rows(report)
    return report.verdict, report.max_abs_statistic, header, rows, ens, report


def run_variational(cfg, grid, n, seed, threads, threshold, probes):
    s = cfg["scenario"]
    ens = _law(cfg, grid, n, seed, threads)
    lag = _lagrangian(cfg)
    shift_name = str(s.get("shift", "plus_minus"))
    base = catalog.get_shift(shift_name, grid, **cfg["shift"])
    mat = materialize(base, ens)
    if "endpointize" in s:
        mat = endpoint_rn(mat, int(s["endpointize"]))
    eps = s.get("eps", (1e-2, 1e-3))
    if isinstance(eps, float):
        eps = (eps,)
    res = diagnostics.variational_derivative(
        ens, lag, mat, eps_list=eps,
        allowance=float(s["allowance"]) if "allowance" in s else None)
    stats = [max(0.0, abs(res.diff) - res.allowance) / max(res.diff_se, 1e-300)]
    if bool(s.get("expect_critical", False)):
        stats.append(max(0.0, abs(res.formula) - res.allowance)
                     / max(res.formula_se, 1e-300))
        stats.append(max(0.0, abs(res.fd) - res.allowance)
                     / max(res.fd_se, res.formula_se, 1e-300))
    max_stat = float(max(stats))
    rows = [("fd", res.fd, res.fd_se), ("formula", res.formula, res.formula_se),
            ("difference", res.diff, res.diff_se),
            ("allowance", res.allowance, 0.0), ("epsilon", res.epsilon, 0.0)]
    return max_stat <= threshold, max_stat, ["quantity", "value", "stderr"], rows, ens, None


def run_noether(cfg, grid, n, seed, threads, threshold, probes):
    ens = _law(cfg, grid, n, seed, threads)
    lag = _lagrangian(cfg)
    family = catalog.get_family(str(cfg["scenario"].get("family", "translation")),
                                **cfg["family"])
    _, report = diagnostics.noether_invariant(ens, lag, family,
                                              probe_fractions=probes,
                                              threshold=threshold)
    header, rows = _report_rows(report)
    return report.verdict, report.max_abs_statistic, header, rows, ens, report


def run_bridge(cfg, grid, n, seed, threads, threshold, probes):
    s = cfg["scenario"]
    p = dict(cfg["bridge"])
    x_min = float(p.pop("x_min", -6.0))
    x_max = float(p.pop("x_max", 6.0))
    n_cells = int(p.pop("n_cells", 481))
    p0 = bridge_mod.delta_marginal(float(p.pop("initial_at", 0.0)), x_min, x_max, n_cells)
    p1 = bridge_mod.gaussian_marginal(float(p.pop("final_mean", 0.0)),
                                      float(p.pop("final_var", 2.0)),
                                      x_min, x_max, n_cells)
    problem = bridge_mod.BridgeProblem(p0=p0, p1=p1, x_min=x_min, x_max=x_max)
    solution = bridge_mod.sinkhorn_bridge(problem, grid,
                                          tol=float(p.pop("tol", 1e-9)),
                                          max_iter=int(p.pop("max_iter", 10_000)))
    if p:
        raise ConfigError(f"unknown [bridge] keys {sorted(p)}")
    model, holder = bridge_mod.bridge_to_model(solution)
    ens = simulate(model, grid, n, seed, threads=threads, label="sinkhorn_bridge")
    lag = _lagrangian(cfg)
    est = action(ens, lag, t_max=1.0)

    # terminal histogram against the target marginal on coarse bins
    tv_bins = int(s.get("tv_bins", 48))
    edges = np.linspace(x_min, x_max, tv_bins + 1)
    hist, _ = np.histogram(ens.states[:, -1, 0], bins=edges)
    hist = hist / ens.n_paths
    centers = problem.centers
    target = np.array([problem.p1[(centers >= a) & (centers < b)].sum()
                       for a, b in zip(edges[:-1], edges[1:])])
    tv = 0.5 * float(np.abs(hist - target / target.sum()).sum())
    tv_tol = float(s.get("tv_tol", 0.02))

    stats = [threshold * tv / tv_tol]
    rows = [("entropy", solution.entropy, solution.marginal_error),
            ("action", est.mean, est.stderr),
            ("terminal_tv", tv, tv_tol),
            ("sinkhorn_iterations", solution.iterations, 0.0),
            ("clamped_queries", holder.clamped, 0.0)]
    if "expected_action" in s:
        allowance = float(s.get("allowance", 2e-3))
        gap = max(0.0, abs(est.mean - float(s["expected_action"])) - allowance)
        stats.append(gap / max(est.stderr, 1e-300))
        rows.append(("expected_action", float(s["expected_action"]), allowance))
    if "expected_entropy" in s:
        etol = float(s.get("entropy_tol", 2e-3))
        stats.append(threshold * abs(solution.entropy - float(s["expected_entropy"])) / etol)
        rows.append(("expected_entropy", float(s["expected_entropy"]), etol))
    max_stat = float(max(stats))
    return max_stat <= threshold, max_stat, ["quantity", "value", "tolerance_or_stderr"], rows, ens, None


def run_fbsde(cfg, grid, n, seed, threads, threshold, probes):
    s = cfg["scenario"]
    p = dict(cfg["fbsde"])
    variant = str(s.get("variant", "adapted"))
    dim = int(p.pop("dim", 1))
    curvature = float(p.pop("curvature", 1.0))
    potential = str(p.pop("potential", "quadratic"))
    x0 = p.pop("x0", 1.0)
    gfun, curv, x0v, y0v = catalog._oscillator_spec(dim, curvature, potential,
                                                    x0, p.pop("y0", 0.0))
    if variant == "adapted":
        spec = bridge_mod.FbsdeSpec(dim=dim, grad_potential=gfun,
                                    y0_fn=lambda xi: y0v,
                                    sigma=float(p.pop("sigma_scale", 1.0)) * np.eye(dim),
                                    initial_sampler=catalog.point_sampler(x0v))
    else:
        spec = bridge_mod.FbsdeSpec(dim=1, grad_potential=gfun,
                                    y0_gaussian=(float(p.pop("y0_mean", 0.0)),
                                                 float(p.pop("y0_var", 1.0))),
                                    curvature=curv,
                                    initial_sampler=catalog.point_sampler(x0v))
    if p:
        raise ConfigError(f"unknown [fbsde] keys {sorted(p)}")
    result = bridge_mod.fbsde_simulate(spec, grid, n, seed, variant=variant)
    ens = result.ensemble
    lag = _lagrangian(cfg, default="kinetic_quadratic")
    rows, stats = [], [0.0]
    if variant == "adapted":
        tol = float(s.get("constancy_tol", 1e-3))
        nproc = el_process(ens, lag)
        defect = float(np.max(np.abs(nproc - nproc[:, :1])))
        rows.append(("el_constancy_defect", defect, tol))
        stats.append(threshold * defect / tol)
    else:
        tol = float(s.get("riccati_tol", 1e-8))
        t = grid.times[:-1]
        v0 = float(spec.y0_gaussian[1])
        oracle = v0 / (1.0 + v0 * t)
        defect = float(np.max(np.abs(result.posterior_var - oracle)))
        rows.append(("riccati_defect", defect, tol))
        stats.append(threshold * defect / tol)
    report = None
    if float(np.max(np.abs(ens.diffusions))) > 0 and n >= diagnostics.MIN_PATHS:
        report = diagnostics.el_certify(ens, lag, probe_fractions=probes,
                                        threshold=threshold)
        rows.append(("el_certify_max_stat", report.max_abs_statistic, threshold))
        stats.append(report.max_abs_statistic)
    max_stat = float(max(stats))
    return max_stat <= threshold, max_stat, ["quantity", "value", "tolerance"], rows, ens, report


def run_navier_stokes(cfg, grid, n, seed, threads, threshold, probes):
    s = cfg["scenario"]
    residual, div = bridge_mod.navier_stokes_residual()
    res_tol = float(s.get("residual_tol", 1e-10))
    div_tol = float(s.get("div_tol", 1e-12))
    ens = catalog.build_law("taylor_green", grid, n, seed, threads=threads)
    lag = _lagrangian(cfg, default="kinetic_taylor_green")
    report = diagnostics.el_certify(ens, lag, probe_fractions=probes,
                                    threshold=threshold)
    stats = [threshold * residual / res_tol, threshold * div / div_tol,
             report.max_abs_statistic]
    rows = [("ns_residual", residual, res_tol), ("divergence", div, div_tol),
            ("el_certify_max_stat", report.max_abs_statistic, threshold)]
    max_stat = float(max(stats))
    return max_stat <= threshold, max_stat, ["quantity", "value", "tolerance"], rows, ens, report


def _shift_diff(u, v):
    from dataclasses import replace
    return replace(u, hdot=u.hdot - v.hdot, h=u.h - v.h)


def run_operators(cfg, grid, n, seed, threads, threshold, probes):
    """Property suite for the shift operators on randomized adapted shifts.

    Each shift is checked for adaptedness, the pathwise contraction of the
    block-delay and truncation operators, the exact terminal zero of the
    endpoint operator, and the decrease of the reconstruction error between
    block counts 4 and 32.  Any violated property drives the statistic to
    infinity (FAIL); the ``peeking`` flag swaps in a non-adapted shift as a
    negative control.
    """
    s = cfg["scenario"]
    if grid.m % 32 != 0:
        raise ConfigError("operators scenario needs m divisible by 32")
    ens = _law(cfg, grid, n, seed, threads) if "law" in s else catalog.build_law(
        "brownian", grid, n, seed, threads=threads)
    count = int(s.get("shift_count", 5))
    peeking = bool(s.get("peeking", False))
    rows, stats = [], [0.0]
    for k in range(count):
        if peeking:
            def derivative(j, states):
                look = min(j + 1, states.shape[1] - 1)
                return states[:, look]

            base = catalog.AdaptedShift(name="peeking", derivative=derivative)
        else:
            base = catalog.make_random_endpoint_zero_shift(grid, seed=1000 + seed + k)
        probe = adaptedness_probe(base.derivative, ens,
                                  steps=[grid.m // 4, grid.m // 2])
        rows.append((f"shift{k}_adaptedness_defect", probe, 0.0))
        if probe > 0:
            stats.append(float("inf"))
            continue
        u = materialize(base, ens)
        norm = h_norm_sq(u)
        slack = 1e-10 * max(1.0, float(norm.max()))
        for nblocks in (4, 8, 16, 32):
            excess = float(np.max(h_norm_sq(delay_pn(u, nblocks)) - norm))
            stats.append(0.0 if excess <= slack else float("inf"))
        term = float(np.max(np.abs(endpoint_rn(u, 8).terminal())))
        rows.append((f"shift{k}_rn_terminal", term, 1e-10))
        stats.append(0.0 if term <= 1e-10 else float("inf"))
        err4 = float(np.mean(h_norm_sq(_shift_diff(endpoint_rn(u, 4), u))))
        err32 = float(np.mean(h_norm_sq(_shift_diff(endpoint_rn(u, 32), u))))
        rows.append((f"shift{k}_r4_err", err4, 0.0))
        rows.append((f"shift{k}_r32_err", err32, 0.0))
        stats.append(0.0 if err32 < err4 else float("inf"))
        level = float(s.get("level", float(np.median(np.sqrt(norm)))))
        excess = float(np.max(h_norm_sq(stop_truncate(u, level)) - norm))
        stats.append(0.0 if excess <= slack else float("inf"))
    max_stat = float(max(stats))
    return max_stat <= threshold, max_stat, ["check", "value", "tolerance"], rows, ens, None


_RUNNERS = {
    "simulate": run_simulate,
    "action": run_action,
    "el-certify": run_el_certify,
    "variational": run_variational,
    "noether": run_noether,
    "bridge": run_bridge,
    "fbsde": run_fbsde,
    "navier-stokes": run_navier_stokes,
    "operators": run_operators,
}


def run_scenario(cfg: dict, out_dir, threads=None, seed=None, plot=False) -> int:
    s = cfg["scenario"]
    if seed is not None:
        s["seed"] = int(seed)
    if threads is not None:
        s["threads"] = int(threads)
    grid, n, seed_v, thr, threshold, probes = _scale(cfg)
    kind = s["kind"]
    os.makedirs(out_dir, exist_ok=True)
    passed, max_stat, header, rows, ens, report = _RUNNERS[kind](
        cfg, grid, n, seed_v, thr, threshold, probes)
    reporting.write_csv(os.path.join(out_dir, "report.csv"), header, rows)
    line = reporting.write_verdict(os.path.join(out_dir, "verdict.txt"),
                                   kind, passed, max_stat)
    print(line)
    if ens is not None and bool(s.get("paths_csv", kind == "simulate")):
        export_paths_csv(ens, os.path.join(out_dir, "paths.csv"))
    if plot or bool(s.get("plot", False)):
        reporting.render_figures(out_dir, ensemble=ens, report=report)
    return 0 if passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="actionlab",
        description="Monte Carlo laboratory for variational diagnostics on "
                    "laws of semi-martingales")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run a scenario config")
    runp.add_argument("--config", required=True, help="scenario config path")
    runp.add_argument("--seed", type=int, default=None, help="seed override")
    runp.add_argument("--threads", type=int, default=None, help="worker threads")
    runp.add_argument("--out", default=None, help="output directory")
    runp.add_argument("--plot", action="store_true",
                      help="also render figures next to the CSV output")
    sub.add_parser("list", help="list registered laws, Lagrangians, shifts, "
                                "maps and families")
    args = parser.parse_args(argv)

    if args.command == "list":
        for title, reg in (("laws", catalog.LAWS),
                           ("lagrangians", catalog.LAGRANGIANS),
                           ("shifts", catalog.SHIFTS),
                           ("maps", catalog.MAPS),
                           ("families", catalog.FAMILIES)):
            print(f"{title}: {', '.join(sorted(reg))}")
        return 0

    try:
        cfg = load_config(args.config)
        out_dir = args.out or cfg["scenario"].get("out") or "run_output"
        return run_scenario(cfg, out_dir, threads=args.threads,
                            seed=args.seed, plot=args.plot)
    except (ConfigError, KeyError, TypeError, GridCompatibilityError,
            EndpointError, ValueError, bridge_mod.ConvergenceError,
            bridge_mod.KernelUnderflowError,
            bridge_mod.UnsupportedSpecError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
