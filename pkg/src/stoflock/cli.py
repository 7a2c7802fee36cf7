"""Command-line front end: config parsing, experiment dispatch, SVG plots.

Config documents are JSON with three sections (model, numerics, output) plus
an experiment name.  Parsing is strict: any key the chosen experiment does
not understand aborts with the offending dotted path, since a silently
ignored typo can flip the meaning of a run.  Exit codes: 0 all assertions
passed, 1 an assertion failed or the integration blew up, 2 bad config or
unusable output location.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .brownian import derive_seed, sample_path
from .dynamics import (Ensemble, SimConfig, export_observables_csv,
                       export_trajectory_csv, make_test_function, simulate)
from .errors import BlowupError, ConfigError
from .experiments import (GronwallInstance, concentration_study,
                          gronwall_check, meanfield_study, phase_sweep,
                          simulate_study, stability_sweep,
                          weak_residual_study)
from .kernels import CommunicationKernel
from .laws import make_law
from .report import ExperimentReport

EXPERIMENTS = ("simulate", "phase-sweep", "meanfield", "stability",
               "gronwall-check", "wasserstein", "weak-residual")
_FORMATS = ("csv", "json", "svg")
_PLOT_KINDS = ("series", "phase-diagram", "violin")

# seed namespaces private to the front end (initial sampling, driving paths)
_NS_INIT = 21
_NS_PATH = 22


@dataclass
class RunConfig:
    experiment: str
    config: SimConfig
    n: int = 0
    d: int = 0
    kernel: CommunicationKernel = None
    law: object = None
    realizations: int = 64
    refinement_levels: int = 3
    sigma_list: list = None
    perturbations: list = None
    cells_per_dim_list: list = None
    gronwall: dict = None
    test_function: object = None
    out_dir: str = "out"
    formats: tuple = ("json", "csv")
    stride: int = 10


def _check_keys(section: dict, allowed, prefix: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key '{prefix}{key}'")


def _need(section: dict, key: str, prefix: str):
    if key not in section:
        raise ConfigError(f"missing key '{prefix}{key}'")
    return section[key]


def _as_float(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"'{path}' must be a number")
    return float(value)


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"'{path}' must be an integer")
    return int(value)


def _parse_kernel(spec, prefix: str = "model.kernel.") -> CommunicationKernel:
    if not isinstance(spec, dict):
        raise ConfigError(f"'{prefix[:-1]}' must be a mapping")
    _check_keys(spec, {"family", "params"}, prefix)
    family = _need(spec, "family", prefix)
    params = spec.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError(f"'{prefix}params' must be a mapping")
    pp = prefix + "params."
    try:
        if family == "constant":
            _check_keys(params, {"k"}, pp)
            return CommunicationKernel.constant(_as_float(_need(params, "k", pp), pp + "k"))
        if family in ("rational", "exponential"):
            _check_keys(params, {"k", "beta", "floor"}, pp)
            make = getattr(CommunicationKernel, family)
            return make(_as_float(_need(params, "k", pp), pp + "k"),
                        _as_float(_need(params, "beta", pp), pp + "beta"),
                        _as_float(params.get("floor", 0.0), pp + "floor"))
        if family == "custom-tabulated":
            _check_keys(params, {"r", "values"}, pp)
            return CommunicationKernel.tabulated(
                np.asarray(_need(params, "r", pp), dtype=float),
                np.asarray(_need(params, "values", pp), dtype=float))
    except ValueError as err:
        raise ConfigError(f"{prefix[:-1]}: {err}") from None
    raise ConfigError(f"unknown kernel family '{family}'")


# model keys each experiment accepts
_MODEL_KEYS = {
    "simulate": {"N", "d", "sigma", "kernel", "initial"},
    "phase-sweep": {"N", "d", "kernel", "initial", "sigma_list"},
    "meanfield": {"d", "sigma", "kernel", "initial", "cells_per_dim_list"},
    "stability": {"N", "d", "sigma", "kernel", "initial", "perturbations"},
    "gronwall-check": {"gronwall"},
    "wasserstein": {"N", "d", "sigma", "kernel", "initial"},
    "weak-residual": {"N", "d", "sigma", "kernel", "initial", "test_function"},
}


def parse_config(text: str, experiment: str = None) -> RunConfig:
    """Parse and fully validate a JSON config document.

    `experiment` (usually the subcommand) fills a missing experiment field
    and must agree with an explicit one.  Unknown keys anywhere are fatal.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(data, {"experiment", "model", "numerics", "output"}, "")

    exp = data.get("experiment", experiment)
    if exp is None:
        raise ConfigError("missing key 'experiment'")
    if experiment is not None and exp != experiment:
        raise ConfigError(
            f"config names experiment '{exp}' but the subcommand is '{experiment}'")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment '{exp}'")

    numerics = data.get("numerics", {})
    _check_keys(numerics, {"dt", "T", "scheme", "seed", "realizations",
                           "refinement_levels"}, "numerics.")
    dt = _as_float(numerics.get("dt", 1e-3), "numerics.dt")
    horizon = _as_float(numerics.get("T", 5.0), "numerics.T")
    scheme = numerics.get("scheme", "ito_euler")
    seed = _as_int(numerics.get("seed", 0), "numerics.seed")
    realizations = _as_int(numerics.get("realizations", 64), "numerics.realizations")
    levels = _as_int(numerics.get("refinement_levels", 3),
                     "numerics.refinement_levels")
    if realizations < 1:
        raise ConfigError("'numerics.realizations' must be >= 1")
    if levels < 2:
        raise ConfigError("'numerics.refinement_levels' must be >= 2")

    output = data.get("output", {})
    _check_keys(output, {"directory", "formats", "stride"}, "output.")
    out_dir = output.get("directory", "out")
    formats = output.get("formats", ["json", "csv"])
    if (not isinstance(formats, list)
            or any(f not in _FORMATS for f in formats)):
        raise ConfigError(f"'output.formats' must be a subset of {_FORMATS}")
    stride = _as_int(output.get("stride", 10), "output.stride")
    if stride < 1:
        raise ConfigError("'output.stride' must be >= 1")

    model = data.get("model", {})
    _check_keys(model, _MODEL_KEYS[exp], "model.")
    rc = RunConfig(experiment=exp, config=None, realizations=realizations,
                   refinement_levels=levels, out_dir=str(out_dir),
                   formats=tuple(formats), stride=stride)

    if exp == "gronwall-check":
        g = _need(model, "gronwall", "model.")
        _check_keys(g, {"c1", "c2", "x0", "forcing_const"}, "model.gronwall.")
        rc.gronwall = {
            "c1": _as_float(_need(g, "c1", "model.gronwall."), "model.gronwall.c1"),
            "c2": _as_float(_need(g, "c2", "model.gronwall."), "model.gronwall.c2"),
            "x0": _as_float(_need(g, "x0", "model.gronwall."), "model.gronwall.x0"),
            "forcing_const": _as_float(g.get("forcing_const", 0.0),
                                       "model.gronwall.forcing_const"),
        }
        rc.config = SimConfig(sigma=0.0, dt=dt, horizon=horizon,
                              scheme=scheme, seed=seed)
        return rc

    d = _as_int(_need(model, "d", "model."), "model.d")
    if d < 1:
        raise ConfigError("'model.d' must be >= 1")
    rc.d = d
    rc.kernel = _parse_kernel(_need(model, "kernel", "model."))
    rc.law = make_law(_need(model, "initial", "model."), d)

    if exp == "phase-sweep":
        raw = _need(model, "sigma_list", "model.")
        if not isinstance(raw, list) or not raw:
            raise ConfigError("'model.sigma_list' must be a nonempty list")
        rc.sigma_list = [_as_float(s, "model.sigma_list") for s in raw]
        if any(s < 0 for s in rc.sigma_list):
            raise ConfigError("sigma must be >= 0")
        sigma = rc.sigma_list[0]
    else:
        sigma = _as_float(_need(model, "sigma", "model."), "model.sigma")

    if exp == "meanfield":
        raw = _need(model, "cells_per_dim_list", "model.")
        if not isinstance(raw, list) or len(raw) < 2:
            raise ConfigError("'model.cells_per_dim_list' needs at least two entries")
        rc.cells_per_dim_list = [_as_int(c, "model.cells_per_dim_list") for c in raw]
        if any(c < 1 for c in rc.cells_per_dim_list):
            raise ConfigError("'model.cells_per_dim_list' entries must be >= 1")
    else:
        rc.n = _as_int(_need(model, "N", "model."), "model.N")
        if rc.n < 1:
            raise ConfigError("'model.N' must be >= 1")

    if exp == "stability":
        raw = _need(model, "perturbations", "model.")
        if not isinstance(raw, list) or not raw:
            raise ConfigError("'model.perturbations' must be a nonempty list")
        rc.perturbations = [_as_float(e, "model.perturbations") for e in raw]

    if exp == "weak-residual":
        tf = _need(model, "test_function", "model.")
        _check_keys(tf, {"family", "center", "scale"}, "model.test_function.")
        center = _need(tf, "center", "model.test_function.")
        if not isinstance(center, list) or len(center) != 2 * d:
            raise ConfigError("'model.test_function.center' must list 2*d coordinates")
        rc.test_function = make_test_function(
            _need(tf, "family", "model.test_function."),
            [_as_float(c, "model.test_function.center") for c in center],
            _as_float(_need(tf, "scale", "model.test_function."),
                      "model.test_function.scale"))

    rc.config = SimConfig(sigma=sigma, dt=dt, horizon=horizon,
                          scheme=scheme, seed=seed)
    return rc


def _initial_ensemble(rc: RunConfig) -> Ensemble:
    rng = np.random.default_rng(derive_seed(rc.config.seed, 0, _NS_INIT))
    z = rc.law.sample(rng, rc.n)
    return Ensemble(z[:, :rc.d].copy(), z[:, rc.d:].copy())


def _shared_path(rc: RunConfig):
    c = rc.config
    return sample_path(c.horizon, c.steps, derive_seed(c.seed, 0, _NS_PATH))


def _write_csv(path: str, header: list[str], columns: list) -> None:
    import csv as _csv
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(float(v)) for v in row])


def _series_csvs(rc: RunConfig, report: ExperimentReport, extra: dict) -> None:
    res = report.results
    out = rc.out_dir
    if rc.experiment == "simulate":
        traj, obs = extra["traj"], extra["obs"]
        export_trajectory_csv(traj, os.path.join(out, "trajectory.csv"))
        export_observables_csv(obs, os.path.join(out, "observables.csv"))
    elif rc.experiment == "phase-sweep":
        header = ["t"] + [f"mean_E[sigma={s:g}]" for s in res["sigmas"]]
        _write_csv(os.path.join(out, "mean_variance.csv"), header,
                   [res["times"]] + list(res["mean_E"]))
        _write_csv(os.path.join(out, "rates.csv"),
                   ["sigma", "rate", "stderr", "r_squared", "band_lo", "band_hi"],
                   [res["sigmas"], res["rates"], res["stderrs"],
                    res["r_squared"], res["rate_band_lo"], res["rate_band_hi"]])
    elif rc.experiment == "stability":
        header = ["t"] + [f"w2[eta={e:g}]" for e in res["perturbations"]]
        _write_csv(os.path.join(out, "stability.csv"), header,
                   [res["times"]] + list(res["w2_series"]))
    elif rc.experiment == "meanfield":
        header = ["t"] + [f"w2[n={n}]" for n in res["n_list"][:-1]]
        _write_csv(os.path.join(out, "meanfield.csv"), header,
                   [res["times"]] + list(res["w2_series"]))
    elif rc.experiment == "gronwall-check":
        _write_csv(os.path.join(out, "gronwall.csv"),
                   ["t", "x", "bound_sharp", "bound_multiplicative", "B_t"],
                   [res["times"], res["x"], res["bound_sharp"],
                    res["bound_multiplicative"], res["brownian"]])
    elif rc.experiment == "wasserstein":
        _write_csv(os.path.join(out, "wasserstein.csv"),
                   ["t", "w1", "sqrt_E"],
                   [res["times"], res["w1"], res["sqrt_E"]])
    elif rc.experiment == "weak-residual":
        res_matrix = np.asarray(res["residuals"])
        header = ["seed_index"] + [f"residual[dt={dt:g}]" for dt in res["dts"]]
        _write_csv(os.path.join(out, "residuals.csv"), header,
                   [np.arange(res_matrix.shape[0])]
                   + [res_matrix[:, j] for j in range(res_matrix.shape[1])])


def _dispatch(rc: RunConfig) -> tuple[ExperimentReport, dict]:
    c = rc.config
    extra = {}
    if rc.experiment == "simulate":
        init = _initial_ensemble(rc)
        path = _shared_path(rc)
        report = simulate_study(init, c, rc.kernel, path=path)
        traj, obs = simulate(init, c, rc.kernel, path, stride=rc.stride)
        extra = {"traj": traj, "obs": obs}
    elif rc.experiment == "phase-sweep":
        init = _initial_ensemble(rc)
        report = phase_sweep(init, c, rc.kernel, rc.sigma_list, rc.realizations)
    elif rc.experiment == "meanfield":
        n_list = [cells ** (2 * rc.d) for cells in rc.cells_per_dim_list]
        report = meanfield_study(rc.law, n_list, c, rc.kernel,
                                 path=_shared_path(rc))
    elif rc.experiment == "stability":
        init = _initial_ensemble(rc)
        report = stability_sweep(init, c, rc.kernel, rc.perturbations,
                                 path=_shared_path(rc))
    elif rc.experiment == "gronwall-check":
        g = rc.gronwall
        path = _shared_path(rc)
        inst = GronwallInstance(g["c1"], g["c2"], g["x0"], g["forcing_const"],
                                path)
        report = gronwall_check(inst)
    elif rc.experiment == "wasserstein":
        init = _initial_ensemble(rc)
        report = concentration_study(init, c, rc.kernel, path=_shared_path(rc))
    elif rc.experiment == "weak-residual":
        init = _initial_ensemble(rc)
        report = weak_residual_study(init, c, rc.kernel, rc.test_function,
                                     n_seeds=rc.realizations,
                                     n_levels=rc.refinement_levels)
    else:  # unreachable after parse_config
        raise ConfigError(f"unknown experiment '{rc.experiment}'")
    return report, extra


def run(rc: RunConfig, quiet: bool = False) -> int:
    """Execute one experiment and write its outputs.

    Returns 0 when every assertion passed, 1 on assertion failure or mid-run
    blow-up (a partial report is still written), 2 when the output directory
    cannot be used.
    """
    try:
        os.makedirs(rc.out_dir, exist_ok=True)
        probe = os.path.join(rc.out_dir, ".write_probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as err:
        if not quiet:
            print(f"error: output directory unusable: {err}", file=sys.stderr)
        return 2

    report_path = os.path.join(rc.out_dir, "report.json")
    try:
        report, extra = _dispatch(rc)
    except BlowupError as err:
        partial = ExperimentReport(
            rc.experiment,
            {"seed": rc.config.seed, "dt": rc.config.dt, "T": rc.config.horizon},
            {"partial": True, "blowup_time": err.time, "blowup_step": err.step},
            {"completed": False})
        partial.save(report_path)
        if not quiet:
            print(f"FAIL completed ({err})")
            print(f"wrote partial report to {report_path}")
        return 1

    report.save(report_path)
    if "csv" in rc.formats:
        _series_csvs(rc, report, extra)
    if "svg" in rc.formats and rc.experiment in ("simulate", "phase-sweep"):
        plot(report_path, "series",
             os.path.join(rc.out_dir, "series.svg"))
        if rc.experiment == "phase-sweep":
            plot(report_path, "phase-diagram",
                 os.path.join(rc.out_dir, "phase_diagram.svg"))
            plot(report_path, "violin",
                 os.path.join(rc.out_dir, "violin.svg"))

    if not quiet:
        for name, ok in report.assertions.items():
            print(f"{'PASS' if ok else 'FAIL'} {name}")
        print(f"wrote {report_path}")
    return 0 if report.passed else 1


# --- plots ----------------------------------------------------------------------


def _plot_axes():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot(report_path: str, kind: str, out_path: str = None) -> str:
    """Render one SVG plot from a saved report; returns the SVG path."""
    if kind not in _PLOT_KINDS:
        raise ConfigError(f"unknown plot kind '{kind}'")
    try:
        report = ExperimentReport.load(report_path)
    except (ValueError, KeyError) as err:
        raise ConfigError(f"report does not match the schema: {err}") from None
    if out_path is None:
        base = os.path.dirname(os.path.abspath(report_path))
        out_path = os.path.join(base, f"{kind.replace('-', '_')}.svg")

    plt = _plot_axes()
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    try:
        if kind == "series":
            _plot_series(ax, report)
        elif kind == "phase-diagram":
            _plot_phase_diagram(ax, report)
        else:
            _plot_violin(ax, report)
        fig.tight_layout()
        fig.savefig(out_path, format="svg")
    finally:
        plt.close(fig)
    return out_path


def _series_curves(report: ExperimentReport):
    res = report.results
    times = np.asarray(res.get("times", []), dtype=float)
    if "mean_E" in res:
        curves = [(f"sigma={s:g}", np.asarray(c, dtype=float), float(s))
                  for s, c in zip(res["sigmas"], res["mean_E"])]
    elif "E" in res:
        sigma = float(report.config.get("sigma", 0.0))
        curves = [("E_t", np.asarray(res["E"], dtype=float), sigma)]
    else:
        raise ConfigError("report has no variance series to plot")
    if times.size == 0 or any(c.size == 0 for _, c, _ in curves):
        raise ConfigError("report contains an empty series")
    return times, curves


def _plot_series(ax, report: ExperimentReport) -> None:
    times, curves = _series_curves(report)
    kernel = report.config.get("kernel", {})
    psi_min = float(kernel.get("psi_min", 0.0))
    psi_max = float(kernel.get("psi_max", 0.0))
    e0 = float(report.results.get("E_initial", curves[0][1][0]))
    for label, curve, sigma in curves:
        line, = ax.semilogy(times, np.maximum(curve, 1e-300), label=label)
        color = line.get_color()
        up = e0 * np.exp(-2.0 * (psi_min - 2.0 * sigma) * times)
        lo = e0 * np.exp(-2.0 * (psi_max - 2.0 * sigma) * times)
        ax.semilogy(times, up, "--", color=color, alpha=0.6, linewidth=0.9)
        ax.semilogy(times, lo, ":", color=color, alpha=0.6, linewidth=0.9)
    ax.set_xlabel("t")
    ax.set_ylabel("E_t")
    ax.set_title("velocity variance with decay envelopes")
    ax.legend(fontsize=8)


def _plot_phase_diagram(ax, report: ExperimentReport) -> None:
    res = report.results
    if "rates" not in res or "sigmas" not in res:
        raise ConfigError("report has no fitted rates; not a phase-sweep report")
    sig = np.asarray(res["sigmas"], dtype=float)
    rates = np.asarray(res["rates"], dtype=float)
    if sig.size == 0:
        raise ConfigError("report contains an empty series")
    err = np.asarray(res.get("stderrs", np.zeros_like(sig)), dtype=float)
    ax.errorbar(sig, rates, yerr=3 * err, fmt="o", capsize=3,
                label="fitted rate")
    kernel = report.config.get("kernel", {})
    psi_min = float(kernel.get("psi_min", 0.0))
    grid = np.linspace(sig.min(), sig.max(), 64)
    ax.plot(grid, 2.0 * (psi_min - 2.0 * grid), "-", alpha=0.7,
            label="2(psi_min - 2 sigma)")
    ax.axhline(0.0, color="k", linewidth=0.6)
    ax.set_xlabel("sigma")
    ax.set_ylabel("decay rate of mean E_t")
    ax.set_title("flocking phase diagram")
    ax.legend(fontsize=8)


def _plot_violin(ax, report: ExperimentReport) -> None:
    res = report.results
    dists = res.get("distributions")
    if not dists:
        raise ConfigError("report has no rate distributions to plot")
    data = [np.asarray(d, dtype=float) for d in dists]
    if any(d.size == 0 for d in data):
        raise ConfigError("report contains an empty series")
    ax.violinplot(data, showmedians=True)
    sig = res.get("sigmas", list(range(1, len(data) + 1)))
    ax.set_xticks(range(1, len(data) + 1))
    ax.set_xticklabels([f"{s:g}" for s in sig])
    ax.set_xlabel("sigma")
    ax.set_ylabel("per-realization fitted rate")
    ax.set_title("rate distributions")


# --- argument parsing --------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stoflock",
        description="flocking simulations with a shared multiplicative noise")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, help="JSON config document")
        p.add_argument("--seed", type=int, default=None,
                       help="override numerics.seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--quiet", action="store_true")
    p = sub.add_parser("plot", help="render an SVG from a saved report")
    p.add_argument("report", help="path to report.json")
    p.add_argument("--kind", required=True, choices=_PLOT_KINDS)
    p.add_argument("--out", default=None, help="output SVG path")
    p.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            out = plot(args.report, args.kind, args.out)
            if not args.quiet:
                print(f"wrote {out}")
            return 0
        with open(args.config) as fh:
            text = fh.read()
        rc = parse_config(text, experiment=args.command)
        if args.seed is not None:
            rc.config = dataclasses.replace(rc.config, seed=args.seed)
        if args.out is not None:
            rc.out_dir = args.out
        return run(rc, quiet=args.quiet)
    except (ConfigError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
