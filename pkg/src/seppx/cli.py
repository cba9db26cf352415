"""Command-line pipeline: simulate, fit, predict, diagnose, explore.

Every command takes an INI config (see ``dataio._SCHEMA`` for keys),
writes into ``--out`` and snapshots the resolved config next to its
outputs.  All randomness is seeded, all floats print in shortest
round-trip form, and nothing time- or host-dependent is written, so
rerunning a command with the same inputs reproduces its outputs byte
for byte.  Errors surface as one JSON object on stderr and a nonzero
exit code.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .baseline import BaselineDesign, BaselineParams
from .core import PointPattern, scale_to_unit
from .dataio import PipelineConfig, format_float
from .gp_trigger import InducingGrid, SeparableTimeSpaceMark, TriggerParams, decompose, sample_omega_prior
from .inference import McmcConfig, PosteriorChain, run_hybrid_mcmc, summarize
from .marks import (
    ExtremeTail,
    MarkCovariates,
    MarkMixture,
    ZeroInflatedBody,
    aic_table,
    dic,
    mark_mh_sampler,
    mle_fit,
)
from .predict import GridSpec, extreme_grid, yearly_grid
from .simulate import SimConfig, simulate_hawkes

__all__ = ["main"]


# ---------------------------------------------------------------------------
# shared helpers


def _config_from(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return PipelineConfig.load(args.config)
    return PipelineConfig.defaults()


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ingest(args, cfg: PipelineConfig):
    pattern, report = dataio.ingest_events(args.events, cfg)
    if len(pattern) == 0:
        raise ValueError("no events survived ingestion filters")
    return pattern, report


def _fields_from(args, cfg: PipelineConfig, scaler):
    cov_path = getattr(args, "covariates", None)
    if not cov_path:
        return ()
    tables = dataio.ingest_covariates(cov_path)
    return dataio.covariate_fields(
        tables, cfg.epoch(), cfg.span_days(),
        scaler.x0, scaler.x_scale, scaler.y0, scaler.y_scale,
    )


def _design_from(cfg: PipelineConfig, fields) -> BaselineDesign:
    kind = cfg.get("mcmc", "baseline_design")
    if kind not in ("intercept", "poly"):
        raise dataio.ConfigError("mcmc.baseline_design must be 'intercept' or 'poly'")
    return BaselineDesign(fields=tuple(fields), spatial_poly=(kind == "poly"))


def _write_summary_csv(path, chain: PosteriorChain) -> None:
    stats = summarize(chain)
    with open(path, "w", newline="\n") as fh:
        fh.write("parameter,mean,sd,q025,q975,mode,ess\n")
        for name in chain.names:
            s = stats[name]
            fh.write(
                f"{name},{format_float(s.mean)},{format_float(s.sd)},"
                f"{format_float(s.q025)},{format_float(s.q975)},"
                f"{format_float(s.mode)},{format_float(s.ess)}\n"
            )


def _mark_mixture_from(cfg: PipelineConfig) -> MarkMixture:
    sim = cfg.sections["simulate"]
    return MarkMixture(
        body_weight=sim["mark_pi"],
        threshold=sim["mark_u"],
        body=ZeroInflatedBody("zip", sim["mark_alpha"], beta=sim["mark_beta"]),
        tail=ExtremeTail("gzd", sim["mark_xi"], sim["mark_sigma"]),
    )


def _strictify(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float).copy()
    for i in range(1, t.size):
        if t[i] <= t[i - 1]:
            t[i] = np.nextafter(t[i - 1], math.inf)
    return t


def _int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v.strip() != ""]


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in str(text).split(",") if v.strip() != ""]


# ---------------------------------------------------------------------------
# simulate


def _cmd_simulate(args) -> int:
    cfg = _config_from(args)
    sim = cfg.sections["simulate"]
    seed = args.seed if args.seed is not None else sim["seed"]
    rng = np.random.default_rng(seed)

    design = BaselineDesign.intercept_only()
    baseline = BaselineParams([math.log(sim["mu_star"])])
    kernel = SeparableTimeSpaceMark(sim["l_t"], sim["l_s"], sim["alpha_s"], sim["kernel"])
    grid = InducingGrid(sim["grid_resolution"])
    basis = decompose(kernel, grid, sim["rank"])
    omega = sample_omega_prior(basis, sim["amplitude"], sim["gamma"], rng)
    trigger = TriggerParams(omega=omega, amplitude=sim["amplitude"], gamma=sim["gamma"])

    mark_mode = sim["mark_mode"]
    sim_cfg = SimConfig(
        offspring_mode=sim["offspring_mode"],
        mark_mode=mark_mode,
        mark_mixture=_mark_mixture_from(cfg) if mark_mode == "mixture" else None,
        mark_ceiling=sim["mark_ceiling"] if mark_mode == "mixture" else None,
        n_particles=sim["n_particles"],
        probe_resolution=sim["probe_resolution"],
        seed=seed,
    )
    pattern_unit, branching = simulate_hawkes(
        design, baseline, trigger, kernel, basis, sim_cfg, rng
    )

    # map the unit pattern onto the configured window for the raw schema
    dom = cfg.domain()
    span = cfg.span_days()
    t_days = _strictify(pattern_unit.times * span)
    lon = dom.x_range[0] + pattern_unit.xs * (dom.x_range[1] - dom.x_range[0])
    lat = dom.y_range[0] + pattern_unit.ys * (dom.y_range[1] - dom.y_range[0])
    pattern = PointPattern.from_arrays(
        t_days, lon, lat, pattern_unit.marks, dom, ids=pattern_unit.ids
    )

    out = _outdir(args)
    dataio.emit_events(out / "events.csv", pattern, cfg.epoch())
    dataio.write_parents(out / "parents.csv", pattern, branching)
    dataio.dump_json(out / "truth.json", {
        "seed": int(seed),
        "mu_star": sim["mu_star"],
        "amplitude": sim["amplitude"],
        "log_amplitude": math.log(sim["amplitude"]),
        "gamma": sim["gamma"],
        "kernel": sim["kernel"],
        "l_t": sim["l_t"],
        "l_s": sim["l_s"],
        "alpha_s": sim["alpha_s"],
        "grid_resolution": sim["grid_resolution"],
        "rank": int(basis.rank),
        "omega": [float(v) for v in omega],
        "n_events": len(pattern),
        "n_background": int(branching.background_indices.size),
    })
    cfg.dump(out / "config.ini")
    print(f"simulated {len(pattern)} events "
          f"({branching.background_indices.size} background) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# marks


def _mark_ints(pattern: PointPattern) -> np.ndarray:
    marks = pattern.marks
    if np.any(marks != np.floor(marks)):
        raise ValueError(
            "mark model commands need integer casualty marks; "
            "this pattern carries continuous marks"
        )
    return marks.astype(int)


def _cmd_select_marks(args) -> int:
    cfg = _config_from(args)
    pattern, report = _ingest(args, cfg)
    marks = _mark_ints(pattern)
    mk = cfg.sections["marks"]
    rng = np.random.default_rng(args.seed if args.seed is not None else mk["seed"])
    rows = aic_table(
        marks,
        body_families=tuple(_str_list(mk["bodies"])),
        tail_families=tuple(_str_list(mk["tails"])),
        thresholds=tuple(_int_list(mk["thresholds"])),
        rng=rng,
        restarts=mk["restarts"],
    )
    out = _outdir(args)
    cols = ("body", "tail", "threshold", "loglik", "aic", "n_params",
            "converged", "flags", "error", "best")
    with open(out / "marks_aic.csv", "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            cells = []
            for c in cols:
                v = row[c]
                if isinstance(v, bool):
                    cells.append("true" if v else "false")
                elif isinstance(v, float):
                    cells.append(format_float(v))
                else:
                    cells.append(str(v))
            fh.write(",".join(cells) + "\n")
    best = rows[0]
    dataio.dump_json(out / "best.json", {
        "body": best["body"],
        "tail": best["tail"],
        "threshold": best["threshold"],
        "aic": best["aic"],
        "ingest": report.as_dict(),
    })
    cfg.dump(out / "config.ini")
    print(f"best mark model: {best['body']}+{best['tail']} "
          f"at threshold {best['threshold']} (AIC {best['aic']:.2f})")
    return 0


def _mark_covariates(pattern_unit, fields) -> MarkCovariates:
    if fields:
        vals, dist = fields[0].nearest_value_dist(
            pattern_unit.xs, pattern_unit.ys, pattern_unit.times
        )
    else:
        vals = np.zeros(len(pattern_unit))
        dist = np.zeros(len(pattern_unit))
    return MarkCovariates(t=pattern_unit.times, pop=vals, dist=dist)


def _cmd_fit_marks(args) -> int:
    cfg = _config_from(args)
    pattern, report = _ingest(args, cfg)
    marks = _mark_ints(pattern)
    pattern_unit, scaler = scale_to_unit(pattern)
    fields = _fields_from(args, cfg, scaler)
    cov = _mark_covariates(pattern_unit, fields)
    mk = cfg.sections["marks"]
    seed = args.seed if args.seed is not None else mk["seed"]
    chain = mark_mh_sampler(
        marks, cov,
        threshold=mk["threshold"],
        n_samples=mk["n_samples"],
        burn_in=mk["burn_in"],
        thin=mk["thin"],
        seed=seed,
        step=mk["step"],
    )
    out = _outdir(args)
    with open(out / "mark_chain.csv", "w", newline="\n") as fh:
        fh.write(",".join(chain.names) + ",loglik,logpost\n")
        for row, ll, lp in zip(chain.samples, chain.loglik, chain.logpost):
            cells = [format_float(v) for v in row]
            fh.write(",".join(cells) + f",{format_float(ll)},{format_float(lp)}\n")
    dataio.dump_json(out / "mark_fit.json", {
        "threshold": chain.threshold,
        "accept_rate": chain.accept_rate,
        "n_retained": int(len(chain.samples)),
        "dic": dic(chain, marks, cov),
        "map_loglik": float(chain.loglik[chain.map_index()]),
        "ingest": report.as_dict(),
    })
    cfg.dump(out / "config.ini")
    print(f"mark regression: {len(chain.samples)} retained draws, "
          f"accept rate {chain.accept_rate:.2f} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# intensity fitting


def _cmd_fit_intensity(args) -> int:
    cfg = _config_from(args)
    pattern, report = _ingest(args, cfg)
    pattern_unit, scaler = scale_to_unit(pattern)
    fields = _fields_from(args, cfg, scaler)
    design = _design_from(cfg, fields)
    mc = cfg.sections["mcmc"]
    out = _outdir(args)
    seed = args.seed if args.seed is not None else mc["seed"]
    mcmc_cfg = McmcConfig(
        n_samples=mc["n_samples"],
        burn_in=mc["burn_in"],
        thin=mc["thin"],
        seed=seed,
        baseline_update=mc["baseline_update"],
        grid_resolution=mc["grid_resolution"],
        rank=mc["rank"],
        n_particles=mc["n_particles"],
        kernel_family=mc["kernel"],
        hmc_n_steps=mc["hmc_n_steps"],
        hmc_step_size=mc["hmc_step_size"],
        mark_mode=mc["mark_mode"],
        likelihood_off=mc["likelihood_off"],
        checkpoint_every=mc["checkpoint_every"],
        checkpoint_path=str(out / "checkpoint.pkl") if mc["checkpoint_every"] else None,
    )
    chain = run_hybrid_mcmc(pattern_unit, design, mcmc_cfg)
    chain.to_csv(out / "chain.csv")
    _write_summary_csv(out / "summary.csv", chain)
    dataio.dump_json(out / "chain_meta.json", {
        "n_events": len(pattern_unit),
        "kernel_family": mc["kernel"],
        "grid_resolution": mc["grid_resolution"],
        "rank": mc["rank"],
        "n_retained": int(len(chain.samples)),
        "accept_rates": {k: float(v) for k, v in chain.accept_rates.items()},
        "scaler": {
            "t0": scaler.t0, "t_scale": scaler.t_scale,
            "x0": scaler.x0, "x_scale": scaler.x_scale,
            "y0": scaler.y0, "y_scale": scaler.y_scale,
            "mark_ceiling": scaler.mark_ceiling,
        },
        "design": {
            "spatial_poly": design.spatial_poly,
            "fields": [f.name for f in design.fields],
        },
        "ingest": report.as_dict(),
    })
    cfg.dump(out / "config.ini")
    print(f"retained {len(chain.samples)} draws over {len(chain.names)} parameters "
          f"-> {out}")
    return 0


# ---------------------------------------------------------------------------
# prediction


def _cmd_predict(args) -> int:
    cfg = _config_from(args)
    pattern, _ = _ingest(args, cfg)
    pattern_unit, scaler = scale_to_unit(pattern)
    fields = _fields_from(args, cfg, scaler)
    design = _design_from(cfg, fields)

    chain_dir = Path(args.chain)
    chain_csv = chain_dir / "chain.csv" if chain_dir.is_dir() else chain_dir
    chain = PosteriorChain.from_csv(chain_csv)
    meta_path = chain_csv.parent / "chain_meta.json"
    if meta_path.exists():
        with open(meta_path) as fh:
            meta = json.load(fh)
    else:
        meta = {}
    kernel_family = meta.get("kernel_family", cfg.get("mcmc", "kernel"))
    grid_resolution = int(meta.get("grid_resolution", cfg.get("mcmc", "grid_resolution")))
    rank = int(meta.get("rank", cfg.get("mcmc", "rank")))

    gr = cfg.sections["grid"]
    spec = GridSpec(cell_x=gr["cell_lon"], cell_y=gr["cell_lat"],
                    n_time_samples=gr["time_samples"])
    k = args.mark_threshold if args.mark_threshold is not None else gr["mark_threshold"]
    years = _int_list(args.years)
    if not years:
        raise ValueError("no years requested")
    year_len = gr["year_length_days"]
    seed = args.seed if args.seed is not None else gr["seed"]

    mark_model = None
    if k > 0:
        mk = cfg.sections["marks"]
        fit = mle_fit(
            _mark_ints(pattern),
            body_family=_str_list(mk["bodies"])[0],
            tail_family=_str_list(mk["tails"])[0],
            threshold=mk["threshold"],
            rng=np.random.default_rng(seed),
        )
        mark_model = fit.mixture

    out = _outdir(args)
    meta_out = {"years": {}, "mark_threshold": int(k)}
    for yi in years:
        yearly = yearly_grid(
            pattern_unit, scaler, design, chain,
            year_start_day=yi * year_len,
            year_length_days=year_len,
            spec=spec,
            seed=seed + yi,
            kernel_family=kernel_family,
            grid_resolution=grid_resolution,
            rank=rank,
            max_rows=gr["max_rows"],
        )
        dataio.write_grid_csv(out / f"yearly_y{yi}.csv", yearly)
        dataio.write_pgm(out / f"yearly_y{yi}.pgm", yearly)
        entry = {"expected_events": yearly.total}
        if k > 0:
            extreme = extreme_grid(yearly, mark_model, k)
        else:
            extreme = extreme_grid(
                yearly,
                MarkMixture(1.0, 0, ZeroInflatedBody("zip", 0.5, beta=1.0),
                            ExtremeTail("gzd", 0.5, 1.0)),
                0,
            )
        dataio.write_grid_csv(out / f"extreme_y{yi}.csv", extreme)
        dataio.write_pgm(out / f"extreme_y{yi}.pgm", extreme)
        entry["expected_extreme_events"] = extreme.total
        entry["exceedance_prob"] = extreme.meta["exceedance_prob"]
        meta_out["years"][str(yi)] = entry
    dataio.dump_json(out / "predict_meta.json", meta_out)
    cfg.dump(out / "config.ini")
    print(f"wrote {len(years)} yearly/extreme grid pairs -> {out}")
    return 0


# ---------------------------------------------------------------------------
# diagnostics and exploration


def _cmd_diagnose(args) -> int:
    chain_dir = Path(args.chain)
    chain_csv = chain_dir / "chain.csv" if chain_dir.is_dir() else chain_dir
    chain = PosteriorChain.from_csv(chain_csv)
    if len(chain.samples) == 0:
        raise ValueError("chain has no retained rows")
    out = _outdir(args)
    _write_summary_csv(out / "summary.csv", chain)
    stats = summarize(chain)
    ess = {name: float(s.ess) for name, s in stats.items()}
    dataio.dump_json(out / "diagnostics.json", {
        "n_retained": int(len(chain.samples)),
        "n_parameters": int(len(chain.names)),
        "ess_min": min(ess.values()),
        "ess_median": float(np.median(list(ess.values()))),
        "ess": ess,
        "map_index": chain.map_index(),
        "log_post_max": float(chain.log_post[chain.map_index()]),
    })
    print(f"diagnosed {len(chain.samples)} draws; "
          f"min ESS {min(ess.values()):.1f} -> {out}")
    return 0


def _cmd_explore(args) -> int:
    cfg = _config_from(args)
    pattern, report = _ingest(args, cfg)
    marks = pattern.marks
    out = _outdir(args)

    uniq = np.unique(marks)
    with open(out / "marks_hist.csv", "w", newline="\n") as fh:
        fh.write("mark,count\n")
        if uniq.size <= 50:
            for v in uniq:
                fh.write(f"{format_float(v)},{int((marks == v).sum())}\n")
        else:
            counts, edges = np.histogram(marks, bins=20)
            for c, lo in zip(counts, edges[:-1]):
                fh.write(f"{format_float(lo)},{int(c)}\n")

    counts, edges = np.histogram(pattern.times, bins=20)
    with open(out / "time_hist.csv", "w", newline="\n") as fh:
        fh.write("bin_start_day,bin_end_day,count\n")
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            fh.write(f"{format_float(lo)},{format_float(hi)},{int(c)}\n")

    dataio.dump_json(out / "report.json", {
        "n_events": len(pattern),
        "time_range_days": [float(pattern.times.min()), float(pattern.times.max())],
        "lon_range": [float(pattern.xs.min()), float(pattern.xs.max())],
        "lat_range": [float(pattern.ys.min()), float(pattern.ys.max())],
        "mark_max": float(marks.max()),
        "mark_mean": float(marks.mean()),
        "mark_zero_fraction": float((marks == 0).mean()),
        "ingest": report.as_dict(),
    })
    cfg.dump(out / "config.ini")
    print(f"explored {len(pattern)} events -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="seppx",
        description="Marked self-exciting point process toolkit",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, events=False, chain=False, covariates=False,
            config=True):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        if config:
            sp.add_argument("--config", help="INI config file (defaults apply if omitted)")
        if events:
            sp.add_argument("--events", required=True, help="events CSV")
        if covariates:
            sp.add_argument("--covariates", help="covariates CSV (optional)")
        if chain:
            sp.add_argument("--chain", required=True,
                            help="chain.csv or the directory holding it")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the command's config seed")
        return sp

    add("simulate", _cmd_simulate, "simulate a synthetic catalog")
    add("explore", _cmd_explore, "summary statistics of a catalog", events=True)
    add("select-marks", _cmd_select_marks, "AIC scan over mark models", events=True)
    add("fit-marks", _cmd_fit_marks, "Bayesian mark regression", events=True,
        covariates=True)
    add("fit-intensity", _cmd_fit_intensity, "hybrid MCMC on the intensity",
        events=True, covariates=True)
    sp = add("predict", _cmd_predict, "yearly and extreme-event risk grids",
             events=True, chain=True, covariates=True)
    sp.add_argument("--years", default="0",
                    help="comma-separated year indices from the window start")
    sp.add_argument("--mark-threshold", type=int, default=None,
                    help="override grid.mark_threshold")
    add("diagnose", _cmd_diagnose, "chain summaries and effective sizes",
        chain=True, config=False)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # structured error contract for scripting
        payload = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
