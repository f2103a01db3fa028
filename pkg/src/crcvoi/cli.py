"""Command-line pipeline: targets, calibration, validation, PSA, EVPI, report."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import stats as sps

from crcvoi import __version__, parallel
from crcvoi.config import ConfigError, RunConfig, load_config
from crcvoi.imis import calibrate, posterior_predictive, posterior_summary, read_posterior, write_posterior
from crcvoi.psa import (
    EvpiCurve,
    build_draws,
    evpi_curve,
    external_means,
    read_psa_csv,
    run_psa,
    write_evpi,
)
from crcvoi.screening import compare, incremental
from crcvoi.targets import TARGET_TYPES, generate_targets, read_targets, write_targets

log = logging.getLogger("crcvoi")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _stamp(cfg: RunConfig) -> str:
    return f"# config_hash={cfg.digest()} seed={cfg.seed}\n"


def _stamped_write(path: Path, cfg: RunConfig, body_writer) -> None:
    """Write a CSV whose first line records the config hash and seed."""
    with open(path, "w", newline="") as fh:
        fh.write(_stamp(cfg))
        body_writer(fh)


def _prepend_stamp(path: Path, cfg: RunConfig) -> None:
    text = path.read_text()
    path.write_text(_stamp(cfg) + text)


def _fmt(x) -> str:
    return repr(float(x))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _provenance(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.digest(), "seed": cfg.seed, "version": __version__}


# -- subcommands ---------------------------------------------------------------

def cmd_simulate_targets(cfg: RunConfig, out: Path, args) -> None:
    tc = cfg.targets
    ts = generate_targets(cfg.true_nh(), cfg.life_table(), reps=tc.reps, n_adenoma=tc.n_adenoma,
                          n_cancer=tc.n_cancer, bins=tc.bins(), master_seed=cfg.seed, se_mode=tc.se_mode,
                          workers=args.workers)
    path = out / "targets.csv"
    write_targets(ts, path, extra_meta=_provenance(cfg))
    _prepend_stamp(path, cfg)
    print(f"{'target_type':<20}{'bin':>8}{'mean':>14}{'se':>12}")
    for t in ts.targets:
        b = str(t.bin_lo) if t.bin_lo == t.bin_hi else f"{t.bin_lo}-{t.bin_hi}"
        print(f"{t.target_type:<20}{b:>8}{t.mean:>14.5g}{t.se:>12.4g}")
    print(f"wrote {path}")


def _density_grid(cfg: RunConfig, ps, n_grid: int = 200):
    rows = []
    for j, (name, spec) in enumerate(zip(ps.names, cfg.prior_set())):
        x = ps.theta[:, j]
        lo = min(float(spec.ppf(0.005)), float(x.min()))
        hi = max(float(spec.ppf(0.995)), float(x.max()))
        grid = np.linspace(lo, hi, n_grid)
        if np.ptp(x) > 0:
            post = sps.gaussian_kde(x)(grid)
        else:
            post = np.zeros(n_grid)
        prior = spec.pdf(grid)
        rows.extend((name, g, p, q) for g, p, q in zip(grid, prior, post))
    return rows


def cmd_calibrate(cfg: RunConfig, out: Path, args) -> None:
    targets = read_targets(args.targets)
    ps = calibrate(cfg.prior_set(), targets, cfg.life_table(), cfg.imis.to_imis(cfg.seed), base=cfg.base_nh(),
                   workers=args.workers)
    csv_path, json_path = out / "posterior.csv", out / "posterior.json"
    write_posterior(ps, csv_path, json_path, extra={**_provenance(cfg), "targets": Path(args.targets).name,
                                                    "targets_sha256": _sha256(args.targets)})
    _prepend_stamp(csv_path, cfg)

    summary, corr = posterior_summary(ps)

    def write_summary(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "mean", "sd", "map", "cri_lb", "cri_ub"])
        for name, r in summary.iterrows():
            w.writerow([name, *(_fmt(r[c]) for c in ("mean", "sd", "map", "cri_lb", "cri_ub"))])

    def write_corr(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", *corr.columns])
        for name, r in corr.iterrows():
            w.writerow([name, *(_fmt(v) for v in r)])

    def write_density(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "x", "prior_density", "posterior_density"])
        for name, x, p, q in _density_grid(cfg, ps):
            w.writerow([name, _fmt(x), _fmt(p), _fmt(q)])

    def write_points(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point", *ps.names, "log_lik", "log_prior", "weight"])
        for i in range(len(ps.points)):
            w.writerow([i, *(_fmt(v) for v in ps.points[i]), _fmt(ps.log_lik[i]), _fmt(ps.log_prior[i]),
                        _fmt(ps.weights[i])])

    _stamped_write(out / "posterior_summary.csv", cfg, write_summary)
    _stamped_write(out / "posterior_corr.csv", cfg, write_corr)
    _stamped_write(out / "prior_posterior_density.csv", cfg, write_density)
    _stamped_write(out / "imis_points.csv", cfg, write_points)
    print(summary.to_string(float_format=lambda v: f"{v:.4g}"))
    print(f"ESS={ps.ess:.1f} unique={ps.unique_count} iterations={ps.iterations_run} converged={ps.converged}")


def _load_posterior(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"posterior file not found: {path}")
    return read_posterior(path)


VALIDATION_COLUMNS = ["target_type", "bin", "target_mean", "target_lb", "target_ub", "pred_mean", "pi_lb", "pi_ub"]


def validation_rows(targets, bands):
    lookup = {(r.target_type, r.bin_lo, r.bin_hi): r for r in bands.itertuples()}
    rows = []
    for t in targets.targets:
        b = lookup[(t.target_type, t.bin_lo, t.bin_hi)]
        label = str(t.bin_lo) if t.bin_lo == t.bin_hi else f"{t.bin_lo}-{t.bin_hi}"
        rows.append([t.target_type, label, t.mean, t.mean - 1.96 * t.se, t.mean + 1.96 * t.se,
                     b.pred_mean, b.pi_lb, b.pi_ub])
    return rows


def cmd_validate(cfg: RunConfig, out: Path, args) -> None:
    ps = _load_posterior(args.posterior)
    targets = read_targets(args.targets)
    bands = posterior_predictive(ps, cfg.life_table(), cfg.validate_.n_per_draw, targets.bins, cfg.seed,
                                 base=cfg.base_nh(), workers=args.workers, max_draws=cfg.validate_.max_draws)
    rows = validation_rows(targets, bands)

    def body(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VALIDATION_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1], *(_fmt(v) for v in r[2:])])

    _stamped_write(out / "validation.csv", cfg, body)
    inside = sum(r[6] <= r[2] <= r[7] for r in rows)
    print(f"{inside}/{len(rows)} target means inside their 95% posterior predicted interval")


def cmd_psa(cfg: RunConfig, out: Path, args) -> None:
    ps = _load_posterior(args.posterior)
    pc = cfg.psa
    approaches = pc.approach_list()
    if not approaches:
        raise ConfigError("psa.approaches is empty")
    specs = cfg.cea.specs()
    strat = cfg.cea.strategy.to_strategy()
    lt = cfg.life_table()
    base_cea = cfg.cea.params()
    for a in approaches:
        draws = build_draws(a, ps, specs, pc.n_draws, cfg.seed, base_nh=cfg.base_nh(), base_cea=base_cea)
        res = run_psa(draws, strat, lt, pc.n_individuals, cfg.seed, approach=a.value, workers=args.workers)
        path = out / f"psa_{a.value}.csv"
        res.write_csv(path)
        _prepend_stamp(path, cfg)
        ppath = out / f"psa_params_{a.value}.csv"
        res.write_params_csv(ppath)
        _prepend_stamp(ppath, cfg)
        print(f"{a.value:<24} mean d_cost={res.d_cost.mean():>10.1f}  mean d_qaly={res.d_qaly.mean():.4f}  "
              f"sd d_cost={res.d_cost.std(ddof=1):.1f}  sd d_qaly={res.d_qaly.std(ddof=1):.4f}")

    # reference point: MAP calibrated values with external parameters at their means
    nh = cfg.base_nh().with_calibrated(ps.map_theta)
    none, screen = compare(nh, external_means(specs, base_cea), lt, pc.n_individuals, cfg.seed, 0, strat,
                           workers=args.workers)
    d_cost, d_qaly = incremental(screen, none)

    def body(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cost_none", "qaly_none", "cost_screen", "qaly_screen", "d_cost", "d_qaly"])
        w.writerow([_fmt(v) for v in (none.cost, none.qaly, screen.cost, screen.qaly, d_cost, d_qaly)])

    _stamped_write(out / "psa_map_reference.csv", cfg, body)
    print(f"MAP reference: d_cost={d_cost:.1f} d_qaly={d_qaly:.4f}")


def cmd_evpi(cfg: RunConfig, out: Path, args) -> None:
    results = {}
    for p in args.psa:
        if not Path(p).is_file():
            raise FileNotFoundError(f"PSA file not found: {p}")
        results.update(read_psa_csv(p))
    if not results:
        raise ValueError("no PSA results to evaluate")
    grid = cfg.psa.wtp_grid()
    curves: list[EvpiCurve] = []
    for approach in sorted(results):
        res = results[approach]
        c = evpi_curve(res, grid)
        curves.append(c)
        path = out / f"evpi_{approach}.csv"
        write_evpi([c], path)
        _prepend_stamp(path, cfg)
        wtp, peak = c.peak
        print(f"{approach:<24} peak EVPI={peak:>9.2f} at WTP={wtp:>9.0f}  breakeven WTP={res.breakeven_wtp():.0f}")
    write_evpi(curves, out / "evpi.csv")
    _prepend_stamp(out / "evpi.csv", cfg)


def _read_csv_rows(path: Path):
    with open(path, newline="") as fh:
        return list(csv.reader(line for line in fh if not line.startswith("#")))


def cmd_report(cfg: RunConfig, out: Path, args) -> None:
    src = Path(args.source) if args.source else out
    parts = [f"crcvoi report (config_hash={cfg.digest()} seed={cfg.seed})"]
    diag = src / "posterior.json"
    if diag.is_file():
        d = json.loads(diag.read_text())
        parts.append(f"IMIS: ESS={d['ess']:.1f} unique={d['unique_count']} iterations={d['iterations']} "
                     f"converged={d['converged']}")
    for name in ("posterior_summary.csv", "validation.csv", "psa_map_reference.csv"):
        p = src / name
        if p.is_file():
            parts.append(f"\n[{name}]")
            parts.extend(",".join(r) for r in _read_csv_rows(p))
    evpi = src / "evpi.csv"
    if evpi.is_file():
        rows = _read_csv_rows(evpi)[1:]
        parts.append("\n[EVPI peaks]")
        for approach in sorted({r[2] for r in rows}):
            sub = [(float(r[0]), float(r[1])) for r in rows if r[2] == approach]
            wtp, v = max(sub, key=lambda t: t[1])
            parts.append(f"{approach}: {v:.2f} at {wtp:.0f}")
    text = "\n".join(parts) + "\n"
    (out / "report.txt").write_text(text)
    print(text, end="")


COMMANDS = {
    "simulate-targets": cmd_simulate_targets,
    "calibrate": cmd_calibrate,
    "validate": cmd_validate,
    "psa": cmd_psa,
    "evpi": cmd_evpi,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (default: bundled)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, help="override seeds.master")
    common.add_argument("--workers", type=int, default=parallel.default_workers(), help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="crcvoi", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate-targets", parents=[common], help="simulate calibration targets at known parameters")
    c = sub.add_parser("calibrate", parents=[common], help="IMIS calibration to a target file")
    c.add_argument("--targets", required=True)
    v = sub.add_parser("validate", parents=[common], help="posterior-predictive check against targets")
    v.add_argument("--posterior", required=True)
    v.add_argument("--targets", required=True)
    s = sub.add_parser("psa", parents=[common], help="probabilistic sensitivity analysis")
    s.add_argument("--posterior", required=True)
    e = sub.add_parser("evpi", parents=[common], help="EVPI curves from PSA outputs")
    e.add_argument("--psa", nargs="+", required=True)
    r = sub.add_parser("report", parents=[common], help="concatenate run summaries")
    r.add_argument("--source", help="directory holding run outputs (default: --out)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_seed(args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.workers < 1:
        print("config error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error in {args.command}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
