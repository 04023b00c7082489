"""Experiment runner: ``mfgldp <scenario> --config <path> [--seed] [--out] [--threads]``.

Each run writes ``manifest.json`` (config echo, version, seed, status)
before computing, the scenario CSVs, and a ``COMPLETE`` marker at the end.
Exit status: 0 success, 2 validation failure, 3 numerical failure.
The thread count only affects speed, so it is not part of the manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from .errors import MfgLdpError, NumericalFailure, SpecError

log = logging.getLogger("mfgldp")

SCENARIOS = ("solve-mfg", "solve-nplayer", "residuals", "chaos", "ldp-tail", "ldp-laplace", "coop", "validate")
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

# catalog defaults: kappa = unforced terminal mean + shift
FUNCTIONAL_DEFAULTS = {
    "quadratic": {"shift": 0.5, "lam": 0.25},
    "exceedance": {"shift": 0.1, "h": 0.05, "width": 0.05},
}


@dataclass
class ExperimentConfig:
    spec: dict
    scenario: str | None = None
    Ns: list = field(default_factory=lambda: [8, 16, 32, 64, 128, 256])
    K: int = 4000
    K_sim: int = 50
    nash_K: int = 1000
    reps: int = 200
    seed: int = 0
    deltas: object = "auto"
    functionals: list = field(default_factory=lambda: ["quadratic", "exceedance"])
    monotone: bool = False
    out: str | None = None

    def validate(self) -> None:
        from .model import spec_from_dict

        if self.scenario is not None and self.scenario not in SCENARIOS:
            raise SpecError(f"unknown scenario {self.scenario!r}")
        if not isinstance(self.spec, dict):
            raise SpecError("spec must be a JSON object")
        spec_from_dict(self.spec)
        if not self.Ns or any(int(n) != n or n < 1 for n in self.Ns):
            raise SpecError("Ns must be a non-empty list of positive integers")
        for name in ("K", "K_sim", "nash_K", "reps"):
            if int(getattr(self, name)) < 2:
                raise SpecError(f"{name} must be an integer >= 2")
        if not 0 <= int(self.seed) < 2**64:
            raise SpecError("seed must be an unsigned 64-bit integer")
        if self.deltas != "auto" and (not isinstance(self.deltas, list) or any(d < 0 for d in self.deltas)):
            raise SpecError("deltas must be 'auto' or a list of nonnegative numbers")
        for F in self.functionals:
            kind = F if isinstance(F, str) else F.get("kind") if isinstance(F, dict) else None
            if kind not in ("zero", "constant", "quadratic", "exceedance"):
                raise SpecError(f"unknown functional {F!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise SpecError(f"unknown config keys {sorted(extra)}")
        if "spec" not in d:
            raise SpecError("config needs a spec")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise SpecError(f"config is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise SpecError("config must be a JSON object")
        return cls.from_dict(d)

    def game(self):
        """The game spec, with the large-horizon monotone variant applied if flagged."""
        from .model import spec_from_dict

        spec = spec_from_dict(self.spec)
        if self.monotone:
            if spec.family != "systemic_risk":
                raise SpecError("the monotone variant is defined for systemic risk")
            spec = replace(spec, a=max(spec.a, 2.0), T=2.0)
        return spec


def default_scenario(monotone: bool = False) -> ExperimentConfig:
    """Canonical systemic-risk configuration."""
    spec = {"family": "systemic_risk", "a": 0.5, "q": 0.8, "eps": 1.0, "c": 0.5,
            "sigma": 1.0, "T": 0.5, "x0": 0.0}
    return ExperimentConfig(spec=spec, monotone=monotone)


def version() -> str:
    """``<package version>-g<commit>[-dirty]`` when run from a git checkout."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here, capture_output=True,
                              text=True, timeout=10, check=True).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        return __version__
    return f"{__version__}-g{desc}" if desc else __version__


# --- scenarios ---------------------------------------------------------------

def _functionals(cfg, reference):
    from .ldp import mean_functional

    out = []
    for F in cfg.functionals:
        params = dict(FUNCTIONAL_DEFAULTS.get(F, {})) if isinstance(F, str) else dict(F)
        kind = F if isinstance(F, str) else params.pop("kind")
        shift = params.pop("shift", 0.0)
        out.append(mean_functional(kind, reference, shift, **params))
    return out


def _write_flow_csv(path, flow):
    with open(path, "w") as fh:
        fh.write("t,mean,var\n")
        for row in zip(flow.grid, flow.mX, flow.varX):
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def run_solve_mfg(cfg, spec, out, threads, summary):
    from .mfg_solver import master_pde_residual, solve_decoupling_field, solve_mean_flow

    fld = solve_decoupling_field(spec, cfg.K)
    flow = solve_mean_flow(spec, fld)
    fld.to_csv(os.path.join(out, "field.csv"))
    _write_flow_csv(os.path.join(out, "mean_flow.csv"), flow)
    rng = np.random.default_rng(cfg.seed)
    samples = np.column_stack([rng.uniform(0, spec.T, 100), rng.normal(size=100), rng.normal(size=100)])
    summary["max_pde_residual"] = float(np.max(np.abs(master_pde_residual(spec, fld, samples))))
    return ["field.csv", "mean_flow.csv"]


def run_solve_nplayer(cfg, spec, out, threads, summary):
    from .nplayer import check_ansatz, foc_residual, solve_nplayer_nash
    from .particle import BrownianBundle, simulate_equilibrium

    files = []
    for N in cfg.Ns:
        nf = solve_nplayer_nash(spec, N, cfg.nash_K, seed=cfg.seed)
        bundle = BrownianBundle.generate(cfg.seed, N, cfg.K_sim, spec.T, reps=cfg.reps, threads=threads)
        ens = simulate_equilibrium(spec, nf, bundle)
        name = f"nplayer_N{N}"
        ens.to_csv(os.path.join(out, name + ".csv"))
        ens.to_binary(os.path.join(out, name + ".bin"))
        files += [name + ".csv", name + ".bin", name + ".bin.json"]
        summary[f"ansatz_remainder_N{N}"] = check_ansatz(nf, seed=cfg.seed)
        summary[f"max_foc_residual_N{N}"] = float(np.max(np.abs(foc_residual(spec, nf, ens))))
    return files


def run_residuals(cfg, spec, out, threads, summary):
    from .nplayer import compute_residuals, loglog_slope, solve_nplayer_nash, write_residual_csv
    from .particle import BrownianBundle, simulate_equilibrium

    rows = []
    for N in cfg.Ns:
        nf = solve_nplayer_nash(spec, N, cfg.nash_K, seed=cfg.seed)
        bundle = BrownianBundle.generate(cfg.seed, N, cfg.K_sim, spec.T, reps=cfg.reps, threads=threads)
        res = compute_residuals(spec, nf, simulate_equilibrium(spec, nf, bundle))
        # replication means of the per-path maxima
        rows.append([N, res.max_eps.mean(), res.max_zeta.mean(), res.max_gamma.mean(), res.total.mean()])
    slope = loglog_slope(cfg.Ns, [r[4] for r in rows]) if len(rows) > 1 else float("nan")
    write_residual_csv(os.path.join(out, "residuals.csv"), [r[:4] + [slope] for r in rows])
    summary["fitted_slope"] = slope
    return ["residuals.csv"]


def run_chaos(cfg, spec, out, threads, summary):
    from .mfg_solver import solve_decoupling_field, solve_mean_flow
    from .particle import chaos_experiment

    fld = solve_decoupling_field(spec, cfg.K)
    flow = solve_mean_flow(spec, fld)
    Ns, means, errs, slope = chaos_experiment(spec, fld, flow, cfg.Ns, cfg.reps, cfg.seed, cfg.K_sim, threads)
    with open(os.path.join(out, "chaos.csv"), "w") as fh:
        fh.write("N,mean_w2sq,stderr,fitted_slope\n")
        for N, m, e in zip(Ns, means, errs):
            fh.write(f"{int(N)},{m!r},{e!r},{slope!r}\n")
    summary["fitted_slope"] = slope
    return ["chaos.csv"]


def run_ldp_tail(cfg, spec, out, threads, summary):
    from .ldp import calibrate_delta, mann_kendall_upward, nash_vs_auxiliary, tail_table
    from .mfg_solver import solve_decoupling_field

    fld = solve_decoupling_field(spec, cfg.K)
    samples = {N: nash_vs_auxiliary(spec, fld, N, cfg.reps, cfg.seed, cfg.K_sim, threads, cfg.nash_K)
               for N in cfg.Ns}
    if cfg.deltas == "auto":
        # pilot on independent noise so that the threshold does not depend on the sample it is applied to
        pilot = nash_vs_auxiliary(spec, fld, min(cfg.Ns), cfg.reps, cfg.seed + 1, cfg.K_sim, threads, cfg.nash_K)
        deltas = [calibrate_delta(pilot, 0.8)]
    else:
        deltas = [float(d) for d in cfg.deltas]
    report = tail_table(samples, deltas)
    p99 = []
    for N in sorted(samples):
        p99.append(float(np.quantile(N * samples[N] ** 2, 0.99)))
        report.add(kind="coupling", N=N, delta_or_F="N*sup_t W2^2 (99th pct)", estimate=p99[-1])
    report.to_csv(os.path.join(out, "ldp_tail.csv"))
    summary["deltas"] = deltas
    summary["mann_kendall_p"] = mann_kendall_upward(p99) if len(p99) > 2 else float("nan")
    summary["fits"] = {f"{k[0]}@{k[1]!r}": v for k, v in report.fits.items()}
    return ["ldp_tail.csv"]


def run_ldp_laplace(cfg, spec, out, threads, summary):
    from .ldp import LdpReport, RateProblem, estimate_laplace, mean_functional
    from .mfg_solver import solve_decoupling_field

    fld = solve_decoupling_field(spec, cfg.K)
    report = LdpReport()
    ref = RateProblem(spec, fld, mean_functional("zero"), K=cfg.K_sim).unforced_mean
    for F in _functionals(cfg, ref):
        prob = RateProblem(spec, fld, F, K=cfg.K_sim)
        report.extend(estimate_laplace(prob, cfg.Ns, cfg.reps, cfg.seed, systems=("auxiliary", "equilibrium"),
                                       K_sim=cfg.K_sim, threads=threads, nash_K=cfg.nash_K))
    report.to_csv(os.path.join(out, "ldp_laplace.csv"))
    return ["ldp_laplace.csv"]


def run_coop(cfg, spec, out, threads, summary):
    from .coop import coop_ldp_experiment, coop_pde_residual, solve_coop, stationarity_check

    sol = solve_coop(spec, cfg.K)
    sol.field.to_csv(os.path.join(out, "coop_field.csv"))
    rng = np.random.default_rng(cfg.seed)
    samples = np.column_stack([rng.uniform(0, spec.T, 100), rng.normal(size=100), rng.normal(size=100)])
    summary["max_pde_residual"] = float(np.max(np.abs(coop_pde_residual(spec, sol.field, samples))))
    diff, curv = stationarity_check(spec, sol)
    summary["stationarity_difference"] = diff
    summary["stationarity_curvature"] = curv
    deltas = (1e-6, 1e-3) if cfg.deltas == "auto" else tuple(cfg.deltas)
    functionals = _functionals(cfg, float(sol.flow.mX[-1]))
    report = coop_ldp_experiment(spec, cfg.Ns, cfg.reps, cfg.seed, functionals, deltas, cfg.K_sim, threads, cfg.K)
    report.to_csv(os.path.join(out, "coop.csv"))
    return ["coop_field.csv", "coop.csv"]


def run_validate(cfg, spec, out, threads, summary):
    from .mfg_solver import solve_decoupling_field
    from .model import check_assumptions

    checks = check_assumptions(spec, seed=cfg.seed)
    try:
        solve_decoupling_field(spec, cfg.K)
        checks["riccati"] = {"pass": True, "detail": f"solvable on [0, {spec.T:g}] with K={cfg.K}"}
    except NumericalFailure as e:
        checks["riccati"] = {"pass": False, "detail": str(e)}
    with open(os.path.join(out, "validate.csv"), "w") as fh:
        fh.write("check,pass,detail\n")
        for name in sorted(checks):
            fh.write(f"{name},{checks[name]['pass']},\"{checks[name]['detail']}\"\n")
    summary["checks"] = checks
    required = ["A1", "A2", "A3", "A4", "A5", "riccati"] + (["A8"] if cfg.monotone else [])
    summary["valid"] = all(checks[k]["pass"] for k in required)
    return ["validate.csv"]


RUNNERS = {
    "solve-mfg": run_solve_mfg, "solve-nplayer": run_solve_nplayer, "residuals": run_residuals,
    "chaos": run_chaos, "ldp-tail": run_ldp_tail, "ldp-laplace": run_ldp_laplace,
    "coop": run_coop, "validate": run_validate,
}


# --- driver ------------------------------------------------------------------

def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_manifest(out, manifest):
    tmp = os.path.join(out, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1, default=float)
        fh.write("\n")
    os.replace(tmp, os.path.join(out, "manifest.json"))


def run(cfg: ExperimentConfig, scenario: str | None = None, out: str | None = None, threads: int = 1) -> int:
    """Execute one scenario; returns the exit status."""
    scenario = scenario or cfg.scenario
    out = out or cfg.out or "."
    os.makedirs(out, exist_ok=True)
    marker = os.path.join(out, "COMPLETE")
    if os.path.exists(marker):
        os.remove(marker)
    manifest = {"scenario": scenario, "version": version(), "seed": cfg.seed,
                "config": asdict(replace(cfg, scenario=scenario, out=None)), "status": "running"}
    _write_manifest(out, manifest)
    summary = {}
    try:
        if scenario not in RUNNERS:
            raise SpecError(f"unknown scenario {scenario!r}")
        cfg.validate()
        files = RUNNERS[scenario](cfg, cfg.game(), out, threads, summary)
        code = EXIT_OK
        if scenario == "validate" and not summary["valid"]:
            code = EXIT_INVALID
        manifest.update(status="complete" if code == EXIT_OK else "invalid",
                        outputs={f: _sha256(os.path.join(out, f)) for f in files})
    except NumericalFailure as e:
        code = EXIT_NUMERICAL
        manifest.update(status="numerical_failure", error={"type": type(e).__name__, "message": str(e)})
    except (MfgLdpError, TypeError, ValueError) as e:
        code = EXIT_INVALID
        manifest.update(status="invalid", error={"type": type(e).__name__, "message": str(e)})
    manifest.update(summary=summary, exit_code=code)
    _write_manifest(out, manifest)
    with open(marker, "w") as fh:
        fh.write(f"{manifest['status']}\n")
    return code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mfgldp", description=__doc__.splitlines()[0])
    ap.add_argument("scenario", choices=SCENARIOS)
    ap.add_argument("--config", help="JSON experiment config (default: built-in systemic-risk config)")
    ap.add_argument("--seed", type=int, help="unsigned 64-bit seed, overrides the config")
    ap.add_argument("--out", help="output directory (default: config 'out' or the current directory)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for noise generation")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    try:
        if args.config:
            with open(args.config) as fh:
                cfg = ExperimentConfig.from_json(fh.read())
        else:
            cfg = default_scenario()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
    except (OSError, SpecError, TypeError) as e:
        print(f"mfgldp: invalid config: {e}", file=sys.stderr)
        return EXIT_INVALID
    if args.threads < 1:
        print("mfgldp: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    code = run(cfg, args.scenario, args.out, args.threads)
    log.info("scenario %s finished with exit status %d", args.scenario, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
