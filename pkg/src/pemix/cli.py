"""
Command line entry point: ``pemix {check,simulate,couple,mixing,gramian}``.

Configuration is a flat ``key = value`` file.  Values are resolved in the
order defaults < config file < ``PEMIX_<KEY>`` environment variables <
command line flags, then validated as a whole.  The SHA-256 of the canonical
resolved config is written into every output file.

Exit codes: 0 ok, 1 failed assertion, 2 configuration error, 3 runtime or
numerical error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__
from .rednoise import RedNoiseSpec, draw_segment
from .spectral import GridSpec, basis_matrix, primed_norm, random_field, sobolev_norm
from .timestep import AbsorbingSetViolation, NonFiniteState, StepperConfig, dyadic_exponent

log = logging.getLogger("pemix")

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
ENV_PREFIX = "PEMIX_"


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key
        self.reason = reason


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s: str) -> Optional[float]:
    return None if s.strip().lower() in ("", "none") else float(s)


def _opt_str(s: str) -> Optional[str]:
    return None if s.strip().lower() in ("", "none") else s.strip()


# key -> (parser, default, description)
SCHEMA: Dict[str, tuple] = {
    "L": (float, 2 * math.pi, "horizontal period"),
    "h": (float, 2 * math.pi, "vertical period"),
    "Nx": (int, 16, "horizontal modes along x (even)"),
    "Ny": (int, 16, "horizontal modes along y (even)"),
    "Nz": (int, 9, "vertical cosine modes"),
    "m_sobolev": (int, 2, "Sobolev index m of the V^m norms"),
    "delta": (float, 0.1, "weight of the V^m part of the primed norm"),
    "dt": (float, 2.0**-7, "time step, 2^-p with p >= J_max"),
    "monitor_K": (_opt_float, None, "abort if the V^m norm exceeds this (none = off)"),
    "I_max": (int, 12, "number of forced modes"),
    "J_max": (int, 5, "Haar levels"),
    "alpha": (float, 1.0, "b_i = b0 i^-alpha"),
    "beta": (float, 0.5, "c_j = 2^(-beta j)"),
    "b0": (float, 0.5, "noise amplitude"),
    "noise": (_bool, True, "drive the chain with red noise"),
    "master_seed": (int, 0, "64-bit unsigned master seed"),
    "steps": (int, 50, "chain length (simulate, couple, mixing)"),
    "ensemble": (int, 64, "ensemble size (mixing)"),
    "burn_in": (int, 50, "reference chain burn-in (mixing)"),
    "thin": (int, 5, "reference chain thinning (mixing)"),
    "n_u0": (int, 3, "number of initial conditions (mixing)"),
    "u0_norm": (float, 2.0, "V^m norm of generated initial conditions"),
    "u0_modes": (int, 6, "initial conditions combine this many lowest modes"),
    "mixing_dt": (float, 2.0**-5, "time step of the mixing ensembles"),
    "coupling_distance": (float, 1e-3, "initial L^2 distance of the coupled pair"),
    "n_probe_modes": (int, 10, "spatial probe modes (gramian)"),
    "n_time_slots": (int, 4, "time slots per probe mode (gramian)"),
    "check_samples": (int, 200, "random samples per invariant (check)"),
    "workers": (int, 1, "processes for ensemble propagation"),
    "init": (_opt_str, None, "PEQS snapshot used as initial condition (simulate)"),
    "out": (str, "pemix-out", "output directory"),
}


@dataclass(frozen=True)
class RunConfig:
    values: Dict[str, Any]

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    @property
    def grid(self) -> GridSpec:
        v = self.values
        return GridSpec(v["L"], v["h"], v["Nx"], v["Ny"], v["Nz"], v["m_sobolev"], v["delta"])

    @property
    def noise_spec(self) -> Optional[RedNoiseSpec]:
        v = self.values
        if not v["noise"]:
            return None
        return RedNoiseSpec(v["I_max"], v["J_max"], v["alpha"], v["beta"], v["b0"], v["m_sobolev"])

    def stepper(self, dt: Optional[float] = None) -> StepperConfig:
        return StepperConfig(self.values["dt"] if dt is None else dt, 1.0, self.values["monitor_K"])

    def canonical(self) -> str:
        # ``out`` names where results go, not what they are
        return "".join(f"{k}={self.values[k]!r}\n" for k in sorted(self.values) if k != "out")

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def read_config_file(path) -> Dict[str, str]:
    raw: Dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror or exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}", "expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in raw:
            raise ConfigError(key, f"duplicate key at {path}:{lineno}")
        raw[key] = val
    return raw


def _env_overrides(environ) -> Dict[str, str]:
    lower = {k.lower(): k for k in SCHEMA}
    out = {}
    for name, val in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = lower.get(name[len(ENV_PREFIX):].lower())
        if key is None:
            raise ConfigError(name, "unknown configuration key in environment")
        out[key] = val
    return out


def parse_config(path=None, overrides: Optional[Dict[str, Any]] = None,
                 environ=None) -> RunConfig:
    """Resolve defaults, file, environment and ``overrides`` into a validated RunConfig.

    Raises
    ------
    ConfigError
        Unknown key, unparsable value, or a value violating an invariant.
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        raw.update(read_config_file(path))
    raw.update(_env_overrides(os.environ if environ is None else environ))
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    values = {k: spec[1] for k, spec in SCHEMA.items()}
    for key, val in raw.items():
        if key not in SCHEMA:
            raise ConfigError(key, "unknown configuration key")
        parser = SCHEMA[key][0]
        if isinstance(val, str):
            try:
                val = parser(val)
            except ValueError as exc:
                raise ConfigError(key, f"cannot parse {val!r}: {exc}") from exc
        values[key] = val
    _validate(values)
    return RunConfig(values)


def _validate(v: Dict[str, Any]) -> None:
    try:
        GridSpec(v["L"], v["h"], v["Nx"], v["Ny"], v["Nz"], v["m_sobolev"], v["delta"])
    except ValueError as exc:
        key = next((k for k in ("Nx", "Ny", "Nz", "m_sobolev", "delta") if k in str(exc)), "grid")
        raise ConfigError(key, str(exc)) from exc
    try:
        RedNoiseSpec(v["I_max"], v["J_max"], v["alpha"], v["beta"], v["b0"], v["m_sobolev"])
    except ValueError as exc:
        raise ConfigError("noise", str(exc)) from exc
    for key in ("dt", "mixing_dt"):
        p = dyadic_exponent(v[key])
        if p is None:
            raise ConfigError(key, f"{v[key]} is not 2^-p")
        if p < v["J_max"]:
            raise ConfigError(key, f"2^-{p} is coarser than the Haar resolution 2^-{v['J_max']}")
        if p < 2:
            raise ConfigError(key, "must be at most 1/4")
    if v["monitor_K"] is not None and not v["monitor_K"] > 0:
        raise ConfigError("monitor_K", "must be positive")
    if not 0 <= v["master_seed"] < 2**64:
        raise ConfigError("master_seed", "must be a 64-bit unsigned integer")
    for key, lo in (("steps", 1), ("ensemble", 32), ("burn_in", 0), ("thin", 1), ("n_u0", 1),
                    ("u0_modes", 1), ("n_probe_modes", 1), ("n_time_slots", 1),
                    ("check_samples", 1), ("workers", 1)):
        if v[key] < lo:
            raise ConfigError(key, f"must be >= {lo}")
    for key in ("u0_norm", "coupling_distance"):
        if not v[key] > 0:
            raise ConfigError(key, "must be positive")
    slot = 2.0 ** dyadic_exponent(v["dt"]) / v["n_time_slots"]
    if slot != int(slot):
        raise ConfigError("n_time_slots", "slots must hold a whole number of steps")


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _banner(cfg: RunConfig) -> str:
    return f"# pemix {__version__} config_sha256={cfg.hash}"


def _write_csv(path: Path, cfg: RunConfig, header: List[str], rows, footer=()) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_banner(cfg) + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
        for line in footer:
            fh.write(f"# {line}\n")


def _write_json(path: Path, cfg: RunConfig, payload: dict) -> None:
    doc = {"pemix_version": __version__, "config_sha256": cfg.hash, **payload}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _initial_conditions(cfg: RunConfig, count: int, salt: int) -> List[np.ndarray]:
    """Random combinations of the lowest ``u0_modes`` modes with V^m norm ``u0_norm``."""
    g = cfg.grid
    rng = np.random.default_rng([cfg.master_seed & 0xFFFFFFFF, cfg.master_seed >> 32, salt])
    E = basis_matrix(g, cfg.u0_modes)
    out = []
    for _ in range(count):
        u = np.tensordot(rng.standard_normal(len(E)), E, axes=(0, 0))
        out.append(u * (cfg.u0_norm / sobolev_norm(u, g.m_sobolev, g)))
    return out


# ---------------------------------------------------------------------------
# Subcommands; each returns (failed invariant names, details)
# ---------------------------------------------------------------------------


def cmd_check(cfg: RunConfig, out: Path):
    from .checks import run_checks

    results = run_checks(cfg.grid, cfg.noise_spec or RedNoiseSpec(m_sobolev=cfg.m_sobolev),
                         seed=cfg.master_seed, n=cfg.check_samples)
    for r in results:
        log.info(r.row())
    _write_csv(out / "checks.csv", cfg, ["name", "passed", "value", "threshold", "detail"],
               [(r.name, int(r.passed), r.value, r.threshold, r.detail) for r in results])
    return [r.name for r in results if not r.passed], {r.name: r.value for r in results}


def cmd_simulate(cfg: RunConfig, out: Path):
    from .mixing import run_chain
    from .snapshot import read_snapshot, write_snapshot

    g = cfg.grid
    if cfg.init is not None:
        f, _ = read_snapshot(cfg.init)
        if f.grid != g:
            raise ConfigError("init", "snapshot grid differs from the configured grid")
        u0 = f.coeffs
    else:
        u0 = _initial_conditions(cfg, 1, 1)[0]
    chain = run_chain(u0, cfg.steps, cfg.noise_spec, cfg.master_seed, cfg.stepper(), g)
    rows, files = [], []
    for s in chain:
        name = f"snap_{s.step:05d}.peqs"
        write_snapshot(out / name, s.field, float(s.step))
        digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
        files.append({"file": name, "t": float(s.step), "sha256": digest})
        c = s.field.coeffs
        rows.append((s.step, sobolev_norm(c, 0, g), sobolev_norm(c, g.m_sobolev, g), primed_norm(c, g)))
        log.info("t=%d  L2=%.6e  Vm=%.6e", s.step, rows[-1][1], rows[-1][2])
    _write_csv(out / "norms.csv", cfg, ["t", "L2", "Vm", "primed"], rows)
    _write_json(out / "manifest.json", cfg, {"snapshots": files})
    failed = []
    if cfg.noise_spec is None and any(b[1] >= a[1] for a, b in zip(rows, rows[1:]) if a[1] > 0):
        failed.append("unforced_L2_decrease")
    return failed, {"final_L2": rows[-1][1]}


def cmd_couple(cfg: RunConfig, out: Path):
    from .mixing import run_coupled

    g = cfg.grid
    u0 = _initial_conditions(cfg, 1, 2)[0]
    rng = np.random.default_rng([cfg.master_seed & 0xFFFFFFFF, cfg.master_seed >> 32, 3])
    d = random_field(g, rng)
    u0p = u0 + d * (cfg.coupling_distance / sobolev_norm(d, 0, g))
    rep = run_coupled(u0, u0p, cfg.steps, cfg.master_seed, cfg.noise_spec, cfg.stepper(), g)
    rows = [(k, a, b, c) for k, (a, b, c) in
            enumerate(zip(rep.diff_L2, rep.diff_Vm, rep.diff_primed))]
    factor = rep.mean_factor()
    expanding = rep.expanding_steps().tolist()
    _write_csv(out / "coupling.csv", cfg, ["k", "diff_L2", "diff_Vm", "diff_primed"], rows,
               [f"mean_factor={factor!r}", f"expanding_steps={expanding}"])
    log.info("mean contraction factor per step %.4f; expanding steps %s", factor, expanding)
    return ([] if factor < 1.0 else ["coupling_contraction"]), \
        {"mean_factor": factor, "expanding_steps": expanding}


def cmd_mixing(cfg: RunConfig, out: Path):
    from .mixing import mixing_experiment

    g = cfg.grid
    u0s = _initial_conditions(cfg, cfg.n_u0, 4)
    reps = mixing_experiment(
        u0s, n_steps=cfg.steps, ensemble_size=cfg.ensemble, burn_in=cfg.burn_in,
        thin=cfg.thin, spec=cfg.noise_spec, master_seed=cfg.master_seed,
        cfg=cfg.stepper(cfg.mixing_dt), g=g, workers=cfg.workers,
    )
    rows, footer, failed = [], [], []
    for j, r in enumerate(reps):
        rows += [(j, k, dk, sk) for k, (dk, sk) in enumerate(zip(r.d, r.stderr))]
        if r.fit_ok:
            footer.append(f"u0={j} kappa={r.kappa!r} C={r.C!r} r2={r.r2!r} "
                          f"points={int(r.fit_mask.sum())}")
            log.info("u0 %d: kappa=%.4f  C=%.3e  R^2=%.4f", j, r.kappa, r.C, r.r2)
            if not (r.kappa < 1.0 and r.r2 >= 0.9):
                failed.append(f"mixing_fit_u0_{j}")
        else:
            footer.append(f"u0={j} fit_failed: {r.fit_error}")
            log.warning("u0 %d: fit failed (%s)", j, r.fit_error)
            failed.append(f"mixing_fit_u0_{j}")
    kappas = [r.kappa for r in reps if r.fit_ok]
    spread = max(kappas) - min(kappas) if kappas else float("nan")
    footer.append(f"kappa_spread={spread!r}")
    if not spread <= 0.15:
        failed.append("mixing_kappa_spread")
    _write_csv(out / "mixing.csv", cfg, ["u0", "k", "d_k", "stderr_k"], rows, footer)
    return failed, {"kappa": kappas, "kappa_spread": spread}


def cmd_gramian(cfg: RunConfig, out: Path):
    from .mixing import gramian_nondegeneracy

    g = cfg.grid
    u0 = _initial_conditions(cfg, 1, 5)[0]
    spec = cfg.noise_spec
    seg = None if spec is None else draw_segment(spec, cfg.master_seed, 0, 0)
    rep = gramian_nondegeneracy(u0, seg, cfg.n_probe_modes, cfg.n_time_slots, cfg.stepper(), g)
    _write_csv(out / "gramian.csv", cfg, ["index", "value"], enumerate(rep.range_eigenvalues),
               [f"smallest={rep.smallest!r}", f"condition={rep.condition!r}",
                f"probe_space_smallest={rep.probe_smallest!r}"])
    log.info("smallest eigenvalue %.3e, condition number %.3e", rep.smallest, rep.condition)
    failed = []
    if not rep.smallest > 0:
        failed.append("gramian_positive")
    if not rep.psd_ok:
        failed.append("gramian_psd")
    return failed, {"smallest": rep.smallest, "condition": rep.condition}


COMMANDS = {
    "check": cmd_check,
    "simulate": cmd_simulate,
    "couple": cmd_couple,
    "mixing": cmd_mixing,
    "gramian": cmd_gramian,
}


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k:<18} {d} (default {v!r})" for k, (_, v, d) in SCHEMA.items())
    p = argparse.ArgumentParser(
        prog="pemix",
        description="Stochastic primitive equations: invariants, chains and mixing diagnostics.",
        epilog=f"configuration keys (file lines 'key = value', env {ENV_PREFIX}<KEY>):\n{keys}",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--seed", type=int, metavar="N", help="master_seed")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--steps", type=int, metavar="N")
    p.add_argument("--ensemble", type=int, metavar="N")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        over: Dict[str, Any] = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(item, "expected KEY=VALUE")
            k, v = item.split("=", 1)
            over[k.strip()] = v.strip()
        over.update(master_seed=args.seed, out=args.out, steps=args.steps, ensemble=args.ensemble)
        cfg = parse_config(args.config, over)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG

    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(_banner(cfg) + "\n" + cfg.canonical())
        failed, details = COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NonFiniteState, AbsorbingSetViolation, FloatingPointError, OSError, ValueError) as exc:
        log.error("runtime error: %s: %s", type(exc).__name__, exc)
        try:
            _write_json(out / "failures.json", cfg,
                        {"command": args.command, "failed": ["runtime"],
                         "error": f"{type(exc).__name__}: {exc}"})
        except OSError:
            pass
        return EXIT_RUNTIME
    if failed:
        _write_json(out / "failures.json", cfg,
                    {"command": args.command, "failed": failed, "details": details})
        log.error("failed: %s", ", ".join(failed))
        return EXIT_ASSERT
    log.info("ok (config %s)", cfg.hash[:12])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
