"""Command-line driver: ``kraichnan <config.json> [--workers N] [--output DIR]``.

Exit codes: 0 when every check passes, 1 when any check fails, 2 for a
configuration error (reported with the JSON path of the offending key).
"""
from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import rng as rngmod
from .covariance import CovarianceSpec
from .stats import ExperimentReport

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class RunConfig:
    experiment: str
    seed: int
    model: dict
    params: dict = field(default_factory=dict)
    output: str = "."

    def to_dict(self) -> dict:
        out = {"experiment": self.experiment, "seed": self.seed, "model": self.model,
               self.experiment: self.params, "output": self.output}
        if self.experiment == "verify":
            out.pop("verify")
        return out


def load_schema() -> dict:
    text = resources.files("kraichnan").joinpath("config_schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _json_path(parts) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def _resolve(schema: dict, root: dict) -> dict:
    if "$ref" not in schema:
        return schema
    node = root
    for part in schema["$ref"].lstrip("#/").split("/"):
        node = node[part]
    return node


def _fill_defaults(value, schema: dict, root: dict):
    """Copy of value with schema defaults filled in objects and array items."""
    schema = _resolve(schema, root)
    if isinstance(value, list) and "items" in schema:
        return [_fill_defaults(v, schema["items"], root) for v in value]
    if not isinstance(value, dict):
        return value
    out = dict(value)
    for key, sub in schema.get("properties", {}).items():
        target = _resolve(sub, root)
        if key not in out and "default" in target:
            out[key] = copy.deepcopy(target["default"])
        if key not in out and target.get("type") == "object":
            out[key] = {}
        if key in out:
            out[key] = _fill_defaults(out[key], target, root)
    return out


def parse_config(path) -> RunConfig:
    """Read, schema-check and semantically validate a configuration file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("$", f"config file {path} does not exist")
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"malformed JSON: {exc}")
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> RunConfig:
    schema = load_schema()
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(_json_path(e.absolute_path), e.message)
    kind = raw["experiment"]
    for other in ("dispersion", "lyapunov", "mixing", "snapshot"):
        if other != kind and other in raw:
            raise ConfigError(f"$.{other}", f"block does not apply to experiment '{kind}'")
    model = _fill_defaults(raw["model"], schema["properties"]["model"], schema)
    params = {}
    if kind != "verify":
        params = _fill_defaults(raw.get(kind, {}), schema["properties"][kind], schema)
    cfg = RunConfig(kind, int(raw["seed"]), model, params, raw.get("output", "."))
    _validate(cfg)
    return cfg


def _multiple(T, dt) -> bool:
    k = round(T / dt)
    return k >= 1 and abs(k * dt - T) <= 1e-9 * T


def _validate(cfg: RunConfig) -> None:
    d = cfg.model["d"]
    p = cfg.params
    kind = cfg.experiment
    if kind != "verify" and cfg.model["zeta"] != 2:
        raise ConfigError("$.model.zeta", "the simulations require the Batchelor regime zeta = 2")
    if kind == "dispersion":
        for i, s in enumerate(p["s_values"]):
            if not 0 <= s < d / 2:
                raise ConfigError(f"$.dispersion.s_values[{i}]",
                                  f"s must lie in (0, d/2) = (0, {d / 2:g}); s = 0 selects the conservation law; got {s:g}")
        if "r0" in p:
            if len(p["r0"]) != d or not any(p["r0"]):
                raise ConfigError("$.dispersion.r0", f"r0 must be a non-zero vector of length d = {d}")
        if not _multiple(p["T"], p["dt"]):
            raise ConfigError("$.dispersion.T", "T must be a positive integer multiple of dt")
        for i, t in enumerate(p["ks_times"]):
            if t > p["T"] or not _multiple(t, p["dt"]):
                raise ConfigError(f"$.dispersion.ks_times[{i}]", "KS times must be multiples of dt inside (0, T]")
        if p["ks_samples"] > p["N"]:
            raise ConfigError("$.dispersion.ks_samples", "ks_samples cannot exceed N")
    elif kind == "lyapunov":
        if p["T"] * cfg.model["D1"] < 5:
            raise ConfigError("$.lyapunov.T", "need T * D1 >= 5 for the time average to concentrate")
        dt = p.get("dt", 0.01 / (2 * cfg.model["D1"] * (d + 2)))
        if not _multiple(p["T"], dt):
            raise ConfigError("$.lyapunov.dt", "T must be a positive integer multiple of dt")
        if isinstance(p["v0"], list) and (len(p["v0"]) != d or not any(p["v0"])):
            raise ConfigError("$.lyapunov.v0", f"v0 must be a non-zero vector of length d = {d}")
    elif kind in ("mixing", "snapshot"):
        if d not in (2, 3):
            raise ConfigError("$.model.d", "the scalar solver supports d = 2 or 3")
        g = p["grid"]
        if g["n"] & (g["n"] - 1):
            raise ConfigError(f"$.{kind}.grid.n", "n must be a power of two")
        kc = 2 * (g["n"] // 2) // 3
        if not g["k_min"] < g["k_max"] <= kc:
            raise ConfigError(f"$.{kind}.grid.k_max", f"need k_min < k_max <= {kc} (dealiasing boundary)")
        for i, f in enumerate(p["forcing"]):
            if len(f["k"]) != d or not any(f["k"]) or max(abs(x) for x in f["k"]) > kc:
                raise ConfigError(f"$.{kind}.forcing[{i}].k",
                                  f"forcing wavevector must be non-zero, of length {d}, inside the dealiased lattice")
        width = p.get("bump_width", g["L"] / 72)
        if 6 * math.sqrt(2) * width > g["L"] / 8 + 1e-12:
            raise ConfigError(f"$.{kind}.bump_width", "initial bump diameter must not exceed L/8")
        if kind == "mixing":
            if not 0 < p["s"] < d / 2:
                raise ConfigError("$.mixing.s", f"s must lie in (0, d/2) = (0, {d / 2:g}); got {p['s']:g}")
            if not _multiple(p["T"], p["dt"]):
                raise ConfigError("$.mixing.T", "T must be a positive integer multiple of dt")
            if "fit_window" in p and not p["fit_window"][0] < p["fit_window"][1]:
                raise ConfigError("$.mixing.fit_window", "fit window must be increasing")
        else:
            for i, t in enumerate(p["times"]):
                if t > 0 and not _multiple(t, p["dt"]):
                    raise ConfigError(f"$.snapshot.times[{i}]", "snapshot times must be multiples of dt")


# --------------------------------------------------------------------------
# dispatch


def _spec(cfg: RunConfig) -> CovarianceSpec:
    m = cfg.model
    return CovarianceSpec(m["d"], m["D1"], m["D0"], m["zeta"])


def _forcing(items):
    from .scalar import ForcingMode, ForcingSpec
    return ForcingSpec(tuple(ForcingMode(tuple(f["k"]), f["amplitude"], f["phase"]) for f in items))


def _run_verify(cfg, workers, out):
    from .verify import run_verify
    return run_verify(), []


def _run_dispersion(cfg, workers, out):
    from .dispersion import run_dispersion
    p = cfg.params
    d = cfg.model["d"]
    r0 = p.get("r0", [1.0] + [0.0] * (d - 1))
    rep = run_dispersion(_spec(cfg), r0, p["N"], p["T"], p["dt"], cfg.seed, p["s_values"],
                         workers=workers, n_times=p["n_times"], ks_times=tuple(p["ks_times"]),
                         ks_samples=p["ks_samples"], extrapolate=p["extrapolate"])
    return rep, []


def _run_lyapunov(cfg, workers, out):
    from .lyapunov import default_dt, estimate_lyapunov
    p = cfg.params
    spec = _spec(cfg)
    v0 = p["v0"]
    v0 = None if v0 == "e1" else v0
    rep = estimate_lyapunov(spec, p["N"], p["T"], p.get("dt", default_dt(spec)), cfg.seed,
                            workers=workers, v0=v0, n_times=p["n_times"], extrapolate=p["extrapolate"])
    return rep, []


def _run_mixing(cfg, workers, out):
    from .scalar import MixingConfig, run_mixing_experiment
    p, m = cfg.params, cfg.model
    g = p["grid"]
    mc = MixingConfig(d=m["d"], D1=m["D1"], D0=m["D0"], n=g["n"], L=g["L"], k_min=g["k_min"],
                      k_max=g["k_max"], s=p["s"], M=p["M"], T=p["T"], dt=p["dt"], kappa=p["kappa"],
                      forcing=_forcing(p["forcing"]), bump_width=p.get("bump_width"),
                      bump_amplitude=p["bump_amplitude"], record_every=p["record_every"],
                      fit_window=tuple(p["fit_window"]) if "fit_window" in p else None,
                      plateau_start=p.get("plateau_start"), scheme=p["scheme"], seed=cfg.seed,
                      velocity_seed=p["velocity_seed"], refine=p["refine"])
    return run_mixing_experiment(mc, workers=workers), []


def _run_snapshot(cfg, workers, out):
    from .scalar import (GaussianBump, ScalarFieldState, ScalarStepper, TorusGrid, hs_norm,
                         snapshot, spectral_divergence, synthesize_velocity_modes, write_krgrid)
    p, m = cfg.params, cfg.model
    g = p["grid"]
    spec = _spec(cfg)
    grid = TorusGrid(m["d"], g["n"], g["L"])
    modes = synthesize_velocity_modes(spec, grid, g["k_min"], g["k_max"], p["velocity_seed"])
    bump = GaussianBump(m["d"], p.get("bump_width", g["L"] / 72))
    state = ScalarFieldState.from_real(grid, bump.evaluate(grid), kappa=p["kappa"])
    stepper = ScalarStepper(grid, modes, _forcing(p["forcing"]))
    gen = rngmod.stream(cfg.seed, rngmod.MIXING, 0)
    report = ExperimentReport("scalar_spde.snapshot")
    report.metadata.update(dict(n=g["n"], L=g["L"], dt=p["dt"], kappa=p["kappa"], seed=cfg.seed))
    files = []
    targets = sorted(set(int(round(t / p["dt"])) for t in p["times"]))
    worst_roundtrip, worst_mean = 0.0, 0.0
    step = 0
    for target in targets:
        while step < target:
            state = stepper.step(state, p["dt"], gen)
            step += 1
        field_ = snapshot(state)
        back = ScalarFieldState.from_real(grid, field_)
        scale = max(np.max(np.abs(state.coeffs)), 1e-300)
        worst_roundtrip = max(worst_roundtrip, float(np.max(np.abs(back.coeffs - state.coeffs)) / scale))
        worst_mean = max(worst_mean, abs(float(field_.mean())) / max(float(np.abs(field_).max()), 1e-300))
        name = f"scalar_t{step:06d}.krgrid"
        write_krgrid(Path(out) / name, field_, grid.L, state.t)
        files.append(name)
        report.add_row(state.t, "hs_norm", hs_norm(state, 0.5 if m["d"] == 2 else 1.0), 0.0)
        report.add_row(state.t, "l2_norm", hs_norm(state, 0.0), 0.0)
    report.add_verdict("transform_roundtrip", worst_roundtrip <= 1e-12, f"max relative error {worst_roundtrip:.2e}")
    report.add_verdict("scalar_mean_zero", worst_mean <= 1e-12, f"max |mean| / max|theta| = {worst_mean:.2e}")
    if p["velocity"]:
        xi = modes.draw(rngmod.stream(cfg.seed, rngmod.SYNTHESIS, 1))
        vel = snapshot(modes, xi)
        for i, comp in enumerate(vel):
            name = f"velocity_u{i}.krgrid"
            write_krgrid(Path(out) / name, comp, grid.L, 0.0)
            files.append(name)
        div = spectral_divergence(grid, vel) / max(float(np.abs(vel).max()), 1e-300)
        report.add_verdict("velocity_divergence", div <= 1e-12, f"max |div u| / max |u| = {div:.2e}")
    report.diagnostics["files"] = files
    return report, files


RUNNERS = {"verify": _run_verify, "dispersion": _run_dispersion, "lyapunov": _run_lyapunov,
           "mixing": _run_mixing, "snapshot": _run_snapshot}


def run(cfg: RunConfig, workers: int = 1, output=None, stream=None) -> int:
    """Execute the experiment, write report.json and series.csv, return the exit code."""
    stream = stream if stream is not None else sys.stdout
    out = Path(output if output is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    report, _ = RUNNERS[cfg.experiment](cfg, workers, out)
    report.metadata["config"] = cfg.to_dict()
    report.metadata["version"] = __version__
    report.write_json(out / "report.json")
    report.write_csv(out / "series.csv")
    for v in report.verdicts:
        print(f"{'PASS' if v.passed else 'FAIL'} {v.name}: {v.detail}", file=stream)
    return EXIT_OK if report.passed else EXIT_FAIL


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="kraichnan", description=__doc__.splitlines()[0])
    ap.add_argument("config", help="JSON run configuration")
    ap.add_argument("--workers", type=int, default=1, help="thread count (results do not depend on it)")
    ap.add_argument("--output", help="output directory (default: config 'output' or .)")
    args = ap.parse_args(argv)
    if args.workers < 1:
        print("config error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg, args.workers, args.output)


if __name__ == "__main__":
    sys.exit(main())
