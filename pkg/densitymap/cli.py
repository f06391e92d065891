"""
densitymap — Command line
Synthetic experiments end to end:

    python -m densitymap synth   --spectrum "A=1,n=-2,var=0.3" --size 128 --seed 7 --out truth/
    python -m densitymap observe --truth truth/truth.dmap --mbar 10 --mask box:40,40,70,70 --out obs/
    python -m densitymap run     --obs obs/ --config run.cfg --out result/
    python -m densitymap run     --replay result/manifest.json
    python -m densitymap compare --truth truth/ --estimates result/ --out compare.csv --kmax nyquist

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from densitymap import __version__
from densitymap.config import RUN_DEFAULTS, build_config, flatten_config, load_run_config
from densitymap.core import CountMap, DensityField, RadialBinning, lowpass, map_load, map_save
from densitymap.exceptions import DensityMapError, DomainError, UsageError
from densitymap.export import write_csv, write_json, write_pgm
from densitymap.pipeline import baseline_quadratic_inpaint, compare_spectra, run_data_augmentation
from densitymap.randfield import (
    SeededRng,
    estimate_spectrum,
    poisson_sample,
    power_law_spectrum,
    sample_lognormal_field,
    tabulated_spectrum,
    zero_mean_contrast,
)
from densitymap.transform import get_dictionary

log = logging.getLogger("densitymap.cli")

BASELINE_ITERATIONS = 200


class RunManifest(BaseModel):
    """Record of one `run`; enough to replay it bit for bit."""

    tool: str = Field(default="densitymap")
    version: str = Field(default=__version__)
    command: str = Field(default="run")
    config: Dict[str, Any] = Field(..., description="Flat key=value config echo")
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    seed: int
    stages: Dict[str, float] = Field(default_factory=dict, description="Wall-clock seconds per stage")
    observed_fraction: float
    baseline_lambda: float
    baseline_iterations: int = Field(default=BASELINE_ITERATIONS)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------

def parse_spectrum(descriptor: str, binning: RadialBinning):
    """'A=1,n=-2[,var=0.3]' power law, or 'table:path.csv' with columns k, power."""
    if descriptor.startswith("table:"):
        path = Path(descriptor[len("table:"):])
        if not path.is_file():
            raise UsageError(f"spectrum table not found: {path}")
        table = pd.read_csv(path)
        if not {"k", "power"} <= set(table.columns):
            raise UsageError(f"spectrum table {path} needs columns k and power")
        return tabulated_spectrum(binning, table["k"].to_numpy(), table["power"].to_numpy())

    fields: Dict[str, float] = {}
    for part in descriptor.split(","):
        key, sep, value = part.partition("=")
        try:
            if not sep:
                raise ValueError(part)
            fields[key.strip()] = float(value)
        except ValueError:
            raise UsageError(f"bad spectrum descriptor '{descriptor}' (expected A=..,n=..[,var=..])")
    if not {"A", "n"} <= set(fields) or set(fields) - {"A", "n", "var"}:
        raise UsageError(f"bad spectrum descriptor '{descriptor}' (expected A=..,n=..[,var=..])")
    try:
        return power_law_spectrum(binning, fields["A"], fields["n"], fields.get("var"))
    except DomainError as e:
        raise UsageError(f"bad spectrum descriptor '{descriptor}': {e}") from e


def parse_mask(descriptor: str, shape, rng: SeededRng) -> np.ndarray:
    """none | random:p | box:x,y,w,h | file:path. random and box describe the missing area."""
    kind, _, rest = descriptor.partition(":")
    mask = np.ones(shape, dtype=np.uint8)
    try:
        if kind == "none" and not rest:
            return mask
        if kind == "random":
            p = float(rest)
            if not 0.0 <= p <= 1.0:
                raise ValueError(rest)
            mask[rng.generator().random(shape) < p] = 0
            return mask
        if kind == "box":
            x, y, w, h = (int(v) for v in rest.split(","))
            if w < 0 or h < 0 or x < 0 or y < 0:
                raise ValueError(rest)
            mask[y:y + h, x:x + w] = 0
            return mask
        if kind == "file":
            if not Path(rest).is_file():
                raise UsageError(f"mask file not found: {rest}")
            loaded = map_load(rest, expect_kind="mask")
            if loaded.shape != tuple(shape):
                raise UsageError(f"mask file {rest} has shape {loaded.shape}, truth has {tuple(shape)}")
            return loaded.astype(np.uint8)
    except ValueError:
        pass
    raise UsageError(f"bad mask descriptor '{descriptor}' (expected none, random:p, box:x,y,w,h or file:path)")


def _parse_kmax(value: str, binning: RadialBinning) -> float:
    if value == "nyquist":
        return binning.k_nyquist
    try:
        kmax = float(value)
    except ValueError:
        raise UsageError(f"--kmax must be a number or 'nyquist', got '{value}'")
    if kmax < 0:
        raise UsageError("--kmax must be >= 0")
    return kmax


def _read_json(path: Path) -> Dict[str, Any]:
    if not path.is_file():
        raise UsageError(f"missing file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"{path} is not valid JSON: {e}") from e


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.size < 2:
        raise UsageError(f"--size must be >= 2, got {args.size}")
    if args.seed < 0:
        raise UsageError("--seed must be >= 0")
    shape = (args.size, args.size)
    binning = RadialBinning.build(shape, args.bins, args.bin_scale)
    cov = parse_spectrum(args.spectrum, binning)
    params = zero_mean_contrast(cov)
    truth = sample_lognormal_field(params, SeededRng(args.seed).derive("synth"))

    out = Path(args.out)
    map_save(truth.delta, out / "truth.dmap", kind="density")
    map_save(cov.spectrum, out / "spectrum.dmap", kind="spectrum")
    write_json(out / "params.json", {
        "mu": params.mu,
        "spectrum": cov.spectrum.tolist(),
        "edges": binning.edges.tolist(),
        "shape": list(shape),
        "variance": cov.variance,
        "descriptor": args.spectrum,
        "seed": args.seed,
    })
    log.info(f"[synth] {shape[0]}x{shape[1]} field, σ²={cov.variance:.4g}, μ={params.mu:.4g} -> {out}")
    return 0


def cmd_observe(args) -> int:
    if not args.mbar > 0:
        raise UsageError(f"--mbar must be > 0, got {args.mbar}")
    if not Path(args.truth).is_file():
        raise UsageError(f"truth file not found: {args.truth}")
    truth = DensityField(map_load(args.truth, expect_kind="density"))
    rng = SeededRng(args.seed)
    mask = parse_mask(args.mask, truth.shape, rng.derive("mask"))
    if not np.any(mask == 1):
        raise UsageError(f"mask '{args.mask}' leaves nothing observed")
    counts = poisson_sample(args.mbar * truth.eta, rng.derive("observe")) * mask
    y = CountMap(counts=counts, mask=mask, mean_count=args.mbar)

    out = Path(args.out)
    map_save(y.counts, out / "counts.dmap", kind="counts", dtype="i64")
    map_save(y.mask, out / "mask.dmap", kind="mask", dtype="u8")
    write_json(out / "observation.json", {
        "m_bar": args.mbar,
        "mask": args.mask,
        "observed_fraction": y.observed_fraction,
        "truth": str(args.truth),
        "seed": args.seed,
        "shape": list(y.shape),
    })
    log.info(f"[observe] observed fraction {y.observed_fraction:.3f}, mean count {counts[mask == 1].mean():.3f}")
    return 0


def _load_observation(obs: Path) -> CountMap:
    meta = _read_json(obs / "observation.json")
    for name in ("counts.dmap", "mask.dmap"):
        if not (obs / name).is_file():
            raise UsageError(f"missing file: {obs / name}")
    counts = map_load(obs / "counts.dmap", expect_kind="counts")
    mask = map_load(obs / "mask.dmap", expect_kind="mask")
    try:
        m_bar = float(meta["m_bar"])
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"{obs / 'observation.json'} has no usable m_bar: {e!r}") from e
    return CountMap(counts=counts, mask=mask, mean_count=m_bar)


def cmd_run(args) -> int:
    stages: Dict[str, float] = {}
    started = time.perf_counter()

    if args.replay:
        try:
            manifest = RunManifest.model_validate(_read_json(Path(args.replay)))
        except ValidationError as e:
            raise UsageError(f"invalid manifest {args.replay}: {e}") from e
        if not manifest.inputs.get("obs"):
            raise UsageError(f"manifest {args.replay} records no 'obs' input")
        obs = Path(manifest.inputs["obs"])
        config = build_config(manifest.config)
        out = Path(args.out or manifest.inputs.get("out", Path(args.replay).parent))
        baseline_lambda = manifest.baseline_lambda
        baseline_iterations = manifest.baseline_iterations
    else:
        if not (args.obs and args.config and args.out):
            raise UsageError("run needs --obs, --config and --out (or --replay)")
        obs = Path(args.obs)
        config = load_run_config(args.config, RUN_DEFAULTS)
        out = Path(args.out)
        baseline_lambda = args.baseline_lambda
        baseline_iterations = args.baseline_iters

    y = _load_observation(obs)
    stages["load"] = time.perf_counter() - started

    tick = time.perf_counter()
    result = run_data_augmentation(y, config)
    stages["augment"] = time.perf_counter() - tick

    tick = time.perf_counter()
    if baseline_lambda is None:
        # same sparsity-to-fidelity balance as the MAP solve, on the count scale
        baseline_lambda = config.solver.lam * y.mean_count ** 2
    dictionary = get_dictionary(config.dictionary, y.shape)
    baseline = baseline_quadratic_inpaint(y, dictionary, baseline_lambda, baseline_iterations)
    stages["baseline"] = time.perf_counter() - tick

    tick = time.perf_counter()
    binning = result.binning
    spectra = pd.DataFrame({
        "k_bin_center": binning.centers,
        "sigma_hat": result.params.cov.spectrum,
        "delta_m1": result.delta_spectrum,
        "delta_m2": estimate_spectrum(baseline, binning).spectrum,
    })
    completed_mean = np.mean([c.counts for c in result.completed], axis=0)
    outputs = {
        "delta": map_save(result.delta.delta, out / "delta.dmap", kind="density"),
        "baseline": map_save(baseline, out / "baseline.dmap", kind="density"),
        "history": write_csv(out / "history.csv", result.history_frame()),
        "spectra": write_csv(out / "spectra.csv", spectra),
        "traces": write_csv(out / "traces.csv", result.traces_frame()),
        "delta_pgm": write_pgm(out / "delta.pgm", result.delta.delta),
        "completed_pgm": write_pgm(out / "completed.pgm", completed_mean),
    }
    stages["write"] = time.perf_counter() - tick

    manifest = RunManifest(
        config=flatten_config(config),
        inputs={"obs": str(obs), "out": str(out)},
        outputs={name: str(path) for name, path in outputs.items()},
        seed=config.seed,
        stages=stages,
        observed_fraction=y.observed_fraction,
        baseline_lambda=baseline_lambda,
        baseline_iterations=baseline_iterations,
    )
    write_json(out / "manifest.json", manifest.model_dump(mode="json"))
    log.info(f"[run] done in {time.perf_counter() - started:.1f}s -> {out}")
    return 0


def cmd_compare(args) -> int:
    truth_dir = Path(args.truth)
    params = _read_json(truth_dir / "params.json")
    binning = RadialBinning(tuple(params["shape"]), np.asarray(params["edges"]))
    truth_file = truth_dir / "truth.dmap"
    if not truth_file.is_file():
        raise UsageError(f"missing file: {truth_file}")
    truth = map_load(truth_file, expect_kind="density")
    kmax = _parse_kmax(args.kmax, binning)

    estimates: Dict[str, np.ndarray] = {}
    inputs: List[Tuple[str, np.ndarray]] = [("truth", truth)]
    for directory in (Path(d) for d in args.estimates):
        delta_file = directory / "delta.dmap"
        if not delta_file.is_file():
            raise UsageError(f"missing file: {delta_file}")
        delta = map_load(delta_file, expect_kind="density")
        if delta.shape != truth.shape:
            raise UsageError(
                f"binning mismatch: {delta_file} is {delta.shape[1]}x{delta.shape[0]}, "
                f"{truth_file} is {truth.shape[1]}x{truth.shape[0]}"
            )
        name = directory.name or str(directory)
        if name in estimates or name == "truth":
            name = f"{name}_{len(estimates)}"
        estimates[name] = estimate_spectrum(delta, binning).spectrum
        baseline_file = directory / "baseline.dmap"
        if baseline_file.is_file():
            estimates[f"{name}:baseline"] = estimate_spectrum(
                map_load(baseline_file, expect_kind="density"), binning
            ).spectrum
        inputs.append((name, delta))

    table = compare_spectra(estimate_spectrum(truth, binning), estimates, binning)
    out = Path(args.out)
    write_csv(out, table)
    # low-pass maps sit beside the table; input directories are left untouched
    for name, values in inputs:
        target = out.with_name(f"{out.stem}.{name}.lowpass.dmap")
        map_save(lowpass(values, binning, kmax), target, kind="density")
    log.info(f"[compare] {len(estimates)} estimates vs {truth_file}, kmax={kmax:.4g} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="densitymap", description="Log-normal density-field reconstruction from masked counts")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: $DENSITYMAP_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth = sub.add_parser("synth", help="Draw a synthetic log-normal truth field")
    synth.add_argument("--spectrum", required=True, help="'A=1,n=-2[,var=0.3]' or 'table:path.csv'")
    synth.add_argument("--size", type=int, required=True, help="Grid side in pixels")
    synth.add_argument("--bins", type=int, default=16, help="Radial bins (default: 16)")
    synth.add_argument("--bin-scale", choices=("log", "linear"), default="log")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True, help="Output directory")
    synth.set_defaults(handler=cmd_synth)

    observe = sub.add_parser("observe", help="Masked Poisson counts of a truth field")
    observe.add_argument("--truth", required=True, help="truth.dmap from synth")
    observe.add_argument("--mbar", type=float, required=True, help="Mean count per pixel")
    observe.add_argument("--mask", default="none", help="none | random:p | box:x,y,w,h | file:path (p, box = missing area)")
    observe.add_argument("--seed", type=int, default=0)
    observe.add_argument("--out", required=True, help="Output directory")
    observe.set_defaults(handler=cmd_observe)

    run = sub.add_parser("run", help="Data-augmentation reconstruction")
    run.add_argument("--obs", help="Directory written by observe")
    run.add_argument("--config", help="key=value config file")
    run.add_argument("--out", help="Output directory")
    run.add_argument("--replay", help="Re-run from a manifest.json")
    run.add_argument("--baseline-lambda", type=float, default=None,
                     help="ISTA baseline sparsity weight (default: lambda * m_bar^2)")
    run.add_argument("--baseline-iters", type=int, default=BASELINE_ITERATIONS)
    run.set_defaults(handler=cmd_run)

    compare = sub.add_parser("compare", help="Spectrum comparison and low-pass maps")
    compare.add_argument("--truth", required=True, help="Directory written by synth")
    compare.add_argument("--estimates", nargs="+", required=True, help="Directories written by run")
    compare.add_argument("--out", required=True, help="Comparison CSV")
    compare.add_argument("--kmax", default="nyquist", help="Low-pass cutoff in cycles/pixel, or 'nyquist'")
    compare.set_defaults(handler=cmd_compare)
    return parser


def _configure_logging(level_name: Optional[str]) -> None:
    name = (level_name or os.getenv("DENSITYMAP_LOG_LEVEL") or "INFO").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        raise UsageError(f"unknown log level '{name}'")
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%H:%M:%S",
    )
    logging.getLogger("densitymap").setLevel(level)


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args.log_level)
        return args.handler(args)
    except UsageError as e:
        log.error(str(e))
        return 2
    except (DensityMapError, FloatingPointError) as e:
        log.error(f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
