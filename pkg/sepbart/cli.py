"""
Command-line interface for SepBART.

Subcommands bind the library into reproducible runs:

    sepbart simulate   draw a dataset and its ground truth from a scenario
    sepbart fit        fit the model to a CSV and write one draw file per chain
    sepbart estimate   ATE, CATE, heterogeneity curves and variable importance
    sepbart diagnose   PSRF, positivity and the trimmed ATE
    sepbart study      replicate simulation study against the ground truth

Settings come from one YAML file (--config), overridden by flags. The
resolved configuration, its hash and the seed are written into every output.
"""

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .dataset import Dataset, load_csv, normalize
from .diagnostics import ate_psrf, positivity_report, psrf, trimmed_ate
from .errors import ConfigError, SepBartError
from .estimands import (
    METHODS,
    ExposureContrast,
    ate,
    cate_draws,
    exposure_vim,
    hetero_curve,
    vim,
    vim_difference_test,
)
from .model import FitConfig, PosteriorSamples, fit, merge_chains, read_draws, write_draws
from .sim import MODES, SCENARIOS, Scenario, StudySettings, external_comparison, generate, \
    read_external_predictions, replicate_study, sample_exposures, study_tables, true_quantities
from .utils import atomic_write_text, config_hash, dataclass_from_mapping, require_valid, summarize, \
    to_jsonable, write_json

logger = logging.getLogger(__name__)

QUANTILE_LABEL = re.compile(r"^q(\d+(?:\.\d+)?)$")


@dataclass
class DataSection:
    path: str = ""
    outcome: str = "y"
    covariates: List[str] = field(default_factory=list)
    exposures: List[str] = field(default_factory=list)

    def validate(self) -> List[str]:
        problems = []
        if not self.path:
            problems.append("data.path is required")
        if not self.covariates:
            problems.append("data.covariates must list at least one column")
        if not self.exposures:
            problems.append("data.exposures must list at least one column")
        return problems


@dataclass
class SimulateSection:
    scenario: str = "strong"
    n: int = 2000

    def validate(self) -> List[str]:
        return [f"simulate.{p}" for p in Scenario(self.scenario, self.n).validate()]


@dataclass
class ContrastSection:
    """Each level is a list of raw exposure values or a quantile label such as 'q25'."""
    w0: Any = "q25"
    w1: Any = "q75"

    def validate(self) -> List[str]:
        problems = []
        for name in ("w0", "w1"):
            value = getattr(self, name)
            if isinstance(value, str):
                match = QUANTILE_LABEL.match(value)
                if not match or not 0 <= float(match.group(1)) <= 100:
                    problems.append(f"contrast.{name}: expected a list or a label like 'q25'")
            elif not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
                problems.append(f"contrast.{name}: expected a list of numbers")
        return problems


@dataclass
class EstimateSection:
    method: str = "regression"
    blocks: int = 0
    alpha: float = 0.05
    level: float = 0.95
    num_points: int = 100
    grid_points: int = 20
    groups: Dict[str, List[Any]] = field(default_factory=dict)
    reference_quantiles: List[float] = field(default_factory=list)
    exposure_vim: bool = False
    exposure_vim_draws: int = 20
    exposure_vim_points: int = 100

    def validate(self) -> List[str]:
        problems = []
        if self.method not in METHODS:
            problems.append(f"estimate.method must be one of {', '.join(METHODS)}")
        if self.blocks < 0:
            problems.append("estimate.blocks must be >= 0 (0 picks ceil(n/500))")
        if not 0 < self.alpha < 1:
            problems.append("estimate.alpha must be in (0, 1)")
        if not 0 < self.level < 1:
            problems.append("estimate.level must be in (0, 1)")
        if self.num_points < 1 or self.grid_points < 2:
            problems.append("estimate.num_points must be >= 1 and estimate.grid_points >= 2")
        if not isinstance(self.groups, dict):
            problems.append("estimate.groups must map group names to covariate lists")
        if any(not 0 < q < 1 for q in self.reference_quantiles):
            problems.append("estimate.reference_quantiles must lie in (0, 1)")
        return problems


@dataclass
class DiagnoseSection:
    delta: float = 0.01
    windows: List[List[float]] = field(default_factory=lambda: [[0.15, 0.35], [0.65, 0.85]])
    include_observations: bool = False

    def validate(self) -> List[str]:
        problems = []
        if not 0 <= self.delta < 1:
            problems.append("diagnose.delta must be in [0, 1)")
        if (len(self.windows) != 2 or any(len(w) != 2 or not 0 <= w[0] < w[1] <= 1
                                          for w in self.windows)):
            problems.append("diagnose.windows must be two [low, high] quantile pairs")
        return problems


@dataclass
class StudySection:
    replicates: int = 20
    num_points: int = 100
    method: str = "mean"
    blocks: int = 0
    mode: str = "block"
    alpha: float = 0.05
    external: str = ""

    def validate(self) -> List[str]:
        problems = []
        if self.replicates < 1:
            problems.append("study.replicates must be >= 1")
        if self.num_points < 1:
            problems.append("study.num_points must be >= 1")
        if self.method not in METHODS:
            problems.append(f"study.method must be one of {', '.join(METHODS)}")
        if self.blocks < 0:
            problems.append("study.blocks must be >= 0")
        if self.mode not in MODES:
            problems.append(f"study.mode must be one of {', '.join(MODES)}")
        if not 0 < self.alpha < 1:
            problems.append("study.alpha must be in (0, 1)")
        return problems


SECTIONS = {
    "data": DataSection,
    "simulate": SimulateSection,
    "fit": FitConfig,
    "contrast": ContrastSection,
    "estimate": EstimateSection,
    "diagnose": DiagnoseSection,
    "study": StudySection,
}


@dataclass
class RunConfig:
    """Resolved settings of one CLI run."""
    seed: int = 0
    out: str = "sepbart-out"
    threads: int = 1
    data: DataSection = field(default_factory=DataSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    fit: FitConfig = field(default_factory=FitConfig)
    contrast: ContrastSection = field(default_factory=ContrastSection)
    estimate: EstimateSection = field(default_factory=EstimateSection)
    diagnose: DiagnoseSection = field(default_factory=DiagnoseSection)
    study: StudySection = field(default_factory=StudySection)

    @classmethod
    def from_mapping(cls, mapping: Dict[str, Any]) -> "RunConfig":
        """
        Build and validate a run configuration.

        Raises:
            ConfigError: listing every unknown key, bad type and invalid value
        """
        problems = []
        scalars = {f.name for f in fields(cls)} - set(SECTIONS)
        kwargs: Dict[str, Any] = {}
        for key, value in mapping.items():
            if key in SECTIONS:
                if value is None:
                    value = {}
                if not isinstance(value, dict):
                    problems.append(f"{key}: expected a mapping")
                    continue
                section, section_problems = dataclass_from_mapping(SECTIONS[key], value, f"{key}.")
                problems.extend(section_problems)
                kwargs[key] = section
            elif key in scalars:
                kwargs[key] = value
            else:
                problems.append(f"{key}: unknown key")

        config = cls(**kwargs)
        seed_ok = isinstance(config.seed, int) and not isinstance(config.seed, bool) and config.seed >= 0
        if not seed_ok:
            problems.append("seed must be a non-negative integer")
        if not isinstance(config.threads, int) or config.threads < 1:
            problems.append("threads must be an integer >= 1")
        if not isinstance(config.out, str) or not config.out:
            problems.append("out must be a directory path")
        if seed_ok:
            config.fit = replace(config.fit, seed=config.seed)
        problems.extend(f"fit.{p}" for p in config.fit.validate())
        for name in ("simulate", "contrast", "estimate", "diagnose", "study"):
            problems.extend(getattr(config, name).validate())
        require_valid(problems)
        return config

    def to_dict(self) -> Dict[str, Any]:
        return to_jsonable(asdict(self))


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError([f"cannot read config file {path}: {exc}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f"config file {path} is not valid YAML: {exc}"]) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError([f"config file {path} must contain a mapping"])
    return data


def apply_overrides(mapping: Dict[str, Any], args: argparse.Namespace) -> Dict[str, Any]:
    """Flags override the file: --seed, --out, --threads, --chains and --set section.key=value."""
    merged = {k: (dict(v) if isinstance(v, dict) else v) for k, v in mapping.items()}
    if args.seed is not None:
        merged["seed"] = args.seed
    if args.out is not None:
        merged["out"] = args.out
    if args.threads is not None:
        merged["threads"] = args.threads
    if args.chains is not None:
        merged.setdefault("fit", {})["chains"] = args.chains
    problems = []
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            problems.append(f"--set {item!r}: expected key=value")
            continue
        value = yaml.safe_load(raw)
        section, dot, name = key.partition(".")
        if dot:
            target = merged.setdefault(section, {})
            if not isinstance(target, dict):
                problems.append(f"--set {key}: '{section}' is not a section")
                continue
            target[name] = value
        else:
            merged[key] = value
    require_valid(problems)
    return merged


def resolve_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig.from_mapping(apply_overrides(load_config_file(args.config), args))


def provenance(config: RunConfig) -> Dict[str, Any]:
    resolved = config.to_dict()
    return {"config": resolved, "config_hash": config_hash(resolved), "seed": config.seed,
            "version": __version__}


def resolve_level(value: Any, W: np.ndarray, name: str) -> np.ndarray:
    if isinstance(value, str):
        q = float(QUANTILE_LABEL.match(value).group(1)) / 100.0
        return np.quantile(W, q, axis=0)
    level = np.asarray(value, dtype=float)
    if level.size != W.shape[1]:
        raise ConfigError([f"contrast.{name} has {level.size} values for {W.shape[1]} exposures"])
    return level


def resolve_contrast(section: ContrastSection, W: np.ndarray) -> ExposureContrast:
    """Quantile labels are evaluated per exposure on the raw exposures W."""
    W = np.atleast_2d(W)
    return ExposureContrast(resolve_level(section.w0, W, "w0"), resolve_level(section.w1, W, "w1"))


def raw_training(samples: PosteriorSamples) -> Tuple[np.ndarray, np.ndarray]:
    """Training covariates and exposures on the raw scale."""
    if samples.normalization is None:
        return samples.X, samples.W
    return (samples.normalization.inverse_covariates(samples.X),
            samples.normalization.inverse_exposures(samples.W))


def write_table(path: str, frame: pd.DataFrame, prov: Dict[str, Any]) -> str:
    frame = frame.copy()
    frame["config_hash"] = prov["config_hash"]
    frame["seed"] = prov["seed"]
    atomic_write_text(path, frame.to_csv(index=False, float_format=lambda v: repr(float(v))))
    return path


def output_path(config: RunConfig, name: str) -> str:
    os.makedirs(config.out, exist_ok=True)
    return os.path.join(config.out, name)


def cmd_simulate(config: RunConfig) -> Dict[str, str]:
    """Write data.csv and truth.json for the configured scenario."""
    prov = provenance(config)
    scenario = Scenario(config.simulate.scenario, config.simulate.n, config.seed)
    ds, _ = generate(scenario)
    contrast = resolve_contrast(config.contrast, ds.W)
    truth = true_quantities(scenario, contrast)
    data_path = write_table(output_path(config, "data.csv"), ds.to_frame("y"), prov)
    truth_path = output_path(config, "truth.json")
    write_json(truth_path, dict(prov, truth=truth))
    logger.info("simulated %s scenario with n=%d", scenario.tag, scenario.n)
    return {"data": data_path, "truth": truth_path}


def cmd_fit(config: RunConfig) -> Dict[str, Any]:
    """Fit the model to the configured CSV; one draw file per chain plus fit.json."""
    require_valid(config.data.validate())
    prov = provenance(config)
    ds = load_csv(config.data.path, config.data.outcome, config.data.covariates, config.data.exposures)
    normalized, info = normalize(ds)
    chains = fit(normalized, config.fit, info, workers=min(config.threads, config.fit.chains))

    draw_paths, summaries = [], []
    for samples in chains:
        samples.provenance = prov
        path = output_path(config, f"draws-chain{samples.chain}.jsonl")
        write_draws(path, samples)
        draw_paths.append(path)
        sigma = [info.outcome_scale * np.sqrt(d.state.sigma2) for d in samples.draws]
        summaries.append({
            "chain": samples.chain,
            "path": path,
            "num_draws": len(samples),
            "sigma": summarize(sigma) if sigma else None,
            "acceptance": samples.acceptance,
        })
    fit_path = output_path(config, "fit.json")
    write_json(fit_path, dict(prov, chains=summaries))
    return {"draws": draw_paths, "summary": fit_path}


def _pairwise_tests(result, alpha: float) -> List[Dict[str, Any]]:
    tests = []
    for a in range(len(result.labels)):
        for b in range(a + 1, len(result.labels)):
            try:
                (lower, upper), reject = vim_difference_test(result, a, b, alpha)
                tests.append({"j": result.labels[a], "k": result.labels[b],
                              "lower": lower, "upper": upper, "reject": reject})
            except SepBartError as exc:
                tests.append({"j": result.labels[a], "k": result.labels[b], "error": str(exc)})
    return tests


def cmd_estimate(config: RunConfig, draw_paths: Sequence[str]) -> Dict[str, str]:
    """Estimand report from one or more draw files; the draw files are only read."""
    settings = config.estimate
    prov = provenance(config)
    samples = merge_chains([read_draws(p) for p in draw_paths])
    X_raw, W_raw = raw_training(samples)
    contrast = resolve_contrast(config.contrast, W_raw)
    contrast.check_range(W_raw)
    blocks = settings.blocks or None

    rng = np.random.default_rng([config.seed, 1])
    n = X_raw.shape[0]
    rows = np.sort(rng.choice(n, size=min(settings.num_points, n), replace=False))
    cates = cate_draws(samples, X_raw[rows], contrast)
    cate_frame = pd.DataFrame(X_raw[rows], columns=samples.covariate_names)
    cate_frame.insert(0, "row", rows)
    tail = (1.0 - settings.level) / 2.0
    cate_frame["mean"] = cates.mean(axis=0)
    cate_frame["lower"] = np.quantile(cates, tail, axis=0)
    cate_frame["upper"] = np.quantile(cates, 1.0 - tail, axis=0)

    curve_rows = []
    for j, name in enumerate(samples.covariate_names):
        grid = np.linspace(np.quantile(X_raw[:, j], 0.05), np.quantile(X_raw[:, j], 0.95),
                           settings.grid_points)
        for row in hetero_curve(samples, j, contrast, grid, settings.level):
            curve_rows.append(dict(row, covariate=name))

    importance = vim(samples, contrast.w0, settings.method, blocks, seed=config.seed)
    report: Dict[str, Any] = dict(
        prov,
        draw_files=list(draw_paths),
        num_draws=len(samples),
        contrast={"w0": contrast.w0.tolist(), "w1": contrast.w1.tolist()},
        ate=ate(samples, contrast, settings.level),
        vim=importance.summary(settings.level),
        tests=_pairwise_tests(importance, settings.alpha),
    )
    if settings.groups:
        grouped = vim(samples, contrast.w0, settings.method, blocks, settings.groups, seed=config.seed)
        report["grouped_vim"] = grouped.summary(settings.level)
    if settings.reference_quantiles:
        report["reference_robustness"] = []
        for q in settings.reference_quantiles:
            w0 = np.quantile(W_raw, q, axis=0)
            result = vim(samples, w0, settings.method, blocks, seed=config.seed)
            report["reference_robustness"].append(
                {"quantile": q, "w0": w0.tolist(), "vim": result.summary(settings.level)})
    if settings.exposure_vim:
        result = exposure_vim(samples, contrast.w0, settings.exposure_vim_draws,
                              settings.exposure_vim_points, seed=config.seed)
        report["exposure_vim"] = result.summary(settings.level)

    outputs = {
        "report": output_path(config, "estimate.json"),
        "cate": write_table(output_path(config, "cate.csv"), cate_frame, prov),
        "curves": write_table(output_path(config, "curves.csv"), pd.DataFrame(curve_rows), prov),
        "vim_draws": write_table(output_path(config, "vim_draws.csv"),
                                 pd.DataFrame(importance.to_rows()), prov),
    }
    write_json(outputs["report"], report)
    return outputs


def cmd_diagnose(config: RunConfig, draw_paths: Sequence[str]) -> Dict[str, str]:
    """PSRF across chains, positivity of the contrast and the trimmed ATE."""
    settings = config.diagnose
    prov = provenance(config)
    chains = [read_draws(p) for p in draw_paths]
    samples = merge_chains(chains)
    X_raw, W_raw = raw_training(samples)
    contrast = resolve_contrast(config.contrast, W_raw)

    report: Dict[str, Any] = dict(prov, draw_files=list(draw_paths),
                                  contrast={"w0": contrast.w0.tolist(), "w1": contrast.w1.tolist()})
    if len(chains) >= 2:
        try:
            report["psrf"] = {
                "ate": ate_psrf(chains, contrast),
                "sigma": psrf([[np.sqrt(d.state.sigma2) for d in c.draws] for c in chains]),
            }
        except SepBartError as exc:
            report["psrf"] = {"error": str(exc)}
    else:
        report["psrf"] = {"error": "PSRF needs draw files from at least 2 chains"}

    ds = Dataset(np.zeros(X_raw.shape[0]), X_raw, W_raw, samples.covariate_names, samples.exposure_names)
    positivity = positivity_report(ds, contrast, settings.delta,
                                   tuple(tuple(w) for w in settings.windows))
    report["positivity"] = positivity.to_dict(settings.include_observations)
    report["ate"] = ate(samples, contrast)
    report["trimmed_ate"] = trimmed_ate(samples, positivity, contrast)
    path = output_path(config, "diagnose.json")
    write_json(path, report)
    return {"report": path}


def cmd_study(config: RunConfig) -> Dict[str, str]:
    """Replicate study; quantile contrast labels refer to the scenario's exposure distribution."""
    prov = provenance(config)
    section = config.study
    scenario = Scenario(config.simulate.scenario, config.simulate.n, config.seed)
    reference_W = sample_exposures(100_000, np.random.default_rng([config.seed, 3]))
    settings = StudySettings(
        scenario=scenario,
        fit=config.fit,
        contrast=resolve_contrast(config.contrast, reference_W),
        alpha=section.alpha,
        num_points=section.num_points,
        method=section.method,
        blocks=section.blocks or None,
        mode=section.mode,
    )
    require_valid(settings.validate())
    external = read_external_predictions(section.external) if section.external else None
    report = replicate_study(settings, section.replicates, workers=config.threads)
    if external is not None:
        report["external"] = external_comparison(report, external)

    labels = [f"x{j + 1}" for j in range(len(report["true_psi"]))]
    outputs = {"report": output_path(config, "study.json")}
    write_json(outputs["report"], dict(prov, study=report))
    for name, frame in study_tables(report, labels).items():
        if name == "rejections":
            frame = frame.reset_index().rename(columns={"index": "covariate"})
        outputs[name] = write_table(output_path(config, f"study_{name}.csv"), frame, prov)
    return outputs


def create_parser() -> argparse.ArgumentParser:
    """Create and return the argument parser for the CLI."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--threads", type=int, help="Worker processes for chains and replicates")
    common.add_argument("--chains", type=int, help="Number of MCMC chains")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="Override one configuration value (repeatable)")
    common.add_argument("-v", "--verbose", action="count", default=0,
                        help="Log progress (-v) or debug detail (-vv)")

    parser = argparse.ArgumentParser(
        prog="sepbart",
        description="SepBART - heterogeneous effects of multivariate continuous exposures",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"SepBART v{__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="Draw a dataset from a simulation scenario")
    sub.add_parser("fit", parents=[common], help="Fit the model to a CSV dataset")
    estimate = sub.add_parser("estimate", parents=[common], help="Compute estimands from draw files")
    estimate.add_argument("draws", nargs="+", help="Draw files written by 'fit'")
    diagnose = sub.add_parser("diagnose", parents=[common], help="Convergence and positivity checks")
    diagnose.add_argument("draws", nargs="+", help="Draw files written by 'fit', one per chain")
    study = sub.add_parser("study", parents=[common], help="Run a replicate simulation study")
    study.add_argument("--scenario", choices=SCENARIOS, help="Scenario (overrides simulate.scenario)")
    study.add_argument("--replicates", type=int, help="Number of replicates (overrides study.replicates)")
    return parser


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def error_record(exc: BaseException) -> str:
    if isinstance(exc, SepBartError):
        return json.dumps(to_jsonable(exc.to_record()))
    return json.dumps({"error": type(exc).__name__, "message": str(exc), "details": {}})


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Main entry point for the CLI.

    Returns:
        Exit code (0 for success, 1 for a failed run, 2 for an invalid
        configuration, 130 when interrupted)
    """
    parser = create_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    try:
        if args.command == "study":
            if args.scenario:
                args.set = (args.set or []) + [f"simulate.scenario={args.scenario}"]
            if args.replicates is not None:
                args.set = (args.set or []) + [f"study.replicates={args.replicates}"]
        config = resolve_config(args)

        if args.command == "simulate":
            outputs = cmd_simulate(config)
        elif args.command == "fit":
            outputs = cmd_fit(config)
        elif args.command == "estimate":
            outputs = cmd_estimate(config, args.draws)
        elif args.command == "diagnose":
            outputs = cmd_diagnose(config, args.draws)
        else:
            outputs = cmd_study(config)

        print(json.dumps({"command": args.command, "outputs": outputs}, indent=2))
        return 0

    except KeyboardInterrupt:
        print(json.dumps({"error": "KeyboardInterrupt", "message": "operation cancelled", "details": {}}),
              file=sys.stderr)
        return 130
    except ConfigError as exc:
        print(error_record(exc), file=sys.stderr)
        return 2
    except SepBartError as exc:
        print(error_record(exc), file=sys.stderr)
        if args.verbose > 1:
            logger.exception("run failed")
        return 1
    except Exception as exc:
        print(error_record(exc), file=sys.stderr)
        if args.verbose:
            logger.exception("unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
