"""
Command line: simulate | fit | classify | evaluate | compare.

Every command writes into --out, echoes its resolved configuration to
config.json and records versions, seed and streams in provenance.json.
"""
import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from spatial_classify import __version__, data_io, env
from spatial_classify.data_models import (
    LINEAR_COMPONENTS,
    SPLITS,
    NeighborhoodMatrix,
    RngStream,
    RunConfig,
    Scenario,
)
from spatial_classify.db_models import create_db, make_engine
from spatial_classify.db_repo import create_run, record_reports, summarize_rates
from spatial_classify.errors import SpatialClassifyError, ValidationError
from spatial_classify.eval_sim import (
    apply_split,
    evaluate_classifiers,
    evaluate_fitted,
    fit_classifier,
    run_replicate_study,
    simulate_dataset,
)
from spatial_classify.model_interface import BayesianClassifier, labels_from_scores, resolve_tags
from spatial_classify.plots import classification_map_svg, error_vs_kappa, write_ascii_map
from spatial_classify.sglm_sglmm import summarize_posterior

log = logging.getLogger(__name__)

DEFAULT_KAPPAS = (0.25, 0.5, 1.0)
DEFAULT_COMPARE_TAGS = ("sglm", "sglmm", "probit")

# stream ids under the run seed
SIMULATE_STREAM, SPLIT_STREAM, FIT_STREAM, SCORE_STREAM = 0, 1, 2, 3

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


# ───────── arguments ─────────

def _csv_list(raw: str) -> List[str]:
    return [part.strip() for part in raw.split(",") if part.strip()]


def _float_list(raw: str) -> List[float]:
    try:
        return [float(v) for v in _csv_list(raw)]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {raw!r}") from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of run settings; flags override it")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--seed", type=int, help="run seed (default 0)")
    common.add_argument("--threads", type=int, help=f"worker cap, further capped by {env.THREADS_VAR}")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="grid CSV with row, col, y, x1..xl, is_test")
    data.add_argument("--adjacency", help="0/1 adjacency matrix CSV (default: 8-neighbour lattice)")
    data.add_argument("--standardize", action="store_const", const=True, help="center and scale covariates")

    mcmc = argparse.ArgumentParser(add_help=False)
    mcmc.add_argument("--iters", type=int, help="MCMC iterations (default 20000)")
    mcmc.add_argument("--burn-in", dest="burn_in", type=int, help="burn-in iterations (default iters/2)")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--rho", type=float, help="CAR dependence of the simulated field (default 0.99)")
    sim.add_argument("--split", choices=SPLITS, help="held-out selection for simulated data (default clustered)")

    ap = argparse.ArgumentParser(prog="spatial-classify", description="Spatial binary classification on lattices")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("simulate", parents=[common, sim], help="simulate one dataset")
    p.add_argument("--scenario", help=f"linear component: {', '.join(LINEAR_COMPONENTS)}")
    p.add_argument("--kappa", type=float, help="spatial share of the latent variance, in [0, 1]")

    p = sub.add_parser("fit", parents=[common, data, mcmc], help="fit one model")
    p.add_argument("--model", help="classifier tag, e.g. sglm, sglmm, probit, lowrank, lda, svm-radial")

    p = sub.add_parser("classify", parents=[common, data], help="classify held-out sites with a saved fit")
    p.add_argument("--fit", dest="fit_dir", help="directory written by fit (default: --out)")
    p.add_argument("--plot", action="store_const", const=True, help="also write classification_map.svg")

    p = sub.add_parser("evaluate", parents=[common, data, mcmc], help="error rates on one dataset")
    p.add_argument("--classifiers", type=_csv_list, help="comma-separated tags or 'all'")
    p.add_argument("--fit", dest="fit_dir", help="evaluate a saved fit instead of fitting")
    p.add_argument("--kappa", type=float, help="kappa to label the report with")
    p.add_argument("--plot", action="store_const", const=True, help="also write error_vs_kappa.svg")

    p = sub.add_parser("compare", parents=[common, mcmc, sim], help="replicate study over scenarios")
    p.add_argument("--classifiers", type=_csv_list, help="comma-separated tags or 'all'")
    p.add_argument("--components", type=_csv_list, help="linear components (default all)")
    p.add_argument("--kappas", type=_float_list, help="comma-separated kappas (default 0.25,0.5,1)")
    p.add_argument("--replicates", type=int, help="datasets per (component, kappa) (default 3)")
    p.add_argument("--standardize", action="store_const", const=True, help="center and scale covariates")
    return ap


def component_name(raw: str) -> str:
    """Canonical linear component for a case-insensitive name ('simple1' -> 'Simple1')."""
    lookup = {c.lower(): c for c in LINEAR_COMPONENTS}
    name = lookup.get(raw.strip().lower().replace("-", "").replace("_", ""))
    if name is None:
        raise ValidationError(f"unknown scenario {raw!r}; expected one of {', '.join(LINEAR_COMPONENTS)}")
    return name


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """RunConfig from --config overlaid by every flag given on the command line."""
    base: Dict[str, Any] = {}
    if args.config:
        base = data_io.read_json(args.config)
        if not isinstance(base, dict):
            raise ValidationError(f"{args.config}: expected a JSON object")
        base.pop("command", None)
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    flags = {k: v for k, v in vars(args).items() if k in fields and v is not None}
    return RunConfig.from_mapping({**base, **flags, "command": args.command})


def setup_logging(verbose: int) -> int:
    level = {0: env.log_level(), 1: "INFO"}.get(verbose, "DEBUG")
    if not isinstance(logging.getLevelName(level), int):
        level = env.DEFAULT_LOG_LEVEL
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    return logging.getLogger().getEffectiveLevel()


def _announce(paths: Sequence[Path]) -> None:
    for path in paths:
        print(f"wrote {path}", file=sys.stderr)


# ───────── shared steps ─────────

def _load_data(cfg: RunConfig):
    if not cfg.data:
        raise ValidationError("--data is required")
    data = data_io.read_dataset(cfg.data)
    scenario_file = Path(cfg.data).with_name("scenario.json")
    if scenario_file.exists():
        # simulated data keeps its setting for report labels
        sc = data_io.read_json(scenario_file)
        data.linear_component = sc.get("linear_component", "")
        data.kappa = sc.get("kappa")
    if cfg.kappa is not None:
        data.kappa = cfg.kappa
    if cfg.standardize:
        data = data.standardized()
    neighbors: Optional[NeighborhoodMatrix] = None
    if cfg.adjacency:
        neighbors = data_io.read_adjacency(cfg.adjacency)
        if neighbors.n != data.n:
            raise ValidationError(f"adjacency has {neighbors.n} locations, data has {data.n}")
    return data, neighbors


def _finish(cfg: RunConfig, argv: Optional[Sequence[str]], streams: Dict[str, Any], paths: List[Path]) -> List[Path]:
    paths += data_io.write_run_records(cfg, cfg.out, argv, streams)
    _announce(paths)
    return paths


# ───────── commands ─────────

def cmd_simulate(cfg: RunConfig, argv: Optional[Sequence[str]] = None) -> List[Path]:
    if not cfg.scenario:
        raise ValidationError("--scenario is required")
    if cfg.kappa is None:
        raise ValidationError("--kappa is required")
    scenario = Scenario(component_name(cfg.scenario), cfg.kappa, rho=cfg.rho, rows=cfg.rows, cols=cfg.cols,
                        replicate_seed=cfg.seed)
    run = RngStream(cfg.seed)
    data = simulate_dataset(scenario, run.child(SIMULATE_STREAM))
    data = apply_split(data, cfg.split, run.child(SPLIT_STREAM), cfg.test_fraction)
    out = data_io.ensure_dir(cfg.out)
    summary = {**dataclasses.asdict(scenario), "beta": scenario.beta.tolist(), "split": cfg.split,
               "n_test": data.n_test, "test_fraction": data.n_test / data.n, "class1_fraction": float(data.y.mean())}
    paths = [data_io.write_dataset(data, out / data_io.DATA_FILE), data_io.write_json(out / "scenario.json", summary)]
    return _finish(cfg, argv, {"simulate": SIMULATE_STREAM, "split": SPLIT_STREAM}, paths)


def cmd_fit(cfg: RunConfig, argv: Optional[Sequence[str]] = None) -> List[Path]:
    if not cfg.model:
        raise ValidationError("--model is required")
    tag = resolve_tags([cfg.model])[0]
    data, neighbors = _load_data(cfg)
    started = time.perf_counter()
    clf, meta = fit_classifier(tag, data, cfg, RngStream(cfg.seed).child(FIT_STREAM), neighbors)
    out = data_io.ensure_dir(cfg.out)
    paths = data_io.save_fit(clf, out)
    report: Dict[str, Any] = {"model": tag, "n_train": data.n_train, "n_test": data.n_test,
                              "wall_time": time.perf_counter() - started, **meta}
    if isinstance(clf, BayesianClassifier):
        m = clf.samples.meta
        report.update(geweke=m.get("geweke", {}), geweke_flagged=m.get("geweke_flagged", []),
                      acceptance=m.get("acceptance", {}), n_draws=clf.samples.n_draws,
                      posterior=summarize_posterior(clf.samples).to_dict(orient="index"))
        if m.get("geweke_flagged"):
            log.warning("%s: Geweke |z| > 4 for %s", tag, ", ".join(m["geweke_flagged"]))
    paths.append(data_io.write_json(out / "fit_report.json", report))
    return _finish(cfg, argv, {"fit": FIT_STREAM}, paths)


def cmd_classify(cfg: RunConfig, argv: Optional[Sequence[str]] = None) -> List[Path]:
    data, neighbors = _load_data(cfg)
    fit_dir = Path(cfg.fit_dir or cfg.out)
    clf = data_io.load_fit(fit_dir, data, neighbors)
    sites = data.test_idx
    if sites.size == 0:
        raise ValidationError("no held-out or unobserved locations to classify")
    gen = RngStream(cfg.seed).child(SCORE_STREAM).generator()
    scores = clf.score(data, sites, rng=gen)
    labels = labels_from_scores(scores, gen)
    out = data_io.ensure_dir(cfg.out)
    paths = [data_io.write_predictions(data, sites, scores, labels, out / data_io.PREDICTIONS_FILE),
             write_ascii_map(data, sites, labels, out / "classification_map.txt")]
    if cfg.plot:
        paths.append(classification_map_svg(data, sites, labels, out / "classification_map.svg", title=clf.tag))
    known = data.y[sites] >= 0
    if known.any():
        log.info("%s: %.4f error on %d labelled held-out sites", clf.tag,
                 float(np.mean(labels[known] != data.y[sites][known])), int(known.sum()))
    return _finish(cfg, argv, {"score": SCORE_STREAM}, paths)


def cmd_evaluate(cfg: RunConfig, argv: Optional[Sequence[str]] = None) -> List[Path]:
    data, neighbors = _load_data(cfg)
    run = RngStream(cfg.seed)
    if cfg.fit_dir:
        clf = data_io.load_fit(cfg.fit_dir, data, neighbors)
        if cfg.classifiers and clf.tag not in resolve_tags(cfg.classifiers):
            raise ValidationError(f"saved fit is {clf.tag!r}, not one of {', '.join(cfg.classifiers)}")
        reports = [evaluate_fitted(clf, data, run.child(SCORE_STREAM), cfg.eval_draws)]
    else:
        tags = cfg.classifiers or ([cfg.model] if cfg.model else [])
        if not tags:
            raise ValidationError("--classifiers (or --fit) is required")
        reports = evaluate_classifiers(data, tags, cfg, run.child(FIT_STREAM), neighbors)
        if not reports:
            raise SpatialClassifyError("no classifier could be fitted to this dataset")
    paths = data_io.write_reports(reports, cfg.out)
    if cfg.plot:
        if data.kappa is None:
            log.warning("no kappa known for %s; error_vs_kappa.svg not written", cfg.data)
        else:
            paths.append(error_vs_kappa(data_io.reports_frame(reports), Path(cfg.out) / "error_vs_kappa.svg"))
    return _finish(cfg, argv, {"fit": FIT_STREAM, "score": SCORE_STREAM}, paths)


def cmd_compare(cfg: RunConfig, argv: Optional[Sequence[str]] = None) -> List[Path]:
    components = [component_name(c) for c in (cfg.components or LINEAR_COMPONENTS)]
    kappas = cfg.kappas or list(DEFAULT_KAPPAS)
    tags = resolve_tags(cfg.classifiers or DEFAULT_COMPARE_TAGS)
    for k in kappas:
        if not 0.0 <= k <= 1.0:
            raise ValidationError(f"kappa must lie in [0, 1], got {k}")
    reports = run_replicate_study(components, kappas, cfg.replicates, tags, cfg, cfg.seed, cfg.threads)
    if not reports:
        raise SpatialClassifyError("the replicate study produced no reports")
    out = data_io.ensure_dir(cfg.out)
    paths = data_io.write_reports(reports, out)
    db_path = out / env.results_db_name()
    engine = make_engine(db_path)
    try:
        create_db(engine)
        run = create_run(engine, cfg.command, cfg.seed, cfg.to_dict())
        record_reports(engine, run.id, reports)
        summary = summarize_rates(engine, run.id)
    finally:
        engine.dispose()
    paths.append(db_path)
    summary_path = out / "summary.csv"
    summary.to_csv(summary_path, index=False)
    paths.append(summary_path)
    paths.append(error_vs_kappa(data_io.reports_frame(reports), out / "error_vs_kappa.svg"))
    return _finish(cfg, argv, {"replicates": "child k of the run seed, in component/kappa/replicate order"}, paths)


HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    level = setup_logging(args.verbose)
    try:
        cfg = resolve_config(args)
        cfg.progress = level <= logging.INFO
        HANDLERS[cfg.command](cfg, argv)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (SpatialClassifyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
