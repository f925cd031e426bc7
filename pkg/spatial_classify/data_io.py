"""
Readers and writers for the files a run consumes and produces: the grid
CSV, fitted-model JSON, posterior chains as JSON lines, reports, and the
provenance records written next to every output.
"""
import datetime as dt
import json
import logging
import platform
import re
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import scipy

from spatial_classify import __version__
from spatial_classify.data_models import (
    Dataset,
    DecisionScore,
    ErrorReport,
    GridDomain,
    NeighborhoodMatrix,
    PosteriorSamples,
    RunConfig,
)
from spatial_classify.errors import DataFormatError, ValidationError
from spatial_classify.model_interface import (
    BAYESIAN_TAGS,
    BayesianClassifier,
    ClassifierInterface,
    load_classifier,
)
from spatial_classify.sglm_sglmm import build_artifacts
from spatial_classify.spatial_core import neighbors_from_adjacency

log = logging.getLogger(__name__)

PathLike = Union[str, Path]

REQUIRED_COLUMNS = ("row", "col", "y", "is_test")
COVARIATE_PATTERN = re.compile(r"^x(\d+)$")

DATA_FILE = "data.csv"
MODEL_FILE = "model.json"
CHAINS_FILE = "chains.jsonl"
META_FILE = "meta.json"
REPORT_CSV = "report.csv"
REPORT_JSON = "report.json"
CONFIG_FILE = "config.json"
PROVENANCE_FILE = "provenance.json"
PREDICTIONS_FILE = "predictions.csv"


def _written(path: Path) -> Path:
    log.info("wrote %s", path)
    return path


def ensure_dir(path: PathLike) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------- JSON ----------

def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, default=_default) + "\n", encoding="utf-8")
    return _written(path)


def read_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: not valid JSON ({e})") from e


# ---------- grid CSV ----------

def _covariate_columns(columns: Iterable[str]) -> List[str]:
    found = [(int(m.group(1)), c) for c in columns if (m := COVARIATE_PATTERN.match(c))]
    return [c for _, c in sorted(found)]


def read_dataset(path: PathLike) -> Dataset:
    """
    Grid CSV with columns row, col, y, x1..xl, is_test. An empty y marks a
    genuinely unobserved location, which is always held out.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, skipinitialspace=True)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise DataFormatError(f"{path}: unreadable CSV ({e})") from e
    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise DataFormatError(f"{path}: missing column(s)", missing)
    covs = _covariate_columns(frame.columns)
    numeric = ["row", "col", "is_test", *covs]
    bad = [c for c in numeric if not pd.api.types.is_numeric_dtype(frame[c]) or frame[c].isna().any()]
    y = pd.to_numeric(frame["y"], errors="coerce")
    if (frame["y"].notna() & y.isna()).any():
        bad.append("y")
    if bad:
        raise DataFormatError(f"{path}: non-numeric or empty values", bad)
    coords = frame[["row", "col"]].to_numpy(dtype=int)
    if pd.DataFrame(coords).duplicated().any():
        raise DataFormatError(f"{path}: repeated (row, col) locations", ["row", "col"])
    unobserved = y.isna().to_numpy()
    y = y.fillna(-1).to_numpy(dtype=int)
    test_mask = frame["is_test"].to_numpy(dtype=float) != 0
    X = np.column_stack([np.ones(len(frame)), frame[covs].to_numpy(dtype=float)]) if covs else np.ones((len(frame), 1))
    rows, cols = int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1
    full = rows * cols == len(frame) and coords.min() >= 0
    domain = GridDomain(rows, cols) if full and np.array_equal(coords, GridDomain(rows, cols).coords) else None
    log.info("read %d locations (%d covariates, %d held out) from %s",
             len(frame), len(covs), int((test_mask | unobserved).sum()), path)
    return Dataset(y=y, X=X, coords=coords, test_mask=test_mask | unobserved, domain=domain,
                   covariate_names=covs, label=path.stem)


def write_dataset(data: Dataset, path: PathLike) -> Path:
    frame = pd.DataFrame({"row": data.coords[:, 0], "col": data.coords[:, 1]})
    frame["y"] = pd.Series(data.y).where(data.y >= 0).astype("Int64")
    for j, name in enumerate(data.covariate_names, start=1):
        frame[name] = data.X[:, j]
    frame["is_test"] = data.test_mask.astype(int)
    path = Path(path)
    frame.to_csv(path, index=False, float_format="%.17g")
    return _written(path)


def read_adjacency(path: PathLike) -> NeighborhoodMatrix:
    """Square 0/1 matrix without header, one row per location in data order."""
    try:
        A = pd.read_csv(path, header=None).to_numpy(dtype=float)
    except (ValueError, pd.errors.ParserError) as e:
        raise DataFormatError(f"{path}: adjacency must be a numeric matrix ({e})") from e
    return neighbors_from_adjacency(A)


# ---------- chains ----------

def write_chains(samples: PosteriorSamples, path: PathLike) -> Path:
    """One retained draw per line: beta, gamma2, rho, kappa, z_test (and z_train when stored)."""
    path = Path(path)
    rho, kappa = samples.rho_draws(), samples.kappa_draws()
    with path.open("w", encoding="utf-8") as fh:
        for t in range(samples.n_draws):
            row = {
                "beta": samples.beta[t].tolist(),
                "gamma2": float(samples.gamma2[t]),
                "rho": float(rho[t]),
                "kappa": float(kappa[t]),
                "z_test": samples.z_test[t].tolist(),
            }
            if samples.z_train is not None:
                row["z_train"] = samples.z_train[t].tolist()
            fh.write(json.dumps(row) + "\n")
    return _written(path)


def read_chains(path: PathLike) -> Dict[str, np.ndarray]:
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        for k, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{k}: not valid JSON ({e})") from e
    if not rows:
        raise DataFormatError(f"{path}: no draws")
    keys = ["beta", "gamma2", "rho", "kappa", "z_test"] + (["z_train"] if "z_train" in rows[0] else [])
    missing = [key for key in keys if key not in rows[0]]
    if missing:
        raise DataFormatError(f"{path}: draws lack", missing)
    return {key: np.asarray([r[key] for r in rows], dtype=float) for key in keys}


def samples_from_chains(chains: Dict[str, np.ndarray], meta: Dict[str, Any], data: Dataset,
                        neighbors: Optional[NeighborhoodMatrix] = None) -> PosteriorSamples:
    """Rebuild posterior samples, and the artifacts they need, against the data they were fitted on."""
    model = meta.get("model")
    if model not in BAYESIAN_TAGS:
        raise ValidationError(f"chains belong to unknown model {model!r}")
    if meta.get("n_train") not in (None, data.n_train) or meta.get("n_test") not in (None, data.n_test):
        raise ValidationError("the data's training/held-out split differs from the one the chains were fitted on")
    artifacts = build_artifacts(model, data, neighbors, r_frac=meta.get("r_frac", 0.10),
                                fixed_kappa=meta.get("fixed_kappa"))
    T = chains["beta"].shape[0]
    return PosteriorSamples(
        model=model,
        beta=chains["beta"].reshape(T, -1),
        gamma2=chains["gamma2"],
        z_test=chains["z_test"].reshape(T, data.n_test),
        rho=chains["rho"] if model in ("sglm", "sglmm") else None,
        kappa=chains["kappa"] if model == "sglmm" and meta.get("fixed_kappa") is None else None,
        z_train=chains["z_train"].reshape(T, data.n_train) if "z_train" in chains else None,
        meta=dict(meta),
        artifacts=artifacts,
    )


# ---------- fitted models ----------

def save_fit(clf: ClassifierInterface, out_dir: PathLike) -> List[Path]:
    out = ensure_dir(out_dir)
    if isinstance(clf, BayesianClassifier):
        return [write_chains(clf.samples, out / CHAINS_FILE), write_json(out / META_FILE, clf.samples.meta),
                write_json(out / MODEL_FILE, clf.to_json())]
    return [write_json(out / MODEL_FILE, clf.to_json())]


def load_fit(fit_dir: PathLike, data: Dataset, neighbors: Optional[NeighborhoodMatrix] = None) -> ClassifierInterface:
    fit_dir = Path(fit_dir)
    model_path = fit_dir / MODEL_FILE
    if not model_path.exists():
        raise ValidationError(f"{fit_dir}: no {MODEL_FILE}; run fit first")
    payload = read_json(model_path)
    if payload.get("tag") in BAYESIAN_TAGS:
        meta = read_json(fit_dir / META_FILE)
        samples = samples_from_chains(read_chains(fit_dir / CHAINS_FILE), meta, data, neighbors)
        return BayesianClassifier.from_samples(samples, payload.get("decision", "predictive"))
    clf = load_classifier(payload)
    if neighbors is not None and hasattr(clf, "neighbors"):
        clf.neighbors = neighbors
    return clf


# ---------- reports ----------

def reports_frame(reports: Sequence[ErrorReport]) -> pd.DataFrame:
    columns = ["linear_component", "dataset", "kappa", "model_fit", "metric", "rate"]
    return pd.DataFrame([row for r in reports for row in r.to_rows()], columns=columns)


def write_reports(reports: Sequence[ErrorReport], out_dir: PathLike) -> List[Path]:
    out = ensure_dir(out_dir)
    csv_path = out / REPORT_CSV
    reports_frame(reports).to_csv(csv_path, index=False)
    _written(csv_path)
    return [csv_path, write_json(out / REPORT_JSON, [r.to_dict() for r in reports])]


def read_reports(path: PathLike) -> List[ErrorReport]:
    return [ErrorReport.from_dict(d) for d in read_json(path)]


def write_predictions(data: Dataset, sites: Sequence[int], scores: Sequence[DecisionScore],
                      labels: Sequence[int], path: PathLike) -> Path:
    sites = np.asarray(sites, dtype=int)
    frame = pd.DataFrame({
        "row": data.coords[sites, 0],
        "col": data.coords[sites, 1],
        "p1": [s.p1 for s in scores],
        "delta": [s.delta for s in scores],
        "y_hat": np.asarray(labels, dtype=int),
    })
    path = Path(path)
    frame.to_csv(path, index=False, float_format="%.17g")
    return _written(path)


# ---------- provenance ----------

def write_run_records(config: RunConfig, out_dir: PathLike, argv: Optional[Sequence[str]] = None,
                      streams: Optional[Dict[str, Any]] = None) -> List[Path]:
    """config.json (the resolved run) and provenance.json (versions, seed, streams, time, command line)."""
    out = ensure_dir(out_dir)
    provenance = {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "seed": config.seed,
        "streams": streams or {},
        "created_at": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "argv": list(sys.argv[1:] if argv is None else argv),
    }
    return [write_json(out / CONFIG_FILE, config.to_dict()), write_json(out / PROVENANCE_FILE, provenance)]
