# db_repo.py
import json
import logging
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
from sqlalchemy import delete, func, select
from sqlalchemy.engine import Engine

from spatial_classify.data_models import ErrorReport
from spatial_classify.db_models import ErrorRate, Run, get_session

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["linear_component", "kappa", "model_fit", "metric", "mean_rate", "n"]


# ---------- RUNS ----------
def create_run(engine: Engine, command: str, seed: int = 0, config: Optional[Dict[str, Any]] = None) -> Run:
    with get_session(engine) as db:
        r = Run(command=command, seed=seed, config_json=json.dumps(config or {}, default=str))
        db.add(r); db.commit(); db.refresh(r)
        return r

def get_run(engine: Engine, run_id: str) -> Optional[Run]:
    with get_session(engine) as db:
        return db.get(Run, run_id)

def delete_run(engine: Engine, run_id: str) -> bool:
    with get_session(engine) as db:
        db.execute(delete(ErrorRate).where(ErrorRate.run_id == run_id))
        rows = db.execute(delete(Run).where(Run.id == run_id)).rowcount
        db.commit()
        return rows > 0


# ---------- ERROR RATES ----------
def record_reports(engine: Engine, run_id: str, reports: Sequence[ErrorReport]) -> int:
    """One row per report and metric; returns the number of rows written."""
    with get_session(engine) as db:
        if db.get(Run, run_id) is None:
            raise KeyError(f"no run {run_id}")
        n = 0
        for rep in reports:
            for metric, rate in rep.rates().items():
                db.add(ErrorRate(
                    run_id=run_id,
                    linear_component=rep.linear_component,
                    dataset=rep.dataset,
                    kappa=rep.kappa,
                    model_fit=rep.classifier,
                    metric=metric,
                    rate=rate,
                    n_train=rep.n_train,
                    n_test=rep.n_test,
                    wall_time=rep.wall_time,
                    geweke_flagged=bool(rep.geweke_flags),
                ))
                n += 1
        db.commit()
    log.info("stored %d error rates for run %s", n, run_id)
    return n

def list_rates(engine: Engine, run_id: Optional[str] = None, model_fit: Optional[str] = None,
               metric: Optional[str] = None) -> List[ErrorRate]:
    with get_session(engine) as db:
        q = select(ErrorRate)
        if run_id is not None:
            q = q.where(ErrorRate.run_id == run_id)
        if model_fit is not None:
            q = q.where(ErrorRate.model_fit == model_fit)
        if metric is not None:
            q = q.where(ErrorRate.metric == metric)
        q = q.order_by(ErrorRate.linear_component, ErrorRate.kappa, ErrorRate.model_fit, ErrorRate.id)
        return list(db.execute(q).scalars().all())

def summarize_rates(engine: Engine, run_id: Optional[str] = None) -> pd.DataFrame:
    """Mean rate per (component, kappa, model, metric)."""
    keys = (ErrorRate.linear_component, ErrorRate.kappa, ErrorRate.model_fit, ErrorRate.metric)
    q = select(*keys, func.avg(ErrorRate.rate), func.count(ErrorRate.id)).group_by(*keys).order_by(*keys)
    if run_id is not None:
        q = q.where(ErrorRate.run_id == run_id)
    with get_session(engine) as db:
        rows = db.execute(q).all()
    return pd.DataFrame([tuple(r) for r in rows], columns=SUMMARY_COLUMNS)
