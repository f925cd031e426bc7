# db_models.py
# SQLAlchemy models for the replicate-study results store (SQLite)
from __future__ import annotations

import datetime as dt
import uuid
from pathlib import Path
from typing import Optional, Union

from sqlalchemy import TIMESTAMP, Boolean, Float, ForeignKey, Index, Integer, String, Text, create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import DeclarativeBase, Mapped, Session, mapped_column, relationship, sessionmaker


# ---------- base / engine / session ----------
class Base(DeclarativeBase):
    pass

def uid() -> str: return str(uuid.uuid4())
def now_utc() -> dt.datetime: return dt.datetime.now(dt.timezone.utc).replace(tzinfo=None)

def make_engine(path: Union[str, Path]) -> Engine:
    """SQLite engine for a results file; ':memory:' gives a throwaway store."""
    url = "sqlite://" if str(path) == ":memory:" else f"sqlite:///{Path(path)}"
    return create_engine(url, echo=False, future=True)


# ---------- tables ----------
class Run(Base):
    __tablename__ = "runs"
    id: Mapped[str] = mapped_column(String, primary_key=True, default=uid)
    command: Mapped[str] = mapped_column(String)
    created_at: Mapped[dt.datetime] = mapped_column(TIMESTAMP, default=now_utc, index=True)
    seed: Mapped[int] = mapped_column(Integer, default=0)
    config_json: Mapped[str] = mapped_column(Text, default="{}")

    rates = relationship("ErrorRate", back_populates="run", cascade="all, delete-orphan")

class ErrorRate(Base):
    __tablename__ = "error_rates"
    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    run_id: Mapped[str] = mapped_column(ForeignKey("runs.id"), index=True)
    linear_component: Mapped[str] = mapped_column(String, default="")
    dataset: Mapped[str] = mapped_column(String, default="")
    kappa: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    model_fit: Mapped[str] = mapped_column(String)
    metric: Mapped[str] = mapped_column(String)  # 'training_oaat','training_joint','training','test'
    rate: Mapped[float] = mapped_column(Float)
    n_train: Mapped[int] = mapped_column(Integer, default=0)
    n_test: Mapped[int] = mapped_column(Integer, default=0)
    wall_time: Mapped[float] = mapped_column(Float, default=0.0)
    geweke_flagged: Mapped[bool] = mapped_column(Boolean, default=False)

    run = relationship("Run", back_populates="rates")

Index("idx_rates_group", ErrorRate.linear_component, ErrorRate.kappa, ErrorRate.model_fit, ErrorRate.metric)


# ---------- helpers ----------
def create_db(engine: Engine) -> None:
    Base.metadata.create_all(engine)

def get_session(engine: Engine) -> Session:
    return sessionmaker(bind=engine, expire_on_commit=False, future=True)()
