from sqlalchemy import (
    create_engine,
    Column,
    Integer,
    Float,
    String,
    Text,
    DateTime,
    Boolean,
)
from sqlalchemy.orm import sessionmaker, declarative_base
from datetime import datetime
import json
import math
import os
import logging

logger = logging.getLogger(__name__)
Base = declarative_base()


class StudyRun(Base):
    """One invocation of a study."""

    __tablename__ = "study_runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    started_at = Column(DateTime, default=datetime.now)
    kind = Column(String(32), nullable=False)
    config_hash = Column(String(64), nullable=False)
    master_seed = Column(Integer, nullable=False)
    version = Column(String(32), nullable=True)
    output_path = Column(Text, nullable=True)
    status = Column(String(20), default="running")

    def __repr__(self):
        return f"<StudyRun(id={self.id}, kind={self.kind}, seed={self.master_seed})>"


class StudyRowRecord(Base):
    """A report row as written to the CSV."""

    __tablename__ = "study_rows"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, nullable=False)
    x = Column(Float, nullable=True)
    trial = Column(Integer, nullable=False)
    seed = Column(Integer, nullable=False)
    oracle = Column(String(32), nullable=True)
    feasible = Column(Boolean, default=True)
    metrics_json = Column(Text, nullable=True)
    error = Column(Text, nullable=True)

    def __repr__(self):
        return f"<StudyRowRecord(run={self.run_id}, x={self.x}, trial={self.trial})>"


def _finite_or_none(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class ResultStore:
    """SQLite ledger of study runs; the CSV report stays authoritative."""

    def __init__(self, config):
        self.config = config
        db_path = self.config.get("database.path")

        db_dir = os.path.dirname(db_path)
        if db_dir:
            os.makedirs(db_dir, exist_ok=True)

        db_url = f"sqlite:///{db_path}"
        self.engine = create_engine(db_url, echo=False)
        Base.metadata.create_all(self.engine)

        self.Session = sessionmaker(bind=self.engine)
        logger.info(f"Result store initialized at {db_path}")

    def start_run(self, kind, config_hash, master_seed, version, output_path):
        session = self.Session()
        try:
            record = StudyRun(
                kind=kind,
                config_hash=config_hash,
                master_seed=int(master_seed),
                version=version,
                output_path=str(output_path),
            )
            session.add(record)
            session.commit()
            logger.info(f"Registered study run {record.id} ({kind})")
            return record.id
        except Exception as e:
            session.rollback()
            logger.error(f"Failed to register study run: {e}")
            raise
        finally:
            session.close()

    def save_row(self, run_id, row):
        session = self.Session()
        try:
            metrics = {k: _finite_or_none(v) for k, v in row.metrics.items()}
            record = StudyRowRecord(
                run_id=run_id,
                x=_finite_or_none(float(row.x)),
                trial=row.trial,
                seed=row.seed,
                oracle=row.oracle,
                feasible=row.feasible,
                metrics_json=json.dumps(metrics, sort_keys=True),
                error=row.error,
            )
            session.add(record)
            session.commit()
        except Exception as e:
            session.rollback()
            logger.error(f"Failed to save study row: {e}")
            raise
        finally:
            session.close()

    def finish_run(self, run_id, status):
        session = self.Session()
        try:
            record = session.query(StudyRun).filter(StudyRun.id == run_id).first()
            if record:
                record.status = status
                session.commit()
                logger.info(f"Study run {run_id} marked '{status}'")
            else:
                logger.warning(f"Study run {run_id} not found")
        except Exception as e:
            session.rollback()
            logger.error(f"Failed to update study run status: {e}")
            raise
        finally:
            session.close()

    def get_rows(self, run_id):
        session = self.Session()
        try:
            return (
                session.query(StudyRowRecord)
                .filter(StudyRowRecord.run_id == run_id)
                .order_by(StudyRowRecord.id)
                .all()
            )
        finally:
            session.close()

    def get_runs(self, kind=None):
        session = self.Session()
        try:
            query = session.query(StudyRun)
            if kind is not None:
                query = query.filter(StudyRun.kind == kind)
            return query.order_by(StudyRun.started_at.asc()).all()
        finally:
            session.close()
