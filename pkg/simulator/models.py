# simulator/models.py - Run ledger tables

from sqlalchemy import JSON, Boolean, Column, DateTime, Integer, String, Text, func
from sqlalchemy.orm import declarative_base

Base = declarative_base()


class RunRecord(Base):
    __tablename__ = "run_records"

    id = Column(Integer, primary_key=True, autoincrement=True)
    command = Column(String(50), nullable=False)  # 'simulate', 'study', 'validate-noise', 'selftest'
    master_seed = Column(Integer)
    config_json = Column(JSON)
    paths = Column(Integer, default=0)
    aborted = Column(Integer, default=0)
    passed = Column(Boolean, default=False)
    output_dir = Column(String(500))
    summary_json = Column(JSON)
    created_at = Column(DateTime, default=func.current_timestamp())


class AbortRecord(Base):
    __tablename__ = "abort_records"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, nullable=False)
    path_index = Column(Integer, nullable=False)
    seed = Column(Integer)
    step = Column(Integer)
    cause = Column(Text)
    created_at = Column(DateTime, default=func.current_timestamp())
