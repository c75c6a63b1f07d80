# simulator/db.py - Run ledger session handling

import logging
from contextlib import contextmanager
from typing import Iterable, Iterator, Optional

from sqlalchemy import create_engine
from sqlalchemy.orm import Session, sessionmaker

from simulator.config import DATABASE_URL
from simulator.models import AbortRecord, Base, RunRecord

logger = logging.getLogger(__name__)

_engines = {}


def get_sessionmaker(url: Optional[str] = None) -> Optional[sessionmaker]:
    """Session factory for the ledger; None when the ledger is disabled (empty URL)."""
    url = DATABASE_URL if url is None else url
    if not url:
        return None
    if url not in _engines:
        engine = create_engine(url)
        Base.metadata.create_all(bind=engine)
        _engines[url] = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    return _engines[url]


@contextmanager
def get_db(url: Optional[str] = None) -> Iterator[Optional[Session]]:
    """Yield a ledger session (or None if disabled); commits on success, rolls back on error."""
    factory = get_sessionmaker(url)
    if factory is None:
        yield None
        return
    db = factory()
    try:
        yield db
        db.commit()
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()


def record_run(
    command: str,
    master_seed: Optional[int],
    config_json: dict,
    paths: int,
    aborts: Iterable[dict],
    passed: bool,
    output_dir: str,
    summary: dict,
    url: Optional[str] = None,
) -> Optional[int]:
    """Append one run (and its aborted paths) to the ledger; returns the run id."""
    aborts = list(aborts)
    try:
        with get_db(url) as db:
            if db is None:
                return None
            run = RunRecord(
                command=command,
                master_seed=master_seed,
                config_json=config_json,
                paths=paths,
                aborted=len(aborts),
                passed=passed,
                output_dir=output_dir,
                summary_json=summary,
            )
            db.add(run)
            db.flush()
            for abort in aborts:
                db.add(
                    AbortRecord(
                        run_id=run.id,
                        path_index=abort["path"],
                        seed=abort.get("seed"),
                        step=abort.get("step"),
                        cause=abort.get("cause"),
                    )
                )
            return run.id
    except Exception as exc:
        # the ledger is bookkeeping only
        logger.warning("could not write run ledger: %s", exc)
        return None
