"""
Process-level helpers: logging setup, thread budget, JSON writing
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, MutableMapping, Optional, Union

from dotenv import load_dotenv

PathLike = Union[str, Path]

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def load_environment() -> None:
    """Load a .env file from the working directory, if present"""
    load_dotenv(override=False)


def setup_logging(out_dir: PathLike = None, log_name: str = "s2me.log") -> logging.Logger:
    """Configure root logging with a run-local file handler and a console handler"""
    level_name = os.getenv("S2ME_LOG_LEVEL", "INFO").upper()
    handlers = [logging.StreamHandler()]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        handlers.insert(0, logging.FileHandler(os.path.join(out_dir, log_name)))

    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
    return logging.getLogger("s2me")


def thread_budget() -> int:
    """Worker count for joblib fan-out, capped by S2ME_THREADS"""
    try:
        return max(1, int(os.getenv("S2ME_THREADS", "1")))
    except ValueError:
        return 1


NATIVE_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def limit_native_threads(environ: Optional[MutableMapping[str, str]] = None) -> int:
    """Cap BLAS/OpenMP threads at the S2ME_THREADS budget.

    Only takes effect before numpy is first imported; values already set in
    the environment win.
    """
    environ = os.environ if environ is None else environ
    budget = thread_budget()
    for name in NATIVE_THREAD_VARS:
        environ.setdefault(name, str(budget))
    return budget


def write_json(path: PathLike, payload: Any) -> None:
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def read_json(path: PathLike) -> Any:
    with open(path, 'r') as f:
        return json.load(f)
