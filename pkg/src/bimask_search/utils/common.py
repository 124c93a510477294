import os
import logging

logger = logging.getLogger(__name__)

THREADS_ENV = "OFB_THREADS"
THREADS_ENV_ALIAS = "BIMASK_THREADS"
BLAS_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

def ensure_directories(*paths):
    """Create run directories if they don't exist"""
    for path in paths:
        os.makedirs(path, exist_ok=True)
    logger.info(f"Ensured directories exist: {', '.join(paths)}")

def configure_threads(environ=None):
    """
    Cap BLAS/OpenMP threads from OFB_THREADS (BIMASK_THREADS is read as an alias, default 1)

    Call before numpy is imported. Thread variables already set in the
    environment are left alone.

    Returns:
        int: The thread cap
    """
    environ = os.environ if environ is None else environ
    raw = environ.get(THREADS_ENV) or environ.get(THREADS_ENV_ALIAS) or "1"
    try:
        threads = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if threads < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    for var in BLAS_THREAD_VARS:
        environ.setdefault(var, str(threads))
    return threads
