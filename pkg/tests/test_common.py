import logging

import pytest

from bimask_search.utils.common import BLAS_THREAD_VARS, configure_threads, ensure_directories
from bimask_search.utils.config import RUN_LOG_FILE, attach_run_log, detach_run_log


class TestThreads:
    def test_reads_ofb_threads(self):
        environ = {"OFB_THREADS": "3"}
        assert configure_threads(environ) == 3
        for var in BLAS_THREAD_VARS:
            assert environ[var] == "3"

    def test_alias_when_primary_absent(self):
        assert configure_threads({"BIMASK_THREADS": "2"}) == 2

    def test_primary_wins_over_alias(self):
        assert configure_threads({"OFB_THREADS": "4", "BIMASK_THREADS": "2"}) == 4

    def test_defaults_to_one(self):
        environ = {}
        assert configure_threads(environ) == 1
        assert environ["OMP_NUM_THREADS"] == "1"

    def test_keeps_preset_thread_vars(self):
        environ = {"OFB_THREADS": "3", "OMP_NUM_THREADS": "8"}
        configure_threads(environ)
        assert environ["OMP_NUM_THREADS"] == "8"
        assert environ["MKL_NUM_THREADS"] == "3"

    @pytest.mark.parametrize("raw", ["two", "0", "-1"])
    def test_rejects_bad_values(self, raw):
        with pytest.raises(ValueError, match="OFB_THREADS"):
            configure_threads({"OFB_THREADS": raw})


class TestRunLog:
    def test_mirrors_records_until_detached(self, tmp_path):
        ensure_directories(str(tmp_path / "run"))
        log = logging.getLogger("bimask_search.tests.run_log")
        log.setLevel(logging.INFO)
        handler = attach_run_log(str(tmp_path / "run"))
        try:
            log.info("kept while attached")
        finally:
            detach_run_log(handler)
        log.info("dropped after detach")
        text = (tmp_path / "run" / RUN_LOG_FILE).read_text()
        assert "kept while attached" in text
        assert "dropped after detach" not in text
