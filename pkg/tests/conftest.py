import os
import sys

# deterministic single-thread BLAS before numpy loads anywhere
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import pytest

from skim import tensor as T


@pytest.fixture(autouse=True)
def _clean_tensor_state():
    T.set_default_dtype("float32")
    T.clear_tape()
    yield
    T.set_default_dtype("float32")
    T.clear_tape()


def pytest_terminal_summary(terminalreporter):
    # replay the acceptance verdict lines after capture ends, so they show
    # in a plain `pytest -v` run
    mod = (sys.modules.get("test_acceptance")
           or sys.modules.get("tests.test_acceptance"))
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in verdicts:
            terminalreporter.write_line(line)
