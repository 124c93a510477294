import numpy as np

from bimask_search.engine import functional as F
from bimask_search.engine.tensor import as_tensor, make_node
from bimask_search.training.gradcheck_suite import TOLERANCE, primitive_cases, run_gradcheck, search_cases


def wrong_sigmoid(x):
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        return (g * out,)

    return make_node(out, (x,), "sigmoid", backward)


class TestGradcheckSuite:
    def test_every_case_passes(self):
        report = run_gradcheck(seed=0)
        assert report["passed"], report["failed"]
        assert report["max_error"] < TOLERANCE
        assert {"reverse_cumsum", "layer_norm", "search_objective", "g_of_V"} <= set(report["cases"])

    def test_case_names_are_unique(self):
        names = [name for name, _, _ in primitive_cases() + search_cases()]
        assert len(names) == len(set(names))

    def test_broken_backward_is_reported(self, monkeypatch):
        monkeypatch.setattr(F, "sigmoid", wrong_sigmoid)
        report = run_gradcheck(seed=0)
        assert not report["passed"]
        assert "sigmoid" in report["failed"]
        assert "exp" not in report["failed"]
