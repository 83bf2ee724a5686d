import pytest

from weathermoe import gradcheck


@pytest.mark.parametrize("name", sorted(gradcheck.CASES))
def test_gradient_case(name):
    errs, _ = gradcheck.check(name, instances=2, seed=101)
    assert max(errs) < 1e-3


def test_every_module_is_covered():
    assert {m for m, _ in gradcheck.CASES.values()} == {"nncore", "wse", "lrc"}


def test_redraws_are_deterministic():
    assert gradcheck.check("expert", instances=2, seed=5) == gradcheck.check("expert", instances=2, seed=5)
