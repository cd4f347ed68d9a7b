"""The check-suite engine: result collection, failure capture, table text.

Heavy suites (grad, overfit, track-synth) are exercised by the acceptance
tests; here we run the cheap ones and the bookkeeping around them.
"""

import pytest

from mmnet import verify
from mmnet.errors import ConfigError, InputError


def test_cheap_suites_all_pass():
    for name in ("oracle", "shape", "metrics"):
        results = verify.run_suites(name)
        assert results, name
        for r in results:
            assert r.passed, f"{r.name}: {r.detail}"


def test_check_captures_assertion_and_errors():
    s = verify._Suite()
    s.check("ok", lambda: "fine")
    s.check("bad", lambda: verify._fail(False, "because"))

    def boom():
        raise InputError("kaput")

    s.check("raises", boom)
    ok, bad, raises = s.results
    assert ok.passed and ok.detail == "fine"
    assert not bad.passed and bad.detail == "because"
    assert not raises.passed and "InputError" in raises.detail
    assert all(r.seconds >= 0 for r in s.results)


def test_unknown_suite_rejected():
    with pytest.raises(ConfigError):
        verify.run_suites("nonsense")


def test_format_table_shows_counts():
    s = verify._Suite()
    s.check("alpha", lambda: "")
    s.check("beta", lambda: verify._fail(False, "nope"))
    text = verify.format_table(s.results)
    assert "PASS  alpha" in text
    assert "FAIL  beta" in text
    assert "1/2 checks passed" in text


def test_overfit_pairs_are_fixed():
    a = verify.overfit_pairs()
    b = verify.overfit_pairs()
    assert len(a) == 8
    for pa, pb in zip(a, b):
        assert pa.displacement == pb.displacement
        assert (pa.exemplar == pb.exemplar).all()
        assert (pa.search == pb.search).all()
