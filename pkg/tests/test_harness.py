import pytest

from sentinel.harness import (
    ALL_KINDS, AttackScenario, ScenarioKind, UnsoundScenario, build_fixture, check_expectations,
    generate_corpus, run_evaluation, scenarios_for, verify_corpus,
)


def report_text(seed, n=40):
    with build_fixture(seed) as fx:
        report = run_evaluation(fx, scenarios_for(ALL_KINDS, seed), n=n)
        return report.table() + report.records(), check_expectations(report, fx)


def test_report_determinism():
    assert report_text(7) == report_text(7)


def test_expectations_hold():
    _, failures = report_text(3)
    assert failures == []


def test_records_format():
    with build_fixture(7) as fx:
        report = run_evaluation(fx, [AttackScenario(ScenarioKind.UNKNOWN_ACTION)], n=10)
    assert report.records() == "UnknownAction\t10\t10\t0\t1.0000\n"


def test_replayed_cert_exactly_one_allow():
    with build_fixture(7) as fx:
        report = run_evaluation(fx, [AttackScenario(ScenarioKind.REPLAYED_CERT)], n=30)
        res = report.result(ScenarioKind.REPLAYED_CERT)
    assert (res.allowed, res.denied, dict(res.reasons)) == (1, 29, {"replayed": 29})


@pytest.mark.parametrize("kind", list(ScenarioKind))
def test_corpora_are_sound(kind):
    with build_fixture(5) as fx:
        verify_corpus(AttackScenario(kind, 5), generate_corpus(AttackScenario(kind, 5), 60, fx), fx)


def test_mislabelled_corpus_rejected():
    with build_fixture(5) as fx:
        benign = generate_corpus(AttackScenario(ScenarioKind.BENIGN, 5), 5, fx)
        for kind in (ScenarioKind.INJECTION_PAYLOAD, ScenarioKind.FORGED_CERT, ScenarioKind.UNKNOWN_ACTION):
            with pytest.raises(UnsoundScenario):
                verify_corpus(AttackScenario(kind), benign, fx)


def test_flood_bounded():
    with build_fixture(7) as fx:
        report = run_evaluation(fx, [AttackScenario(ScenarioKind.FLOOD)])
        res = report.result(ScenarioKind.FLOOD)
        assert res.sent == 2 * fx.gateway.dos.cfg.max_requests
        assert res.max_allowed_in_window == fx.gateway.dos.cfg.max_requests
