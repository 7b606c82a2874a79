import pytest

from cxrgraph.rules import (
    DISEASES,
    RANK_PROBABILITIES,
    RuleFileError,
    Severity,
    default_rules_path,
    load_rules,
    parse_rules,
)


@pytest.fixture(scope="module")
def rules_text():
    return default_rules_path().read_text()


def test_shipped_tables(rules_text):
    rules = parse_rules(rules_text)
    assert tuple(rules.disease_keywords) == DISEASES
    assert sum(len(v) for v in rules.disease_keywords.values()) == 62
    assert {r.rank: r.probability for r in rules.uncertainty_ranks} == RANK_PROBABILITIES
    assert rules.phrases_for_rank(6) == ("no",)
    assert rules.phrases_for_rank(5) == ()
    assert rules.severity_map["mild to moderate"] is Severity.MODERATE
    assert rules.severity_map["moderate to severe"] is Severity.SEVERE
    assert rules.severity_map["trace"] is Severity.MILD


def test_checksum_tracks_content(rules_text):
    a = parse_rules(rules_text)
    b = parse_rules(rules_text + "\n# edited\n")
    assert a.checksum == parse_rules(rules_text).checksum
    assert a.checksum != b.checksum


def test_probabilities_are_editable(rules_text):
    edited = rules_text.replace("probability: 0.7", "probability: 0.8")
    assert parse_rules(edited).probability(2) == 0.8


def _error(text) -> RuleFileError:
    with pytest.raises(RuleFileError) as info:
        parse_rules(text)
    return info.value


def test_unknown_disease_reports_its_line(rules_text):
    text = rules_text.replace("  Hernia: [hernia]", "  Hernia: [hernia]\n  Rickets: [rickets]")
    err = _error(text)
    assert "Rickets" in str(err)
    assert err.line == text.splitlines().index("  Rickets: [rickets]") + 1


def test_missing_disease(rules_text):
    assert "Hernia" in str(_error(rules_text.replace("  Hernia: [hernia]\n", "")))


def test_duplicate_keyword(rules_text):
    err = _error(rules_text.replace("  Hernia: [hernia]", "  Hernia: [hernia, emphysema]"))
    assert "emphysema" in str(err)


def test_malformed_yaml_has_line():
    err = _error("diseases:\n  a: [b\nseverity: {}\n")
    assert err.line is not None


def test_rank_five_must_be_empty(rules_text):
    assert "rank 5" in str(_error(rules_text.replace("phrases: []", "phrases: [unmentioned]")))


def test_probabilities_must_decrease(rules_text):
    assert "decrease" in str(_error(rules_text.replace("probability: 0.3", "probability: 0.6")))


def test_missing_section():
    assert "severity" in str(_error("diseases: {}\nuncertainty: []\n"))


def test_load_rules_default_matches_path():
    assert load_rules().checksum == load_rules(default_rules_path()).checksum
