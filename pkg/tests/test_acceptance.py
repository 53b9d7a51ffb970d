"""One test per acceptance criterion, all measured on a single pipeline run."""

import pytest

CRITERIA = [
    (1, "pod_energy"),
    (2, "rom_error_structure"),
    (3, "ekf_known_disturbance"),
    (4, "disturbance_estimation_benefit"),
    (5, "speedup"),
    (6, "fom_oracles"),
    (7, "filter_oracles"),
    (8, "pod_oracles"),
    (9, "reproducibility"),
]


@pytest.fixture(scope="module")
def results(pipeline):
    print()
    for line in pipeline["lines"]:
        print(line)
    return {r.number: r for r in pipeline["results"]}


def test_every_criterion_reported(results):
    assert sorted(results) == [n for n, _ in CRITERIA]


@pytest.mark.parametrize("number,name", CRITERIA, ids=[f"{n}-{name}" for n, name in CRITERIA])
def test_criterion(results, number, name):
    res = results[number]
    print(f"\n{res.line()}  {res.details}")
    assert res.name == name
    assert res.passed, res.details
