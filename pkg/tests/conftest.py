import numpy as np
import pytest

from hotform.scenario import (
    ProcessInputs,
    SheetGeometry,
    ToolSpec,
    build_sheet_mesh,
    build_time_grid,
    hole_flanging_template,
    synth_forming_trajectory,
)

REFERENCE = ProcessInputs(1273.0, 80.0, 4.0)

# Criterion lines from the acceptance run, echoed in the terminal summary.
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def coarse_mesh():
    return build_sheet_mesh(SheetGeometry(0.30, 0.05, 0.002), 0.03)


@pytest.fixture(scope="session")
def nominal_grid():
    return build_time_grid(510, REFERENCE, REFERENCE, hole_flanging_template())


@pytest.fixture(scope="session")
def coarse_traj(coarse_mesh, nominal_grid):
    return synth_forming_trajectory(coarse_mesh, nominal_grid, ToolSpec())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Run the full acceptance evaluation once and keep its intermediate results."""
    from hotform.evaluation import evaluate
    from hotform.experiment import ExperimentConfig

    keep, lines = {}, []
    keep["results"] = evaluate(ExperimentConfig(), tmp_path_factory.mktemp("acceptance"), log=lines.append, keep=keep)
    keep["lines"] = lines
    ACCEPTANCE_LINES.extend(lines)
    return keep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
