import numpy as np
import pandas as pd
import pytest

from mscox.dataset import MultiStateData, build_structure, expand_covariates
from mscox.simulate import SimSpec, named_structure, simulate_cohort


@pytest.fixture
def illness_death():
    return build_structure([(1, 2), (1, 3), (2, 3)], ["healthy", "ill", "dead"])


@pytest.fixture
def linear4():
    return named_structure("linear")


@pytest.fixture
def two_patient_frame():
    """Two patients in long format on the 1->2, 1->3, 2->3 structure."""
    rows = [
        # id from to trans Tstart Tstop time status strata x
        (1, 1, 2, 1, 0.0, 327.0, 327.0, 0, 1, 1.0),
        (1, 1, 3, 2, 0.0, 327.0, 327.0, 1, 2, 1.0),
        (2, 1, 2, 1, 0.0, 100.0, 100.0, 1, 1, 0.0),
        (2, 1, 3, 2, 0.0, 100.0, 100.0, 0, 2, 0.0),
        (2, 2, 3, 3, 100.0, 250.0, 150.0, 1, 3, 0.0),
    ]
    cols = ["id", "from", "to", "trans", "Tstart", "Tstop", "time", "status", "strata", "x"]
    return pd.DataFrame(rows, columns=cols)


@pytest.fixture
def two_patients(two_patient_frame, illness_death):
    return MultiStateData(two_patient_frame, illness_death, ("x",))


@pytest.fixture(scope="session")
def linear_cohort():
    """300 simulated patients on the 4-state chain, 3 covariates, expanded."""
    spec = SimSpec(named_structure("linear"), 300, 3, c_admin=8.0, seed=11)
    return expand_covariates(simulate_cohort(spec))


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    from test_acceptance import ACCEPTANCE
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
