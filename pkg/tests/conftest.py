import math

import numpy as np
import pytest

from hysopt.automaton import HysteresisAutomaton

# Closed-form facts for the thermostat model (heater on: dx = -0.2x + 5,
# heater off: dx = -0.2x, switching value 0.5*(x - 18)), used as independent
# oracles throughout the suite:
#   mode-A flow from x0:  x(t) = 25 - (25 - x0) * exp(-0.2 t)
#   mode-B flow from x0:  x(t) = x0 * exp(-0.2 t)
#   first guard hit from x0=15:  25 - 10 exp(-0.2 t) = 20  =>  t = 5 ln 2
THERMOSTAT_FIRST_JUMP = 5.0 * math.log(2.0)


def thermostat_mode_a(t, x0=15.0):
    return 25.0 - (25.0 - x0) * np.exp(-0.2 * np.asarray(t))


def thermostat_mode_b(t, x0=20.0):
    return x0 * np.exp(-0.2 * np.asarray(t))


@pytest.fixture(scope="session")
def thermostat():
    return HysteresisAutomaton.from_strings(
        variables=["x"],
        controls=[],
        f_a=["-0.2*x + 5"],
        f_b=["-0.2*x"],
        psi="0.5*(x - 18)",
        u_lb=[],
        u_ub=[],
    )


@pytest.fixture(scope="session")
def turbo_car():
    return HysteresisAutomaton.from_strings(
        variables=["q", "v"],
        controls=["u"],
        f_a=["v", "u"],
        f_b=["v", "3*u"],
        psi="(v - 10)/5",
        u_lb=[-5.0],
        u_ub=[5.0],
        x_lb=[-1e4, -25.0],
        x_ub=[1e4, 25.0],
    )
