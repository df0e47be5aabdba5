import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtipping.errors import DomainError, InvalidParameterError
from rtipping.model import ModelParams, ShiftField, habitat, ramp, reaction, reaction_du, shift_velocity

P = ModelParams(beta=0.15, lambda_r=0.6)


def test_defaults_couple_lambda_to_beta():
    p = ModelParams()
    assert p.lambda_r == pytest.approx(0.6)
    assert p.replace(beta=0.2).lambda_r == pytest.approx(0.8)
    assert ModelParams(lambda_r=0.3).replace(beta=0.2).lambda_r == 0.3
    assert p.d == pytest.approx(31.3)


@pytest.mark.parametrize("field", ["beta", "L", "a", "r", "Z"])
def test_params_reject_nonpositive(field):
    with pytest.raises(InvalidParameterError):
        ModelParams(**{field: 0.0})
    with pytest.raises(InvalidParameterError):
        ModelParams(**{field: float("nan")})


def test_habitat_values():
    assert habitat(0.0, 25) == pytest.approx(1.0, abs=1e-15)
    assert habitat(0.0, 3.7) == pytest.approx(1.0, abs=1e-15)
    assert habitat(12.5, 25) == pytest.approx(0.5, abs=1e-6)
    x = np.linspace(-40, 40, 81)
    assert np.allclose(habitat(x, 25), habitat(-x, 25), atol=0, rtol=1e-14)


def test_habitat_shape_and_tail():
    # beyond |x| ~ 40 the tanh difference underflows to exactly 0
    x = np.linspace(-30, 30, 2001)
    h = habitat(x, 25)
    assert np.all(h > 0) and np.all(h <= 1 + 1e-15)
    assert x[np.argmax(h)] == pytest.approx(0.0)
    xt = np.linspace(16, 22, 13)  # far enough for the exp tail, close enough to avoid cancellation
    slope = np.polyfit(xt, np.log(habitat(xt, 25)), 1)[0]
    assert slope == pytest.approx(-2.0, abs=1e-4)


def test_habitat_errors():
    with pytest.raises(InvalidParameterError):
        habitat(0.0, -1.0)
    with pytest.raises(InvalidParameterError):
        habitat(np.inf, 25)


def test_reaction_values():
    assert reaction(0.0, 0.3, P) == 0.0
    assert reaction(0.5, 1.0, P) == pytest.approx(0.01375, abs=1e-15)
    assert reaction_du(0.0, 0.7, P) == pytest.approx(-P.beta**2)
    assert reaction_du(0.5, 1.0, P) == pytest.approx(-0.1725, abs=1e-15)
    with pytest.raises(InvalidParameterError):
        reaction(np.nan, 1.0, P)


@settings(max_examples=60, deadline=None)
@given(u=st.floats(-2, 2), h=st.floats(0, 1))
def test_reaction_du_matches_finite_difference(u, h):
    eps = 1e-6
    fd = (reaction(u + eps, h, P) - reaction(u - eps, h, P)) / (2 * eps)
    assert reaction_du(u, h, P) == pytest.approx(fd, abs=1e-6)


def test_allee_structure():
    u_small = P.beta**2 / (2 * P.lambda_r)
    u = np.linspace(1e-8, u_small, 200)
    for h in np.linspace(0.01, 1.0, 25):
        assert np.all(reaction(u, h, P) < 0)


def test_shift_velocity_h5():
    a = 15.65
    assert shift_velocity(a, a) == 0.0 and shift_velocity(-a, a) == 0.0
    assert shift_velocity(0.0, a) == pytest.approx(a)
    g = np.linspace(-a, a, 501)[1:-1]
    assert np.all(shift_velocity(g, a) > 0)
    eps = 1e-6
    assert (shift_velocity(-a + eps, a) - shift_velocity(-a, a)) / eps == pytest.approx(2.0, abs=1e-5)
    assert ShiftField(a).dg(a) == pytest.approx(-2.0)
    with pytest.raises(DomainError):
        shift_velocity(a + 1e-3, a)


def test_ramp():
    a, r = 15.65, 0.7
    assert ramp(0.0, r, a) == 0.0
    assert abs(ramp(30 / r + 1, r, a) - a) < 1e-12 * a
    assert abs(ramp(-30 / r - 1, r, a) + a) < 1e-12 * a
    t = np.linspace(-5, 5, 21)
    h = 1e-5
    dg = (ramp(t + h, r, a) - ramp(t - h, r, a)) / (2 * h)
    assert np.max(np.abs(dg - r * shift_velocity(ramp(t, r, a), a))) < 1e-8
    assert ShiftField(a).time_of(ramp(1.3, r, a), r) == pytest.approx(1.3)
    with pytest.raises(InvalidParameterError):
        ramp(0.0, 0.0, a)
