import numpy as np
import pytest

from rtipping.errors import InvalidParameterError, WrongBranchError
from rtipping.mol import diff_matrices
from rtipping.pulses import canonical_mesh, compute_pulse, pointwise_order, static_residual


def test_pulse_maxima(stable, unstable):
    assert stable.u.max() == pytest.approx(0.5588, abs=2e-3)
    assert unstable.u.max() == pytest.approx(0.0657, abs=2e-3)


@pytest.mark.parametrize("name", ["stable", "unstable"])
def test_pulse_invariants(name, request):
    pl = request.getfixturevalue(name)
    assert pl.xi == pytest.approx(pl.u.max(), abs=1e-12)
    assert np.all(pl.u >= -1e-12)
    assert abs(pl.u[0]) < 1e-6 and abs(pl.u[-1]) < 1e-6
    # mesh is mirror symmetric, so the profile is even node by node
    assert np.allclose(pl.z, -pl.z[::-1], atol=0)
    assert np.max(np.abs(pl.u - pl.u[::-1])) < 1e-8
    zq = np.linspace(0, 40, 97)
    assert np.max(np.abs(pl(zq) - pl(-zq))) < 1e-8


@pytest.mark.parametrize("name", ["stable", "unstable"])
def test_tail_log_slope(name, request):
    pl = request.getfixturevalue(name)
    Z, beta = pl.params.Z, pl.params.beta
    zq = np.linspace(Z - 40, Z - 10, 31)
    slope = np.polyfit(zq, np.log(pl(zq)), 1)[0]
    assert slope == pytest.approx(-beta, rel=0.05)


@pytest.mark.parametrize("name", ["stable", "unstable"])
def test_static_residual_with_mol_matrices(name, request):
    pl = request.getfixturevalue(name)
    z = canonical_mesh(pl, 0.5)
    _, D2 = diff_matrices(z)
    from rtipping.model import habitat, reaction
    u = pl(z)
    res = D2 @ u + reaction(u, habitat(z, pl.params.L), pl.params)
    assert np.max(np.abs(res[2:-2])) < 1e-4
    assert np.max(np.abs(static_residual(pl)[2:-2])) < 1e-4


def test_truncation_insensitivity(params, stable):
    wide = compute_pulse("stable", params.replace(Z=300.0))
    assert abs(wide.u.max() - stable.u.max()) < 1e-8


def test_pointwise_order(stable, unstable, trivial):
    rec = pointwise_order(stable, unstable)
    assert rec["verdict"] and rec["min_gap"] > 0
    assert not pointwise_order(unstable, stable)["verdict"]
    pos = pointwise_order(unstable, trivial, interior_only=True)
    assert pos["verdict"] and pos["caveat"]


def test_trivial_state(trivial):
    assert np.all(trivial.u == 0) and trivial.xi == 0.0


def test_errors(params):
    with pytest.raises(InvalidParameterError):
        compute_pulse("sideways", params)
    with pytest.raises(WrongBranchError):
        compute_pulse("unstable", params, xi_guess=1e-3)


def test_canonical_mesh(stable):
    z = canonical_mesh(stable, 0.5)
    assert np.all(np.diff(z) > 0) and np.max(np.diff(z)) <= 0.5 + 1e-12
    assert np.array_equal(z, -z[::-1])
    assert set(np.round(stable.z, 12)) <= set(np.round(z, 12))
