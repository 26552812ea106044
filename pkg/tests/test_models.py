import numpy as np
import pytest
from scipy.integrate import solve_ivp, trapezoid

from mlsaem.core import Dataset
from mlsaem.models import (
    DomainError,
    ErrorModel,
    get_model,
    get_structural,
    predict_theophylline,
    predict_zero_order_ss,
)


def one_cpt_ode(t_eval, V, Ka, Cl, dose):
    """Numerical solution of the gut/central compartment system."""
    rhs = lambda t, x: [-Ka * x[0], Ka * x[0] - Cl / V * x[1]]
    sol = solve_ivp(rhs, (0, t_eval[-1]), [dose, 0.0], t_eval=t_eval, rtol=1e-11, atol=1e-12)
    return sol.y[1] / V


def zero_order_ode(t_eval, V, Ta, Cl, dose, tau, n_doses=60):
    """Repeated zero-order inputs integrated until steady state; last interval returned."""
    rate = dose / Ta
    amount = 0.0
    for _ in range(n_doses):
        s1 = solve_ivp(lambda t, x: [rate - Cl / V * x[0]], (0, Ta), [amount], rtol=1e-11, atol=1e-13)
        s2 = solve_ivp(lambda t, x: [-Cl / V * x[0]], (Ta, tau), [s1.y[0, -1]], rtol=1e-11, atol=1e-13)
        start = amount
        amount = s2.y[0, -1]
    out = []
    for t in t_eval:
        if t <= Ta:
            s = solve_ivp(lambda u, x: [rate - Cl / V * x[0]], (0, t), [start], rtol=1e-11, atol=1e-13)
        else:
            s1 = solve_ivp(lambda u, x: [rate - Cl / V * x[0]], (0, Ta), [start], rtol=1e-11, atol=1e-13)
            s = solve_ivp(lambda u, x: [-Cl / V * x[0]], (Ta, t), [s1.y[0, -1]], rtol=1e-11, atol=1e-13)
        out.append(s.y[0, -1] / V)
    return np.array(out)


class TestTheophylline:
    times = np.array([0.25, 0.5, 1, 2, 3.5, 5, 7, 9, 12, 24])

    def test_matches_ode(self):
        V, Ka, AUC, dose = np.exp(-0.73), np.exp(0.39), np.exp(4.61), 4.0
        got = predict_theophylline(self.times, V, Ka, dose / AUC, dose)
        ref = one_cpt_ode(self.times, V, Ka, dose / AUC, dose)
        np.testing.assert_allclose(got, ref, rtol=1e-7)

    def test_zero_at_time_zero(self):
        assert predict_theophylline(0.0, 0.5, 1.5, 0.04, 4.0) == 0.0

    def test_flip_point_limit_continuous(self):
        V, Ka, dose = 0.5, 1.2, 4.0
        at = predict_theophylline(self.times, V, Ka, V * Ka, dose)
        near = predict_theophylline(self.times, V, Ka, V * Ka * (1 + 1e-6), dose)
        np.testing.assert_allclose(at, near, rtol=1e-5, atol=1e-12)
        np.testing.assert_allclose(at, one_cpt_ode(self.times, V, Ka, V * Ka, dose), rtol=1e-7, atol=1e-11)

    def test_auc_equals_dose_over_clearance(self):
        t = np.linspace(0, 400, 400001)
        c = predict_theophylline(t, 0.5, 1.5, 0.04, 4.0)
        assert trapezoid(c, t) == pytest.approx(4.0 / 0.04, rel=1e-4)

    @pytest.mark.parametrize("bad", [dict(V=0.0), dict(Ka=-1.0), dict(Cl=0.0)])
    def test_domain_errors(self, bad):
        kw = dict(V=0.5, Ka=1.5, Cl=0.04)
        kw.update(bad)
        with pytest.raises(DomainError):
            predict_theophylline(1.0, dose=4.0, **kw)

    def test_negative_time_rejected(self):
        with pytest.raises(DomainError):
            predict_theophylline(-1.0, 0.5, 1.5, 0.04, 4.0)


class TestZeroOrder:
    def test_matches_repeated_dosing_ode(self):
        V, Ta, Cl, dose, tau = 20.0, 2.0, 3.0, 100.0, 12.0
        t = np.array([0.0, 0.5, 1.0, 2.0, 3.0, 6.0, 11.9])
        got = predict_zero_order_ss(t, V, Ta, Cl, dose, tau)
        np.testing.assert_allclose(got, zero_order_ode(t, V, Ta, Cl, dose, tau), rtol=1e-6)

    def test_continuous_at_end_of_input(self):
        V, Ta, Cl, dose, tau = 20.0, 2.0, 3.0, 100.0, 12.0
        a, b = predict_zero_order_ss(np.array([Ta - 1e-9, Ta + 1e-9]), V, Ta, Cl, dose, tau)
        assert a == pytest.approx(b, rel=1e-7)

    def test_periodic(self):
        c = predict_zero_order_ss(np.array([0.0, 12.0]), 20.0, 2.0, 3.0, 100.0, 12.0)
        assert c[0] == pytest.approx(c[1], rel=1e-12)

    def test_duration_longer_than_interval(self):
        with pytest.raises(DomainError, match="shorter than tau"):
            predict_zero_order_ss(1.0, 20.0, 13.0, 3.0, 100.0, 12.0)

    def test_structural_returns_nan_outside_domain(self):
        m = get_structural("zero_order_ss")
        out = m.predict(np.array([1.0]), np.log([20.0, 13.0, 30.0]), 100.0, 12.0)
        assert np.isnan(out).all()


class TestRegistryAndErrors:
    def test_unknown_model(self):
        with pytest.raises(KeyError, match="unknown structural model"):
            get_model("two_compartment")

    def test_error_models(self):
        f = np.array([0.0, 2.0])
        np.testing.assert_array_equal(ErrorModel("constant").g(f), [1.0, 1.0])
        np.testing.assert_array_equal(ErrorModel("proportional").g(f), [0.0, 2.0])
        np.testing.assert_array_equal(ErrorModel("combined").g(f), [1.0, 3.0])
        with pytest.raises(ValueError):
            ErrorModel("exponential")

    def test_unit_loglik_matches_gaussian(self):
        model = get_model("theophylline_1cpt_oral", "combined")
        times = np.array([[[0.5, 1.0, 4.0], [0.5, 2.0, 8.0]]])
        y = np.array([[[5.0, 7.0, 6.0], [4.0, 7.5, 5.0]]])
        data = Dataset(("a",), times, y, np.ones_like(y, bool), np.full((1, 2), 4.0))
        phi = np.array([[[-0.7, 0.4, 4.6], [-0.6, 0.3, 4.5]]])
        ll = model.unit_logliks(data, phi, 0.01)
        f = model.predict(data, phi)
        sd = 0.1 * (1 + f)
        ref = (-0.5 * np.log(2 * np.pi * sd**2) - 0.5 * ((y - f) / sd) ** 2).sum(-1)
        np.testing.assert_allclose(ll, ref, rtol=1e-12)

    def test_unit_loglik_nonfinite_is_minus_inf(self):
        model = get_model("zero_order_ss")
        times = np.ones((1, 2, 1))
        data = Dataset(("a",), times, times, np.ones_like(times, bool), np.full((1, 2), 100.0),
                       np.full((1, 2), 12.0))
        phi = np.log(np.array([[[20.0, 13.0, 30.0], [20.0, 2.0, 30.0]]]))
        ll = model.unit_logliks(data, phi, 0.1)
        assert ll[0, 0] == -np.inf and np.isfinite(ll[0, 1])
