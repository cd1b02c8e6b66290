import numpy as np
import pytest

from neuroseq.autodiff import Tensor, gelu, mul, sum_
from neuroseq.daycal import (
    CalibrationMissingError, DayCalConfig, IdentityCalibration,
    LinearDayTransform, NHSCalibration, build_daycal,
)
from neuroseq.gradcheck import grad_check

D = 6
DAYS = [0, 1, 2]


def make_nhs(rng, phi="identity"):
    return NHSCalibration("nhs", DAYS, D, DayCalConfig(phi=phi), rng)


class TestNHSAlgebra:
    def test_hammer_identity_when_gate_open(self, rng):
        nhs = make_nhs(rng)
        # randomize the scalpel so the identity must come from the gate
        nhs.mlp_out.w.data[:] = rng.normal(size=nhs.mlp_out.w.data.shape)
        nhs.gate_logit[1].data[:] = 40.0  # g -> 1
        x = Tensor(rng.normal(size=(4, D)))
        assert np.allclose(nhs(x, 1).data, x.data, atol=1e-12)

    def test_scalpel_identity_when_gate_closed(self, rng):
        nhs = make_nhs(rng)
        nhs.hammer_w[1].data[:] = rng.normal(size=(D, D))  # ruin the hammer
        nhs.gate_logit[1].data[:] = -40.0  # g -> 0
        x = Tensor(rng.normal(size=(4, D)))
        assert np.allclose(nhs(x, 1).data, x.data, atol=1e-12)

    def test_blend_arithmetic(self, rng):
        nhs = make_nhs(rng)
        nhs.hammer_w[2].data[:] = 2.0 * np.eye(D)
        nhs.mlp_in.w.data[:] = 0.0
        nhs.mlp_in.b.data[:] = 0.0
        nhs.mlp_out.w.data[:] = 0.0
        nhs.mlp_out.b.data[:] = 0.0  # gamma = 0, beta = 0
        nhs.gate_logit[2].data[:] = 0.0  # g = 0.5
        x = Tensor(rng.normal(size=(4, D)))
        assert np.allclose(nhs(x, 2).data, x.data, atol=1e-12)

    def test_near_identity_initialization(self, rng):
        nhs = make_nhs(rng, phi="gelu")
        x = Tensor(rng.normal(size=(5, D)))
        ref = gelu(Tensor(x.data.copy()))
        num = np.linalg.norm(nhs(x, 0).data - ref.data)
        assert num / np.linalg.norm(x.data) < 1e-6

    def test_gate_convexity(self, rng):
        nhs = make_nhs(rng)
        nhs.hammer_w[0].data[:] = rng.normal(size=(D, D))
        nhs.mlp_out.w.data[:] = rng.normal(size=nhs.mlp_out.w.data.shape)
        nhs.gate_logit[0].data[:] = rng.normal()
        x = Tensor(rng.normal(size=(4, D)))
        from neuroseq.autodiff import add, matmul
        x_h = (x.data @ nhs.hammer_w[0].data) + nhs.hammer_b[0].data
        gamma, beta = nhs.film_params(0)
        x_s = x.data * gamma.data + beta.data
        out = nhs(x, 0).data
        lo = np.minimum(x_h, x_s) - 1e-12
        hi = np.maximum(x_h, x_s) + 1e-12
        assert np.all(out >= lo) and np.all(out <= hi)

    def test_unknown_day_errors(self, rng):
        nhs = make_nhs(rng)
        with pytest.raises(CalibrationMissingError, match="day 9"):
            nhs(Tensor(np.zeros((2, D))), 9)

    def test_gate_strictly_in_unit_interval(self, rng):
        nhs = make_nhs(rng)
        for day in DAYS:
            g = nhs.gate(day).data
            assert 0.0 < g < 1.0


class TestLinearDayTransform:
    def test_identity(self, rng):
        lin = LinearDayTransform("lin", DAYS, D)
        x = Tensor(rng.normal(size=(4, D)))
        assert np.array_equal(lin(x, 0).data, x.data)

    def test_constant_shift(self, rng):
        lin = LinearDayTransform("lin", DAYS, D)
        lin.b[1].data[:] = 0.5
        x = Tensor(rng.normal(size=(4, D)))
        assert np.allclose(lin(x, 1).data, x.data + 0.5)

    def test_equals_nhs_with_open_gate(self, rng):
        lin = LinearDayTransform("lin", DAYS, D)
        nhs = make_nhs(rng)
        w = rng.normal(size=(D, D))
        b = rng.normal(size=D)
        for day in DAYS:
            lin.w[day].data[:] = w
            lin.b[day].data[:] = b
            nhs.hammer_w[day].data[:] = w
            nhs.hammer_b[day].data[:] = b
            nhs.gate_logit[day].data[:] = 45.0
        for _ in range(5):
            x = rng.normal(size=(3, D))
            a = lin(Tensor(x), 2).data
            c = nhs(Tensor(x), 2).data
            assert np.abs(a - c).max() < 1e-9

    def test_unknown_day_errors(self, rng):
        lin = LinearDayTransform("lin", DAYS, D)
        with pytest.raises(CalibrationMissingError):
            lin(Tensor(np.zeros((1, D))), 99)


class TestIdentityCalibration:
    def test_passthrough(self, rng):
        ident = IdentityCalibration("none")
        x = Tensor(rng.normal(size=(4, D)))
        assert ident(x, 123) is x

    def test_gradient_transparent(self, rng):
        ident = IdentityCalibration("none")
        r = Tensor(rng.normal(size=(3, D)))

        def with_wrapper(x):
            return sum_(mul(r, ident(x, 0)))

        def without(x):
            return sum_(mul(r, x))

        x = Tensor(rng.normal(size=(3, D)))
        a = grad_check(with_wrapper, [Tensor(x.data.copy())])
        b = grad_check(without, [Tensor(x.data.copy())])
        assert a.passed and b.passed


class TestParameterAudit:
    def test_per_day_count_ordering(self, rng):
        nhs = make_nhs(rng)
        lin = LinearDayTransform("lin", DAYS, D)
        ident = IdentityCalibration("none")
        assert nhs.params_per_day() > lin.params_per_day() > ident.params_per_day()

    def test_build_daycal_modes(self, rng):
        cfg = DayCalConfig()
        assert isinstance(build_daycal("d", "nhs", DAYS, D, cfg, rng),
                          NHSCalibration)
        assert isinstance(build_daycal("d", "linear", DAYS, D, cfg, rng),
                          LinearDayTransform)
        assert isinstance(build_daycal("d", "none", DAYS, D, cfg, rng),
                          IdentityCalibration)
        with pytest.raises(ValueError):
            DayCalConfig(mode="bogus").validate()


class TestGradients:
    def test_full_nhs_path_gradcheck(self, rng):
        nhs = make_nhs(rng, phi="gelu")
        # move off the identity initialization first
        for p in nhs.parameters():
            p.data = p.data + 0.05 * rng.normal(size=p.data.shape)
        x = Tensor(rng.normal(size=(3, D)))
        r = Tensor(rng.normal(size=(3, D)))
        params = nhs.parameters()

        def f(*ps):
            return sum_(mul(r, nhs(x, 1)))

        rep = grad_check(f, params, tol=1e-4)
        assert rep.passed, rep

    def test_nhs_input_gradcheck(self, rng):
        nhs = make_nhs(rng, phi="gelu")
        r = Tensor(rng.normal(size=(3, D)))
        rep = grad_check(lambda x: sum_(mul(r, nhs(x, 0))),
                         [Tensor(rng.normal(size=(3, D)))], tol=1e-4)
        assert rep.passed
