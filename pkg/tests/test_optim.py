import numpy as np
import pytest

from neuroseq.autodiff import NonFiniteError, Parameter
from neuroseq.optim import AdamW, ReduceLROnPlateau

from oracles import adamw_single_step


def make_param(value, name="w"):
    return Parameter(np.array([float(value)]), name)


class TestAdamW:
    def test_zero_grad_no_decay_unchanged(self):
        p = make_param(1.5)
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = np.zeros(1)
        opt.step()
        assert p.data[0] == 1.5

    def test_decoupled_decay_definition(self):
        p = make_param(2.0)
        opt = AdamW([p], lr=0.1, weight_decay=0.5)
        p.grad = np.zeros(1)
        opt.step()
        assert abs(p.data[0] - 2.0 * (1 - 0.1 * 0.5)) < 1e-15

    def test_first_step_hand_computed(self):
        p = make_param(1.0)
        opt = AdamW([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
        p.grad = np.ones(1)
        opt.step()
        want = adamw_single_step(1.0, 1.0, 0.1, (0.9, 0.999), 1e-8, 0.0)
        assert abs(p.data[0] - want) < 1e-12
        assert abs(p.data[0] - 0.9) < 1e-6  # bias correction makes the ratio ~1

    def test_nonfinite_grad_names_parameter(self):
        p = make_param(1.0, name="enc.l0.attn.wq.w")
        opt = AdamW([p])
        p.grad = np.array([np.inf])
        with pytest.raises(NonFiniteError, match="enc.l0.attn.wq.w"):
            opt.step()

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            AdamW([make_param(1.0, "a"), make_param(2.0, "a")])

    def test_state_roundtrip(self):
        p = make_param(1.0)
        opt = AdamW([p], lr=0.05)
        for _ in range(3):
            p.grad = np.array([0.7])
            opt.step()
        state = opt.state_dict()
        p2 = make_param(1.0)
        opt2 = AdamW([p2], lr=0.05)
        opt2.load_state_dict(state)
        assert opt2.t == 3
        assert np.array_equal(opt2.params[0].m, opt.params[0].m)


class TestPlateauScheduler:
    def make(self, patience=10):
        p = make_param(0.0)
        opt = AdamW([p], lr=1.0)
        return opt, ReduceLROnPlateau(opt, factor=0.5, patience=patience)

    def test_improving_never_changes_lr(self):
        opt, sched = self.make()
        for v in np.linspace(1.0, 0.1, 30):
            sched.step(v)
        assert opt.lr == 1.0

    def test_flat_eleven_epochs_one_halving(self):
        opt, sched = self.make()
        for _ in range(11):
            sched.step(0.5)
        assert opt.lr == 0.5

    def test_two_plateaus_quarter_lr(self):
        opt, sched = self.make()
        for _ in range(21):
            sched.step(0.5)
        assert opt.lr == 0.25

    def test_improvement_resets_counter(self):
        opt, sched = self.make(patience=3)
        for v in (1.0, 1.0, 1.0, 0.9, 1.0, 1.0):
            sched.step(v)
        assert opt.lr == 1.0  # reset at 0.9 kept the run under patience
        sched.step(1.0)       # third consecutive non-improvement
        assert opt.lr == 0.5
