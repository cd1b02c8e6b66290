import itertools

import numpy as np
import pytest

from neuroseq.autodiff import Tensor, log_softmax, mul, sum_
from neuroseq.ctc import (
    CTCBaseline, CTCConfig, GRULayer, InfeasibleAlignmentError, ctc_greedy_decode,
    ctc_loss, min_frames,
)
from neuroseq.frontend import FrontEndConfig
from neuroseq.gradcheck import grad_check
from neuroseq.layers import Ctx
from neuroseq.seq2seq import ModelConfig

from oracles import ctc_collapse, ctc_loss_enumerate


def uniform_lp(L, V):
    return np.log(np.full((L, V), 1.0 / V))


class TestCTCLossValues:
    def test_single_frame(self):
        loss = ctc_loss(Tensor(uniform_lp(1, 2)), [0], blank=1)
        assert abs(loss.item() - (-np.log(0.5))) < 1e-12

    def test_two_frames_three_alignments(self):
        loss = ctc_loss(Tensor(uniform_lp(2, 2)), [0], blank=1)
        assert abs(loss.item() - (-np.log(0.75))) < 1e-12

    def test_matches_enumeration_on_random_cases(self, rng):
        for _ in range(60):
            L = int(rng.integers(1, 9))
            V = int(rng.integers(2, 5))
            blank = V - 1
            max_y = min(3, min_frames_capacity(L))
            ylen = int(rng.integers(0, max_y + 1))
            y = valid_target(rng, ylen, blank, L)
            if y is None:
                continue
            logits = rng.normal(size=(L, V))
            lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
            got = ctc_loss(Tensor(lp), y, blank=blank).item()
            want = ctc_loss_enumerate(lp, y, blank)
            assert abs(got - want) < 1e-9

    def test_blank_in_target_rejected(self):
        with pytest.raises(ValueError, match="blank"):
            ctc_loss(Tensor(uniform_lp(3, 3)), [2], blank=2)

    def test_infeasible_length(self):
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(Tensor(uniform_lp(2, 3)), [0, 0], blank=2)  # needs 3

    def test_min_frames(self):
        assert min_frames([], 9) == 0
        assert min_frames([1, 2, 3], 9) == 3
        assert min_frames([1, 1], 9) == 3
        assert min_frames([1, 1, 1], 9) == 5

    def test_probability_normalization_tiny_vocab(self, rng):
        # V=2 (one symbol + blank), L=3: targets can only be '', a, aa, aaa
        logits = rng.normal(size=(3, 2))
        lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        total = 0.0
        for y in ([], [0], [0, 0], [0, 0, 0]):
            if min_frames(y, 1) <= 3:
                total += np.exp(-ctc_loss(Tensor(lp), y, blank=1).item())
        assert abs(total - 1.0) < 1e-9

    def test_gradcheck_through_log_softmax(self, rng):
        for y in ([0], [0, 1], [1, 1], [0, 1, 0]):
            rep = grad_check(
                lambda x: ctc_loss(log_softmax(x, axis=-1), y, blank=3),
                [Tensor(rng.normal(size=(6, 4)))], tol=1e-4)
            assert rep.passed, (y, rep.max_rel_err)


def min_frames_capacity(L):
    return L


def valid_target(rng, ylen, blank, L):
    symbols = [s for s in range(blank)]
    for _ in range(20):
        y = [int(rng.choice(symbols)) for _ in range(ylen)]
        if min_frames(y, blank) <= L:
            return y
    return None


class TestGreedyDecode:
    def test_collapse_rule(self):
        # frames argmax [a, a, blank, a] -> "a a"
        lp = np.log(np.array([[0.9, 0.1], [0.9, 0.1], [0.1, 0.9], [0.9, 0.1]]))
        assert ctc_greedy_decode(lp, blank=1) == [0, 0]

    def test_all_blank_empty(self):
        lp = np.log(np.array([[0.1, 0.9]] * 5))
        assert ctc_greedy_decode(lp, blank=1) == []

    def test_agreement_with_argmax_path_oracle(self, rng):
        for _ in range(100):
            lp = rng.normal(size=(int(rng.integers(1, 12)), 4))
            path = lp.argmax(axis=1)
            want = list(ctc_collapse(path, blank=3))
            assert ctc_greedy_decode(lp, blank=3) == want


class TestGRU:
    def test_zero_weights_hidden_stays_zero(self, rng):
        g = GRULayer("g", 3, 4, rng)
        for p in g.parameters():
            p.data[:] = 0.0
        out = g(Tensor(rng.normal(size=(6, 3))))
        assert np.all(out.data == 0.0)

    def test_single_step_matches_hand_equations(self, rng):
        g = GRULayer("g", 2, 2, rng)
        x = rng.normal(size=(1, 2))
        out = g(Tensor(x)).data

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        h = np.zeros((1, 2))
        r = sig(x @ g.w_ir.data + g.b_r.data + h @ g.w_hr.data)
        z = sig(x @ g.w_iz.data + g.b_z.data + h @ g.w_hz.data)
        n = np.tanh(x @ g.w_in.data + g.b_n.data + r * (h @ g.w_hn.data))
        want = (1 - z) * n + z * h
        assert np.abs(out - want).max() < 1e-12

    def test_gradcheck(self, rng):
        g = GRULayer("g", 2, 3, rng)
        r = Tensor(rng.normal(size=(4, 3)))
        params = g.parameters()

        def f(*ps):
            return sum_(mul(r, g(Tensor(x_fixed))))

        x_fixed = rng.normal(size=(4, 2))
        rep = grad_check(f, params, tol=1e-4)
        assert rep.passed, rep.max_rel_err


class TestBaselineModel:
    def test_logits_cover_blank(self, tiny_ds):
        mc = ModelConfig(d_model=32, n_heads=4)
        base = CTCBaseline(tiny_ds, mc,
                           CTCConfig(hidden=16, layers=1),
                           FrontEndConfig(latent_dim=32, conv_width=16))
        from neuroseq.synthdata import zscore_trials
        trial = tiny_ds.trials("train")[0]
        feats = zscore_trials(tiny_ds.trials("train"))[0]
        lp = base.log_probs(feats, trial.day_id, Ctx())
        L = base.frontend.out_length(feats.shape[0])
        assert lp.data.shape == (L, 43)
        assert np.abs(np.exp(lp.data).sum(axis=1) - 1.0).max() < 1e-9

    def test_bidirectional_doubles_readout_width(self, tiny_ds):
        mc = ModelConfig(d_model=32, n_heads=4)
        base = CTCBaseline(tiny_ds, mc,
                           CTCConfig(hidden=8, layers=1, bidirectional=True),
                           FrontEndConfig(latent_dim=32, conv_width=16))
        assert base.gru.out_dim == 16

    def test_loss_runs_and_is_finite(self, tiny_ds):
        mc = ModelConfig(d_model=32, n_heads=4)
        base = CTCBaseline(tiny_ds, mc, CTCConfig(hidden=16, layers=1),
                           FrontEndConfig(latent_dim=32, conv_width=16))
        from neuroseq.synthdata import zscore_trials
        trial = tiny_ds.trials("train")[0]
        feats = zscore_trials(tiny_ds.trials("train"))[0]
        loss = base.loss(feats, trial.day_id, trial.phonemes, Ctx())
        assert np.isfinite(loss.item())
