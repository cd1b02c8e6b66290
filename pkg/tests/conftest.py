import numpy as np
import pytest

from neuroseq.frontend import FrontEndConfig
from neuroseq.seq2seq import ModelConfig
from neuroseq.synthdata import CorpusConfig, generate_corpus
from neuroseq.trainer import TrainConfig, train

TINY_CORPUS = CorpusConfig(n_days=2, trials_per_day=30, channels=8, vocab_size=12)
SMOKE_MODEL = ModelConfig(d_model=32, n_heads=4, encoder_layers=2,
                          phoneme_decoder_layers=2, word_decoder_layers=2,
                          ffn_dim=64)
SMOKE_FRONTEND = FrontEndConfig(latent_dim=32, conv_width=16)


def smoke_train_cfg(**kw) -> TrainConfig:
    base = dict(stage=1, variant="seq2seq", daycal="nhs", epochs=8, lr=3e-3,
                dropout=0.1, batch_size=4, grad_accum=2, seed=0,
                val_decode_cap=20)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_ds():
    return generate_corpus(TINY_CORPUS, seed=11)


@pytest.fixture(scope="session")
def stage1_smoke(tiny_ds, tmp_path_factory):
    out = tmp_path_factory.mktemp("stage1") / "ckpt.nsqc"
    result = train(tiny_ds, smoke_train_cfg(), SMOKE_MODEL, SMOKE_FRONTEND,
                   out_path=out)
    return result


@pytest.fixture(scope="session")
def stage2_smoke(tiny_ds, stage1_smoke, tmp_path_factory):
    out = tmp_path_factory.mktemp("stage2") / "ckpt.nsqc"
    cfg = smoke_train_cfg(stage=2, epochs=8)
    result = train(tiny_ds, cfg, SMOKE_MODEL, SMOKE_FRONTEND,
                   init_checkpoint=stage1_smoke.checkpoint_path, out_path=out)
    return result


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
