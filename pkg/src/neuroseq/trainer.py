"""Two-stage multitask training with masking augmentation and checkpointing.

Stage 1 trains front end + day calibration + encoder + phoneme decoder
(+ MFCC head, weight 0.001). Stage 2 drops the MFCC head, attaches the
word decoder and continues jointly on phoneme + word objectives with a
fresh optimizer. Model selection tracks the best validation PER from
greedy decoding. Every random draw derives from (seed, epoch, trial
index), so runs are bit-reproducible and gradient accumulation groupings
do not change the sampled masks.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NonFiniteError, Tensor, add, backward, clear_tape, no_grad, scale
from .checkpoint import (
    Checkpoint, check_arch, load_checkpoint, load_params_into, params_as_dict,
    save_checkpoint,
)
from .ctc import CTCBaseline, CTCConfig
from .daycal import DayCalConfig
from .frontend import FrontEndConfig
from .layers import Ctx
from .metrics import per, pooled_rate
from .optim import AdamW, ReduceLROnPlateau
from .seq2seq import (
    ModelConfig, SpeechSeq2Seq, phoneme_cross_entropy, word_cross_entropy,
)
from .synthdata import Dataset, zscore_trials


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass
class TrainConfig:
    stage: int = 1
    variant: str = "seq2seq"        # seq2seq | ctc
    daycal: str = "nhs"             # nhs | linear | none
    use_mfcc: bool = True
    phoneme_weight: float = 1.0
    mfcc_weight: float = 0.001
    word_weight: float = 1.0
    lr: float = 3e-3            # desk-scale default; 1e-4 suits GPU-scale runs
    weight_decay: float = 1e-3
    scheduler_factor: float = 0.5
    scheduler_patience: int = 10
    batch_size: int = 4
    grad_accum: int = 5
    epochs: int = 30
    dropout: float = 0.2        # desk-scale default; 0.4 over-regularizes d=64
    time_mask_prob: float = 0.3
    time_mask_max_steps: int = 25
    time_mask_max_prop: float = 0.2
    channel_mask_prob: float = 0.25
    channel_mask_max: int = 3
    seed: int = 0
    val_decode_cap: int = 0         # 0 = decode the whole val split
    early_stop_per: float = 0.0     # 0 = disabled

    def validate(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.variant not in ("seq2seq", "ctc"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("batch size and accumulation must be >= 1")
        return self


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_val_per: float = float("inf")
    best_epoch: int = -1
    model: object = None
    checkpoint_path: Path | None = None
    diverged: bool = False
    wall_seconds: float = 0.0


def augment(features: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
            stride: int, n_channels: int) -> np.ndarray:
    """Zero a time span (in downsampled steps) and/or whole electrodes.

    The time span never exceeds ``time_mask_max_steps`` downsampled steps
    or ``time_mask_max_prop`` of the trial's input frames. Channel masking
    zeroes both feature families of each chosen electrode.
    """
    out = features
    T = features.shape[0]
    if rng.random() < cfg.time_mask_prob:
        max_steps = min(cfg.time_mask_max_steps,
                        int(cfg.time_mask_max_prop * T) // stride)
        if max_steps >= 1:
            span = int(rng.integers(1, max_steps + 1))
            n_steps = -(-T // stride)
            start = int(rng.integers(0, max(1, n_steps - span + 1)))
            out = out.copy()
            out[start * stride:(start + span) * stride] = 0.0
    if rng.random() < cfg.channel_mask_prob and cfg.channel_mask_max >= 1:
        k = int(rng.integers(1, cfg.channel_mask_max + 1))
        chans = rng.choice(n_channels, size=min(k, n_channels), replace=False)
        if out is features:
            out = out.copy()
        out[:, chans] = 0.0
        out[:, chans + n_channels] = 0.0
    return out


def build_model(dataset: Dataset, train_cfg: TrainConfig,
                model_cfg: ModelConfig | None = None,
                frontend_cfg: FrontEndConfig | None = None,
                daycal_cfg: DayCalConfig | None = None,
                ctc_cfg: CTCConfig | None = None):
    """Instantiate the model a TrainConfig describes (seed/dropout follow it)."""
    mc = replace(model_cfg or ModelConfig(), seed=train_cfg.seed,
                 dropout=train_cfg.dropout)
    fe = frontend_cfg or FrontEndConfig(latent_dim=mc.d_model)
    dc = daycal_cfg or DayCalConfig(mode=train_cfg.daycal)
    with_word = train_cfg.stage == 2
    with_mfcc = train_cfg.stage == 1 and train_cfg.use_mfcc
    if train_cfg.variant == "seq2seq":
        model = SpeechSeq2Seq(dataset, mc, fe, dc, daycal_mode=train_cfg.daycal,
                              with_word_decoder=with_word, with_mfcc_head=with_mfcc)
    else:
        model = CTCBaseline(dataset, mc, ctc_cfg or CTCConfig(), fe, dc,
                            daycal_mode=train_cfg.daycal,
                            with_word_decoder=with_word, with_mfcc_head=with_mfcc)
    return model, mc, fe, dc, (ctc_cfg or CTCConfig())


def trial_loss(model, variant: str, cfg: TrainConfig, feats: np.ndarray,
               trial, ctx: Ctx) -> Tensor:
    if variant == "seq2seq":
        enc, states = model.encode(feats, trial.day_id, ctx)
        loss = scale(phoneme_cross_entropy(model, enc, trial.phonemes, ctx),
                     cfg.phoneme_weight)
        if cfg.stage == 1 and model.mfcc_head is not None and cfg.mfcc_weight != 0.0:
            loss = add(loss, scale(model.mfcc_loss(states, trial.mfcc),
                                   cfg.mfcc_weight))
        if cfg.stage == 2:
            loss = add(loss, scale(word_cross_entropy(model, enc, trial.words, ctx),
                                   cfg.word_weight))
        return loss
    # ctc baseline
    from .autodiff import cross_entropy, log_softmax
    from .ctc import ctc_loss
    states = model.states(feats, trial.day_id, ctx)
    lp = log_softmax(model.logits(states), axis=-1)
    loss = scale(ctc_loss(lp, trial.phonemes, model.blank_id), cfg.phoneme_weight)
    if cfg.stage == 1 and model.mfcc_head is not None and cfg.mfcc_weight != 0.0:
        loss = add(loss, scale(model.mfcc_loss(states, trial.mfcc), cfg.mfcc_weight))
    if cfg.stage == 2:
        v = model.wvocab
        tokens_in = [v.bos_id] + [int(w) for w in trial.words]
        targets = [int(w) for w in trial.words] + [v.eos_id]
        logits = model.word_decoder(model.word_proj(states), tokens_in, ctx)
        loss = add(loss, scale(cross_entropy(logits, targets, ignore_index=v.pad_id),
                               cfg.word_weight))
    return loss


def run_window(model, cfg: TrainConfig, train_trials, train_feats, window,
               epoch: int, stride: int, n_channels: int) -> float:
    """Accumulate gradients for one optimizer window; returns summed loss.

    Micro-batch boundaries only group backward calls: each trial's RNG is
    keyed by (seed, epoch, dataset index), so any (batch, accumulation)
    factorization of the same window yields the same summed gradient.
    """
    loss_sum = 0.0
    for b0 in range(0, len(window), cfg.batch_size):
        micro = window[b0:b0 + cfg.batch_size]
        batch_loss = None
        for idx in micro:
            idx = int(idx)
            trial = train_trials[idx]
            rng = np.random.default_rng([cfg.seed, epoch, idx])
            feats = augment(train_feats[idx], cfg, rng, stride, n_channels)
            ctx = Ctx(train=True, rng=rng)
            loss = trial_loss(model, cfg.variant, cfg, feats, trial, ctx)
            loss = scale(loss, 1.0 / len(window))
            batch_loss = loss if batch_loss is None else add(batch_loss, loss)
        if batch_loss is not None:
            val = float(batch_loss.data) * len(window)
            if not np.isfinite(val):
                raise NonFiniteError("non-finite training loss")
            loss_sum += val
            backward(batch_loss)
    return loss_sum


def validate_per(model, variant: str, val_feats, val_trials, cap: int = 0) -> float:
    """Pooled PER from greedy decoding (length-capped at 1.5x the reference)."""
    n = len(val_trials) if cap <= 0 else min(cap, len(val_trials))
    pairs = []
    with no_grad():
        for feats, trial in zip(val_feats[:n], val_trials[:n]):
            max_len = int(np.ceil(1.5 * len(trial.phonemes))) + 1
            if variant == "seq2seq":
                enc, _ = model.encode(feats, trial.day_id, Ctx(train=False))
                hyp = model.greedy_phonemes(enc, max_len)
            else:
                hyp = model.greedy_phonemes(feats, trial.day_id)
            pairs.append(per(trial.phonemes, hyp, model.pvocab))
            clear_tape()
    return pooled_rate(pairs)


def train(dataset: Dataset, train_cfg: TrainConfig,
          model_cfg: ModelConfig | None = None,
          frontend_cfg: FrontEndConfig | None = None,
          daycal_cfg: DayCalConfig | None = None,
          ctc_cfg: CTCConfig | None = None,
          init_checkpoint: Checkpoint | str | Path | None = None,
          resume: bool = False,
          out_path: Path | str | None = None) -> TrainResult:
    """Run one training stage; returns history plus the best-PER model.

    ``init_checkpoint`` + ``resume=False`` is the stage-2 path: shared
    components are initialized from the stage-1 best parameters and the
    optimizer starts fresh. ``resume=True`` restores optimizer/scheduler
    state and continues the same run from its saved epoch.
    """
    train_cfg.validate()
    if train_cfg.stage == 2 and init_checkpoint is None and not resume:
        raise ValueError("stage 2 requires a stage-1 checkpoint")

    model, mc, fe, dc, cc = build_model(dataset, train_cfg, model_cfg,
                                        frontend_cfg, daycal_cfg, ctc_cfg)
    ckpt = None
    if init_checkpoint is not None:
        ckpt = (init_checkpoint if isinstance(init_checkpoint, Checkpoint)
                else load_checkpoint(init_checkpoint))
        stored = ckpt.header["model"]
        want = {k: v for k, v in asdict(mc).items()
                if k not in ("seed", "dropout", "freeze_word_layers",
                             "mfcc_tap_index")}
        check_arch({k: stored.get(k) for k in want}, want)
        if resume:
            load_params_into(model, ckpt.params)
        else:
            load_params_into(model, ckpt.best_params,
                             allow_missing=("worddec", "word_proj"),
                             allow_extra=("mfcc_head",))

    params = model.trainable_parameters() if hasattr(model, "trainable_parameters") \
        else model.parameters()
    opt = AdamW(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    sched = ReduceLROnPlateau(opt, factor=train_cfg.scheduler_factor,
                              patience=train_cfg.scheduler_patience)
    start_epoch = 0
    if resume and ckpt is not None:
        opt.load_state_dict({"t": ckpt.header["optimizer_t"],
                             "lr": ckpt.header["lr"],
                             "moments": {n: (ckpt.opt_m[n], ckpt.opt_v[n])
                                         for n in ckpt.opt_m}})
        sched.load_state_dict(ckpt.header["scheduler"])
        start_epoch = ckpt.epoch + 1

    train_trials = dataset.trials("train")
    val_trials = dataset.trials("val")
    train_feats = zscore_trials(train_trials)
    val_feats = zscore_trials(val_trials)
    n_channels = dataset.n_channels
    stride = fe.stride

    result = TrainResult(model=model)
    best_params = params_as_dict(model)
    if resume and ckpt is not None:
        best_params = dict(ckpt.best_params)
        result.best_val_per = ckpt.best_val_per
        result.best_epoch = ckpt.header.get("best_epoch", -1)

    window = train_cfg.batch_size * train_cfg.grad_accum
    t_start = time.time()
    diverged_msg = None
    for epoch in range(start_epoch, train_cfg.epochs):
        order = np.random.default_rng([train_cfg.seed, 7919 + epoch]) \
            .permutation(len(train_trials))
        loss_sum = 0.0
        n_seen = 0
        try:
            for w0 in range(0, len(order), window):
                group = order[w0:w0 + window]
                opt.zero_grad()
                loss_sum += run_window(model, train_cfg, train_trials,
                                       train_feats, group, epoch, stride,
                                       n_channels)
                n_seen += len(group)
                opt.step()
        except NonFiniteError as e:
            diverged_msg = str(e)
            clear_tape()

        if diverged_msg is not None:
            result.diverged = True
            break

        val_per = validate_per(model, train_cfg.variant, val_feats, val_trials,
                               train_cfg.val_decode_cap)
        if val_per < result.best_val_per:
            result.best_val_per = val_per
            result.best_epoch = epoch
            best_params = params_as_dict(model)
        lr_now = sched.step(val_per)
        mean_loss = loss_sum / n_seen if n_seen else float("nan")
        result.history.append({"epoch": epoch, "train_loss": mean_loss,
                               "val_per": val_per, "lr": lr_now})
        if train_cfg.early_stop_per > 0 and val_per < train_cfg.early_stop_per:
            break

    result.wall_seconds = time.time() - t_start

    if out_path is not None:
        header = checkpoint_header(dataset, train_cfg, mc, fe, dc, cc,
                                   epoch=result.history[-1]["epoch"]
                                   if result.history else start_epoch - 1,
                                   best_val_per=result.best_val_per,
                                   best_epoch=result.best_epoch,
                                   opt=opt, sched=sched)
        result.checkpoint_path = save_checkpoint(
            out_path, header, params_as_dict(model), best_params,
            {p.name: p.m for p in opt.params}, {p.name: p.v for p in opt.params})

    if diverged_msg is not None:
        raise TrainingDivergedError(
            f"training aborted: {diverged_msg}; last-good checkpoint "
            f"{'saved to ' + str(result.checkpoint_path) if result.checkpoint_path else 'kept in memory'}",
            result=result)

    load_params_into(model, best_params)  # hand back the selected model
    return result


def checkpoint_header(dataset, train_cfg, mc, fe, dc, cc, epoch, best_val_per,
                      best_epoch, opt, sched) -> dict:
    return {
        "format_version": 1,
        "tool_version": __version__,
        "variant": train_cfg.variant,
        "stage": train_cfg.stage,
        "daycal_mode": train_cfg.daycal,
        "with_word_decoder": train_cfg.stage == 2,
        "with_mfcc_head": train_cfg.stage == 1 and train_cfg.use_mfcc,
        "model": asdict(mc),
        "frontend": asdict(fe),
        "daycal_cfg": asdict(dc),
        "ctc": asdict(cc),
        "train": asdict(train_cfg),
        "n_channels": dataset.n_channels,
        "days": list(dataset.days),
        "word_vocab": list(dataset.word_vocab.words),
        "epoch": int(epoch),
        "best_epoch": int(best_epoch),
        "best_val_per": float(best_val_per),
        "optimizer_t": opt.t,
        "lr": opt.lr,
        "scheduler": sched.state_dict(),
    }


def model_from_checkpoint(ckpt: Checkpoint | str | Path, dataset: Dataset,
                          use_best: bool = True):
    """Rebuild the saved model against a compatible dataset."""
    from .checkpoint import CheckpointMismatchError

    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    h = ckpt.header
    for what, stored, here in (
            ("word vocabulary", h["word_vocab"], dataset.word_vocab.words),
            ("channel count", h["n_channels"], dataset.n_channels),
            ("day list", list(h["days"]), list(dataset.days))):
        if stored != here:
            raise CheckpointMismatchError(
                f"checkpoint was trained against a different {what}; "
                f"load it with the dataset it was trained on")
    tc = TrainConfig(**h["train"])
    model, *_ = build_model(dataset, tc, ModelConfig(**h["model"]),
                            FrontEndConfig(**h["frontend"]),
                            DayCalConfig(**h["daycal_cfg"]),
                            CTCConfig(**h["ctc"]))
    load_params_into(model, ckpt.best_params if use_best else ckpt.params)
    return model, ckpt
