"""Held-out-day generalization harness.

Compares a model trained on all days against a model trained with the
final days excluded, both evaluated on those final days using the
transform of the last shared training day (the proximal day). The unseen
condition subtracts the mean performance gap measured on the shared
earlier days, so its deltas isolate the cost of never having seen the
held-out sessions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluate import evaluate_per, evaluate_split
from .metrics import bootstrap_ci
from .synthdata import Dataset


@dataclass
class HeldOutRow:
    day: int
    gap: int                      # day - proximal_day
    metric: str                   # "per" (plus "wer" when models decode words)
    reference: float              # full model, correct transform
    seen_proximal: float          # full model, proximal transform
    unseen_proximal: float        # truncated model, proximal transform (raw)
    gap_correction: float         # mean truncated-vs-full gap on shared days
    delta_seen: float
    delta_unseen: float           # gap-corrected

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class HeldOutReport:
    proximal_day: int
    heldout_days: list
    shared_days: list
    rows: list = field(default_factory=list)

    def deltas(self, condition: str, metric: str = "per") -> dict:
        key = "delta_seen" if condition == "seen" else "delta_unseen"
        return {r.day: getattr(r, key) for r in self.rows if r.metric == metric}

    def to_dict(self) -> dict:
        return {"proximal_day": self.proximal_day,
                "heldout_days": list(self.heldout_days),
                "shared_days": list(self.shared_days),
                "rows": [r.to_dict() for r in self.rows]}


def exclude_days(dataset: Dataset, days_to_drop) -> Dataset:
    """Dataset restricted to the remaining days (train/val/test filtered)."""
    drop = set(days_to_drop)
    kept = [d for d in dataset.days if d not in drop]
    if not kept:
        raise ValueError("cannot drop every day")
    return Dataset(
        config=dict(dataset.config),
        phoneme_vocab=dataset.phoneme_vocab,
        word_vocab=dataset.word_vocab,
        lexicon=dataset.lexicon,
        days=kept,
        splits={s: [t for t in dataset.trials(s) if t.day_id not in drop]
                for s in dataset.splits},
    )


def heldout_day_eval(model_full, model_trunc, dataset: Dataset,
                     proximal_day: int, variant: str = "seq2seq",
                     split: str = "test", with_words: bool = False) -> HeldOutReport:
    """Per-day deltas for the seen+proximal and unseen+proximal conditions."""
    heldout = [d for d in dataset.days if d > proximal_day]
    shared = [d for d in dataset.days if d <= proximal_day]
    if not heldout:
        raise ValueError(f"no days after proximal day {proximal_day}")
    if proximal_day not in dataset.days:
        raise ValueError(f"proximal day {proximal_day} not in the dataset")

    metrics = ["per"] + (["wer"] if with_words else [])

    def rates(model, days, override):
        rep = evaluate_split(model, variant, dataset, split, with_words=with_words,
                             day_override=override, days=set(days))
        return {"per": rep.per_pooled, "wer": rep.wer_pooled}

    # mean truncated-vs-full gap on the shared days, correct transforms
    gap_corr = {m: 0.0 for m in metrics}
    full_shared = {d: rates(model_full, [d], None) for d in shared}
    trunc_shared = {d: rates(model_trunc, [d], None) for d in shared}
    for m in metrics:
        gaps = [trunc_shared[d][m] - full_shared[d][m] for d in shared]
        gap_corr[m] = float(np.mean(gaps))

    report = HeldOutReport(proximal_day=proximal_day, heldout_days=heldout,
                           shared_days=shared)
    for day in heldout:
        ref = rates(model_full, [day], None)
        seen = rates(model_full, [day], proximal_day)
        unseen = rates(model_trunc, [day], proximal_day)
        for m in metrics:
            report.rows.append(HeldOutRow(
                day=day, gap=day - proximal_day, metric=m,
                reference=ref[m], seen_proximal=seen[m],
                unseen_proximal=unseen[m], gap_correction=gap_corr[m],
                delta_seen=seen[m] - ref[m],
                delta_unseen=(unseen[m] - ref[m]) - gap_corr[m]))
    return report


def summarize_over_seeds(reports: list[HeldOutReport], metric: str = "per",
                         seed: int = 0) -> dict:
    """Seed-mean deltas per (day, condition) with 95% bootstrap CIs."""
    out: dict = {"metric": metric, "days": {}}
    days = reports[0].heldout_days
    for day in days:
        entry = {}
        for cond in ("seen", "unseen"):
            vals = [rep.deltas(cond, metric)[day] for rep in reports]
            ci = bootstrap_ci(vals, seed=seed)
            entry[cond] = {"mean": float(np.mean(vals)),
                           "ci": [ci.low, ci.high], "values": vals}
        gap = day - reports[0].proximal_day
        out["days"][day] = {"gap": gap, **entry}
    return out
