"""Desk-scale experiments shared by the acceptance tests and the demos."""
from __future__ import annotations

import copy
from dataclasses import dataclass

from .cli import synthetic_pool
from .config import RunConfig, apply_overrides
from .evaluation import EvalReport, evaluate
from .model import SiamGATModel
from .synthetic import SynthSpec, synth_sequence
from .tracker import track_sequence
from .training import train

# name -> config overrides; each differs from the default in embedding or template selection only
ABLATION_CONFIGS = {
    "target_aware_gam": [],
    "prefixed_crop_gam": ["model.selection=prefixed_crop"],
    "dw_xcorr": ["model.embedding=dw_xcorr", "model.selection=prefixed_crop"],
}


def train_and_track(cfg: RunConfig, train_seqs, eval_seqs, steps: int) -> tuple[SiamGATModel, EvalReport]:
    """Train a fresh model for ``steps`` SGD steps, then track every ``eval_seqs`` entry."""
    cfg = copy.deepcopy(cfg)
    cfg.train.steps_per_epoch = -(-steps // cfg.train.epochs)
    model = SiamGATModel(cfg.model, cfg.seed)
    train(cfg, model, train_seqs, steps_override=steps)
    pairs = []
    for seq in eval_seqs:
        boxes = track_sequence(model, seq.frames, seq.gt[0], cfg.track)
        pairs.append((seq.name, [b.to_xywh() for b in boxes], seq.gt_xywh()))
    return model, evaluate(pairs)


@dataclass
class OverfitResult:
    ao: float
    precision: float


def overfit_sanity(seq_seed: int = 0, steps: int = 200, cfg: RunConfig | None = None) -> OverfitResult:
    """Train on one synthetic sequence and track that same sequence."""
    cfg = RunConfig() if cfg is None else cfg
    seq = synth_sequence(SynthSpec(seed=seq_seed))
    _, report = train_and_track(cfg, [seq], [seq], steps)
    m = report.aggregate
    return OverfitResult(m["AO"], m["precision@20"])


def run_ablation(steps: int = 500, n_train: int = 20, n_eval: int = 20, aspect_drift: float = 2.0,
                 seed: int = 0, configs=None, log=None) -> dict[str, float]:
    """AO of each ablation configuration on held-out aspect-drifting sequences.

    Training and evaluation pools use disjoint generator seeds; every
    configuration shares the model seed and the pair-sampling seed.
    """
    configs = ABLATION_CONFIGS if configs is None else configs
    train_seqs = synthetic_pool(n_train, 100, aspect_drift)
    eval_seqs = synthetic_pool(n_eval, 1000, aspect_drift)
    out = {}
    for name, overrides in configs.items():
        cfg = apply_overrides(RunConfig(), [f"seed={seed}", *overrides])
        _, report = train_and_track(cfg, train_seqs, eval_seqs, steps)
        out[name] = report.aggregate["AO"]
        if log is not None:
            log(f"{name}: AO {out[name]:.4f}")
    return out
