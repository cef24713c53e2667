"""Train a model on one synthetic sequence, then track it.

Run with ``python3 demos/train_and_track.py``; it takes about a minute
and a half on one CPU core.
"""
from pathlib import Path
import tempfile

from siamgat.config import RunConfig
from siamgat.evaluation import evaluate
from siamgat.model import SiamGATModel
from siamgat.synthetic import SynthSpec, synth_sequence
from siamgat.tracker import track_sequence
from siamgat.training import train

STEPS = 200

seq = synth_sequence(SynthSpec(seed=0))
print(f"sequence {seq.name}: {len(seq)} frames, first box {seq.gt[0].to_xywh()}")

cfg = RunConfig()
cfg.train.steps_per_epoch = STEPS // cfg.train.epochs
model = SiamGATModel(cfg.model, cfg.seed)

with tempfile.TemporaryDirectory() as tmp:
    log = Path(tmp) / "metrics.log"
    train(cfg, model, [seq], log_path=log, steps_override=STEPS)
    rows = log.read_text().splitlines()
    print(rows[0])
    for row in rows[1::40]:
        print(row)

boxes = track_sequence(model, seq.frames, seq.gt[0], cfg.track)
report = evaluate([(seq.name, [b.to_xywh() for b in boxes], seq.gt_xywh())])
print(report.to_text())
