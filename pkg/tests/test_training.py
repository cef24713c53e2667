import numpy as np
import pytest

from siamgat.checkpoint import load_checkpoint
from siamgat.config import RunConfig, TrainConfig
from siamgat.geometry import context_side
from siamgat.model import SiamGATModel
from siamgat.synthetic import SynthSpec, synth_sequence
from siamgat.training import (SGD, LOG_HEADER, PairSource, TrainingDiverged, apply_freeze,
                              frozen_stages, lr_at, make_batch, make_pair, sample_pair, train)


def small_cfg(**train_kw) -> RunConfig:
    cfg = RunConfig()
    cfg.model.backbone_widths = [4, 8, 8]
    cfg.model.channels = 8
    cfg.model.transformed_channels = 8
    cfg.model.head_hidden = 8
    cfg.train.batch_size = 2
    cfg.train.calibration_batches = 1
    for k, v in train_kw.items():
        setattr(cfg.train, k, v)
    return cfg


@pytest.fixture(scope="module")
def seq():
    return synth_sequence(SynthSpec(n_frames=8, seed=2))


class TestSchedule:
    def test_anchor_values(self):
        assert lr_at(0) == 0.005
        assert lr_at(5) == 0.01
        assert lr_at(20) == 0.0005

    def test_continuous_and_monotone(self):
        t = np.linspace(0, 20, 4001)
        v = np.array([lr_at(x) for x in t])
        assert np.all(np.diff(v[t <= 5]) > 0)
        assert np.all(np.diff(v[t >= 5]) < 0)
        assert np.abs(np.diff(v)).max() < 1e-5
        assert lr_at(5 - 1e-12) == pytest.approx(lr_at(5 + 1e-12), abs=1e-12)

    def test_exponential_midpoint(self):
        assert lr_at(12.5) == pytest.approx(0.01 * (0.0005 / 0.01) ** 0.5, rel=1e-14)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(-0.1)
        with pytest.raises(ValueError):
            lr_at(20.5)

    def test_freezing_policy(self):
        cfg = TrainConfig()
        names = ("stage1", "stage2", "stage3", "stage4")
        assert frozen_stages(0, cfg, names) == list(names)
        assert frozen_stages(9, cfg, names) == list(names)
        assert frozen_stages(10, cfg, names) == ["stage1", "stage2"]


class TestPairs:
    def test_zero_jitter_is_centred(self, seq):
        p = make_pair(seq, 3, 3)
        assert (p.gt_box.cx, p.gt_box.cy) == pytest.approx((143.5, 143.5), abs=1e-12)
        assert (p.template_box.cx, p.template_box.cy) == (63.5, 63.5)
        q = sample_pair(seq, np.random.default_rng(0), max_gap=0, shift_jitter=0.0, scale_jitter=0.0)
        assert (q.gt_box.cx, q.gt_box.cy) == pytest.approx((143.5, 143.5), abs=1e-12)

    def test_shift_moves_gt_by_scaled_amount(self, seq):
        b = seq.gt[4]
        s = 287 / (context_side(b.w, b.h, 0.5) * 287 / 127)
        p = make_pair(seq, 0, 4, shift=(10.0, 0.0))
        assert p.gt_box.cx - 143.5 == pytest.approx(-10 * s, abs=1e-9)
        assert p.gt_box.w == pytest.approx(b.w * s, abs=1e-9)

    def test_scale_factor_shrinks_target(self, seq):
        a, b = make_pair(seq, 0, 4), make_pair(seq, 0, 4, scale_factor=2.0)
        assert b.gt_box.w == pytest.approx(a.gt_box.w / 2, rel=1e-12)

    def test_deterministic_stream(self, seq):
        ra, rb = np.random.default_rng(7), np.random.default_rng(7)
        a = [sample_pair(seq, ra) for _ in range(4)]
        b = [sample_pair(seq, rb) for _ in range(4)]
        assert [p.search.tobytes() for p in a] == [p.search.tobytes() for p in b]
        assert [p.gt_box for p in a] == [p.gt_box for p in b]

    def test_empty_source(self):
        with pytest.raises(ValueError):
            sample_pair([], np.random.default_rng(0))


def fixed_batch(model, seq, n=2):
    return make_batch([make_pair(seq, 0, k + 1, shift=(6.0 * k, -4.0)) for k in range(n)], model.grid)


def run_steps(model, batch, steps, lr):
    opt, losses = SGD(0.9, 1e-4), []
    for _ in range(steps):
        out, cache = model.forward(batch.templates, batch.searches, batch.template_boxes, training=True)
        loss = model.loss(out, batch.labels)
        model.zero_grad()
        model.backward(loss.grad, cache)
        opt.step(model, lr)
        losses.append(loss.total)
    return losses


class TestOptimisation:
    def test_overfit_single_pair(self, seq):
        model = SiamGATModel(RunConfig().model, 0)
        batch = make_batch([make_pair(seq, 0, 3, shift=(6.0, -4.0))], model.grid)
        losses = run_steps(model, batch, 50, 0.01)
        assert losses[-1] <= 0.5 * losses[0]

    def test_small_lr_monotone(self, seq):
        cfg = small_cfg()
        model = SiamGATModel(cfg.model, 1)
        losses = run_steps(model, fixed_batch(model, seq), 21, 1e-4)
        assert int((np.diff(losses) > 0).sum()) <= 2

    def test_gradient_clipping(self):
        class Toy:
            def __init__(self):
                self.p = np.zeros(2)
                self.g = np.array([3.0, 4.0])

            def named_grads(self):
                return [("p", self.p, self.g)]

        toy = Toy()
        norm = SGD(0.0, 0.0).step(toy, 1.0, grad_clip=1.0)
        assert norm == 5.0
        np.testing.assert_allclose(toy.p, [-0.6, -0.8], rtol=0, atol=1e-15)


class TestTrainLoop:
    def test_frozen_backbone_bytes_identical(self, seq, tmp_path):
        cfg = small_cfg(steps_per_epoch=1)
        model = SiamGATModel(cfg.model, 0)
        res = train(cfg, model, [seq], out_dir=tmp_path)
        assert len(res.checkpoints) == 20
        ck = [load_checkpoint(p) for p in res.checkpoints]
        keys = [k for k in ck[0] if k.startswith("backbone.")]
        for e in range(1, 10):
            for k in keys:
                assert ck[e][k].tobytes() == ck[0][k].tobytes(), (e + 1, k)
        for k in keys:
            changed = ck[19][k].tobytes() != ck[9][k].tobytes()
            assert changed == k.startswith(("backbone.stage3", "backbone.stage4")), k
        assert any(ck[1][k].tobytes() != ck[0][k].tobytes() for k in ck[0] if k.startswith("head."))

    def test_same_seed_identical_checkpoints(self, seq, tmp_path):
        cfg = small_cfg(steps_per_epoch=1, epochs=20)
        paths = []
        for run in ("a", "b"):
            res = train(cfg, SiamGATModel(cfg.model, cfg.seed), [seq], out_dir=tmp_path / run,
                        steps_override=3)
            paths.append(res.checkpoints[-1])
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_log_format(self, seq, tmp_path):
        cfg = small_cfg(steps_per_epoch=2)
        log_path = tmp_path / "metrics.log"
        train(cfg, SiamGATModel(cfg.model, 0), [seq], log_path=log_path, steps_override=3)
        lines = log_path.read_text().splitlines()
        assert lines[0] == LOG_HEADER and len(lines) == 4
        epoch, step, lr, *losses = lines[1].split(",")
        assert (epoch, step, float(lr)) == ("1", "0", 0.005)
        assert all(float(v) >= 0 for v in losses)

    def test_non_finite_loss_dumps_batch(self, seq, tmp_path):
        cfg = small_cfg()
        model = SiamGATModel(cfg.model, 0)
        model.head.cls_out.params["weight"][:] = np.nan
        with pytest.raises(TrainingDiverged, match="non-finite loss at epoch 1 step 0"):
            train(cfg, model, [seq], out_dir=tmp_path)
        dumps = list(tmp_path.glob("diverged_*.npz"))
        assert len(dumps) == 1
        assert np.load(dumps[0])["templates"].shape == (2, 127, 127, 3)

    def test_apply_freeze_marks_stages(self):
        cfg = small_cfg()
        model = SiamGATModel(cfg.model, 0)
        apply_freeze(model, 12, cfg.train)
        flags = [model.backbone.children[n].frozen for n in model.backbone.stage_names]
        assert flags == [True, True, False, False]

    def test_pair_source_batch_shapes(self, seq):
        cfg = small_cfg()
        model = SiamGATModel(cfg.model, 0)
        b = PairSource([seq], cfg.train, model.crop).batch(np.random.default_rng(0), model.grid)
        assert b.templates.shape == (2, 127, 127, 3) and b.searches.shape == (2, 287, 287, 3)
        assert b.labels.cls_target.shape == (2, 33, 33)
