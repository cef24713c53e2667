import hashlib

import numpy as np
import pytest

from siamgat.config import ModelConfig, TrackConfig
from siamgat.geometry import BoundingBox, CropSpec, iou, project_box
from siamgat.head import GridSpec, assign_labels
from siamgat.model import SiamGATModel, TemplateCode
from siamgat.synthetic import SynthSpec, synth_sequence
from siamgat.tracker import init, track_sequence, update


def small_model(seed=0):
    cfg = ModelConfig(channels=8, backbone_widths=[4, 8, 8], transformed_channels=8, head_hidden=8)
    return SiamGATModel(cfg, seed)


class OracleModel:
    """Predicts a known image box exactly, given the crop centre the tracker will use.

    ``truth`` is the target in image coordinates; ``score`` optionally
    replaces the foreground map and ``reg`` the regression map.
    """

    crop = CropSpec()
    grid = GridSpec(33, 8, 287)

    def __init__(self, truth: BoundingBox, state_box=None, score=None, reg=None):
        self.truth, self.state_box, self.score, self.reg = truth, state_box, score, reg

    def encode_template(self, patch, box):
        feats = np.asarray(patch, dtype=float)[::8, ::8].copy()
        feats.setflags(write=False)
        return TemplateCode(feats, project_box(box, 8, 127, 13))

    def predict(self, code, patch):
        n = self.grid.size
        if self.reg is not None:
            return self.score, np.ones((n, n)), self.reg
        b = self.state_box()
        side = np.sqrt((b.w + (b.w + b.h) / 2) * (b.h + (b.w + b.h) / 2)) * 287 / 127
        s = 287 / side
        gt = BoundingBox(143.5 + (self.truth.cx - b.cx) * s, 143.5 + (self.truth.cy - b.cy) * s,
                         self.truth.w * s, self.truth.h * s)
        lab = assign_labels(gt, self.grid)
        score = lab.cen_target + 1e-3 * lab.cls_target
        return score, np.ones((n, n)), np.where(lab.cls_target[..., None] > 0, lab.reg_target, 1.0)


@pytest.fixture(scope="module")
def seq():
    return synth_sequence(SynthSpec(n_frames=4, seed=3))


class TestInit:
    def test_current_box_is_input(self, seq):
        state = init(seq.frames[0], seq.gt[0], small_model())
        assert state.current_box == seq.gt[0]

    def test_deterministic_features(self, seq):
        a = init(seq.frames[0], seq.gt[0], small_model())
        b = init(seq.frames[0], seq.gt[0], small_model())
        assert a.template.features.tobytes() == b.template.features.tobytes()
        assert a.template.roi == b.template.roi

    def test_roi_follows_projection(self):
        frame = np.zeros((240, 320, 3), np.uint8)
        box = BoundingBox(160, 120, 64, 32)
        state = init(frame, box, small_model())
        p = (box.w + box.h) / 2
        s = 127 / np.sqrt((box.w + p) * (box.h + p))
        expect = project_box(BoundingBox(63.5, 63.5, box.w * s, box.h * s), 8, 127, 13)
        assert state.template.roi == expect
        # the 85.9 x 42.9 patch box spans grid x 0.63..11.37 and y 3.32..8.68 before rounding
        assert (expect.col0, expect.col1, expect.row0, expect.row1) == (1, 10, 3, 8)

    def test_degenerate_box(self, seq):
        with pytest.raises(ValueError):
            init(seq.frames[0], BoundingBox(50, 50, 0, 10), small_model())


class TestUpdate:
    def setup_method(self):
        self.frame = np.full((300, 400, 3), 90, np.uint8)
        self.box = BoundingBox(200.0, 150.0, 40.0, 30.0)

    def test_window_only_picks_centre_cell(self):
        rng = np.random.default_rng(0)
        reg = np.full((33, 33, 4), 10.0)
        model = OracleModel(self.box, score=rng.random((33, 33)), reg=reg)
        state = init(self.frame, self.box, model, TrackConfig(window_influence=1.0))
        out = update(state, self.frame)
        # symmetric distances: the box centre is the chosen anchor, so only the centre cell keeps it put
        assert (out.cx, out.cy) == (self.box.cx, self.box.cy)

    def test_zero_penalty_uses_raw_scores(self):
        score = np.full((33, 33), 0.1)
        score[5, 9] = 0.9
        score[20, 16] = 0.5  # runner-up below the centre
        reg = np.full((33, 33, 4), 20.0)
        reg[5, 9] = (300.0, 1.0, 300.0, 1.0)  # extreme aspect change at the best cell
        for k, moved in ((0.0, True), (5.0, False)):
            model = OracleModel(self.box, score=score, reg=reg)
            state = init(self.frame, self.box, model, TrackConfig(window_influence=0.0, penalty_k=k))
            out = update(state, self.frame)
            assert (out.cy < self.box.cy) == moved

    def test_template_immutable_over_updates(self):
        seq = synth_sequence(SynthSpec(n_frames=101, seed=5))
        state = init(seq.frames[0], seq.gt[0], small_model())
        digest = hashlib.sha256(state.template.features.tobytes()).hexdigest()
        roi = state.template.roi
        for f in seq.frames[1:]:
            box = update(state, f)
            assert box.w > 0 and box.h > 0
        assert hashlib.sha256(state.template.features.tobytes()).hexdigest() == digest
        assert state.template.roi == roi
        with pytest.raises(ValueError):
            state.template.features[0, 0, 0] = 1.0

    @pytest.mark.parametrize("lr", [0.3, 1.0])
    def test_static_target_is_fixed_point(self, lr):
        model = OracleModel(self.box)
        state = init(self.frame, self.box, model, TrackConfig(lr=lr))
        model.state_box = lambda: state.current_box
        prev = state.current_box
        for _ in range(10):
            box = update(state, self.frame)
            assert abs(box.cx - prev.cx) < 0.5 and abs(box.cy - prev.cy) < 0.5
            prev = box
        assert iou(box, self.box) > 0.99

    def test_moving_target_is_followed(self):
        model = OracleModel(self.box)
        state = init(self.frame, self.box, model, TrackConfig(window_influence=0.0))
        model.state_box = lambda: state.current_box
        model.truth = BoundingBox(212.0, 141.0, 40.0, 30.0)
        box = update(state, self.frame)
        assert abs(box.cx - 212.0) < 0.5 and abs(box.cy - 141.0) < 0.5

    def test_centre_clamped_to_frame(self):
        reg = np.full((33, 33, 4), 4.0)
        score = np.zeros((33, 33))
        score[0, 0] = 1.0
        box = BoundingBox(5.0, 5.0, 40.0, 30.0)
        model = OracleModel(box, score=score, reg=reg)
        state = init(self.frame, box, model, TrackConfig(window_influence=0.0, penalty_k=0.0))
        out = update(state, self.frame)
        assert out.cx == 0.0 and out.cy == 0.0 and out.w > 0


class TestTrackSequence:
    def test_deterministic_and_starts_at_init(self, seq):
        a = track_sequence(small_model(), seq.frames, seq.gt[0])
        b = track_sequence(small_model(), seq.frames, seq.gt[0])
        assert a[0] == seq.gt[0] and len(a) == len(seq)
        assert [x.to_xywh() for x in a] == [x.to_xywh() for x in b]

    def test_overlays(self, seq, tmp_path):
        track_sequence(small_model(), seq.frames, seq.gt[0], overlay_dir=tmp_path)
        assert len(list(tmp_path.glob("*.png"))) == len(seq)
