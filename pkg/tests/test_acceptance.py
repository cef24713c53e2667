"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed at session end."""
import time

import numpy as np
import pytest

from siamgat.checkpoint import load_checkpoint
from siamgat.cli import cmd_synth, cmd_track, cmd_train
from siamgat.config import RunConfig
from siamgat.evaluation import ao_sr, precision_at, success_auc
from siamgat.experiments import overfit_sanity, run_ablation
from siamgat.gam import GraphAttention, dw_xcorr, gam_forward
from siamgat.geometry import TemplateROI
from siamgat.gradcheck_suite import format_table, run_suite
from siamgat.synthetic import SynthSpec, synth_sequence
from siamgat.training import lr_at

from helpers import ACCEPTANCE, random_gam
from oracles import (ao_sr_loop, dw_xcorr_loop, gam_param_dict, gam_reference, precision_loop,
                     success_auc_loop)


class Criterion:
    """Times a criterion body and records its verdict whether or not it raises."""

    def __init__(self, number, title, budget=None):
        self.number, self.title, self.budget = number, title, budget
        self.detail = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        ok = exc_type is None
        if ok and self.budget is not None and elapsed >= self.budget:
            ok = False
            self.detail += f" over the {self.budget:.0f} s budget"
        line = f"{'PASS' if ok else 'FAIL'} {self.number}. {self.title} ({elapsed:.1f} s){self.detail}"
        ACCEPTANCE.append(line)
        print(line)
        if exc_type is None and not ok:
            pytest.fail(line)
        return False


def test_1_attention_invariants():
    with Criterion(1, "attention invariants on 100 random GAM instances", 10):
        rng = np.random.default_rng(101)
        for k in range(100):
            op, ft, fs, roi = random_gam(rng)
            selection = ("crop", "zero_mask")[k % 2]
            masking = ("exclude", "include_zeros")[(k // 2) % 2]
            _, det = gam_forward(ft, fs, roi, op, selection, masking, return_details=True)
            a, sup = det.attention, det.support
            np.testing.assert_allclose(a[:, sup].sum(axis=1), 1.0, rtol=0, atol=1e-9)
            assert np.all(a[:, ~sup] == 0.0)
            vt = det.template_values[sup]
            assert np.all(det.aggregated >= vt.min(axis=0) - 1e-12)
            assert np.all(det.aggregated <= vt.max(axis=0) + 1e-12)


def test_2_oracle_equivalence():
    with Criterion(2, "gam_forward and dw_xcorr match nested-loop references", 10) as c:
        rng = np.random.default_rng(202)
        worst = 0.0
        for _ in range(20):
            op, ft, fs, roi = random_gam(rng)
            out = gam_forward(ft, fs, roi, op)
            ref, _, _ = gam_reference(ft, fs, (roi.row0, roi.col0, roi.row1, roi.col1), gam_param_dict(op))
            worst = max(worst, np.abs(out - ref).max())
            np.testing.assert_allclose(out, ref, rtol=0, atol=1e-8)
        for _ in range(20):
            ch = int(rng.integers(1, 9))
            ht, wt = rng.integers(1, 6, 2)
            hs, ws = ht + rng.integers(0, 6), wt + rng.integers(0, 6)
            t, s = rng.normal(size=(ht, wt, ch)), rng.normal(size=(hs, ws, ch))
            out = dw_xcorr(t, s)
            worst = max(worst, np.abs(out - dw_xcorr_loop(t, s)).max())
            np.testing.assert_allclose(out, dw_xcorr_loop(t, s), rtol=0, atol=1e-8)
        c.detail = f" max abs diff {worst:.1e}"


def test_3_gradient_correctness():
    with Criterion(3, "grad_check at tol 1e-4, eps 1e-5, seeds 0-2", 60) as c:
        rows = run_suite(seeds=(0, 1, 2), eps=1e-5, tol=1e-4)
        c.detail = f" worst rel err {max(r.max_rel_err for r in rows):.1e} over {len(rows)} checks"
        required = {"conv1x1", "batchnorm_train", "batchnorm_infer", "masked_softmax",
                    "gam_zero_mask_exclude", "dw_xcorr", "head_loss_ce"}
        assert required <= {r.name for r in rows}
        assert all(r.passed for r in rows), format_table(rows)


def test_4_selection_modes_consistent():
    with Criterion(4, "crop and zero_mask selection agree", 5):
        rng = np.random.default_rng(404)
        for _ in range(20):
            c, cp = rng.integers(1, 9, 2)
            H, W = rng.integers(2, 6, 2)
            op = GraphAttention(int(c), int(cp), batchnorm=False, rng=rng)
            op.wv.params["bias"] = rng.normal(size=int(cp))
            ft = rng.normal(size=(H, W, c))
            fs = rng.normal(size=(rng.integers(1, 10), rng.integers(1, 10), c))
            full = TemplateROI.full((int(H), int(W)))
            a = gam_forward(ft, fs, full, op, "crop", "exclude")
            b = gam_forward(ft, fs, full, op, "zero_mask", "exclude")
            assert a.tobytes() == b.tobytes()
            r0, c0 = int(rng.integers(0, H - 1)), int(rng.integers(0, W - 1))
            sub = TemplateROI(r0, c0, int(rng.integers(r0, H - 1)), int(rng.integers(c0, W - 1)), (int(H), int(W)))
            a = gam_forward(ft, fs, sub, op, "crop", "exclude")
            b = gam_forward(ft, fs, sub, op, "zero_mask", "exclude")
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_5_ablation_ordering():
    with Criterion(5, "ablation ordering target-aware > prefixed-crop >= dw_xcorr - 0.02", 1800) as c:
        ao = run_ablation(steps=500, n_train=20, n_eval=20, aspect_drift=2.0, seed=0)
        c.detail = " AO " + ", ".join(f"{k} {v:.4f}" for k, v in ao.items())
        assert ao["target_aware_gam"] > ao["prefixed_crop_gam"]
        assert ao["prefixed_crop_gam"] >= ao["dw_xcorr"] - 0.02


def test_6_overfit_sanity():
    with Criterion(6, "overfit one sequence in 200 steps: AO >= 0.8, precision@20 >= 0.9", 600) as c:
        res = overfit_sanity(seq_seed=0, steps=200)
        c.detail = f" AO {res.ao:.4f} precision@20 {res.precision:.4f}"
        assert res.ao >= 0.8 and res.precision >= 0.9


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    """Two default-model cmd_train runs over the whole 20-epoch schedule at one step per epoch."""
    root = tmp_path_factory.mktemp("acceptance")
    seqs = [synth_sequence(SynthSpec(seed=s, n_frames=20)) for s in (0, 1)]
    cfg = RunConfig()
    cfg.train.steps_per_epoch = 1
    runs = [cmd_train(cfg, seqs, root / name).checkpoints for name in ("a", "b")]
    return cfg, root, runs


def test_7_schedule_fidelity(two_runs):
    with Criterion(7, "lr anchors exact and backbone frozen over epochs 1-10"):
        assert (lr_at(0), lr_at(5), lr_at(20)) == (0.005, 0.01, 0.0005)
        ck = [load_checkpoint(p) for p in two_runs[2][0]]
        assert len(ck) == 20
        keys = [k for k in ck[0] if k.startswith("backbone.")]
        for e in range(1, 10):
            assert all(ck[e][k].tobytes() == ck[0][k].tobytes() for k in keys), f"epoch {e + 1}"
        assert any(ck[19][k].tobytes() != ck[9][k].tobytes() for k in keys)


def test_8_metric_correctness():
    with Criterion(8, "metrics match loop recomputation on 1000 series", 5):
        rng = np.random.default_rng(808)
        for _ in range(1000):
            n = int(rng.integers(1, 60))
            ious = rng.random(n)
            ious[rng.random(n) < 0.2] = rng.choice([0.0, 0.5, 0.75, 1.0])
            errs = rng.uniform(0, 50, n)
            errs[rng.random(n) < 0.2] = 20.0
            assert abs(success_auc(ious) - success_auc_loop(ious)) <= 1e-12
            assert abs(precision_at(errs) - precision_loop(errs)) <= 1e-12
            m, (ao, s5, s75) = ao_sr(ious), ao_sr_loop(ious)
            assert abs(m["AO"] - ao) <= 1e-12 and m["SR_0.5"] == s5 and m["SR_0.75"] == s75
        assert ao_sr([0.5])["SR_0.5"] == 0.0 and ao_sr([0.75])["SR_0.75"] == 0.0


def test_9_determinism(two_runs):
    with Criterion(9, "cmd_train and cmd_track are byte-identical across runs"):
        cfg, root, (a, b) = two_runs
        assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
        seq_dir = cmd_synth(SynthSpec(seed=9, n_frames=10), root / "seq")[0]
        first = cmd_track(cfg, seq_dir, a[-1], root / "t1.txt")[0].read_bytes()
        second = cmd_track(cfg, seq_dir, b[-1], root / "t2.txt")[0].read_bytes()
        assert first == second
