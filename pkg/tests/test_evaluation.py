import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

import oracles
from facediff.attention import AttentionVariant
from facediff.data import SyntheticDatasetSpec, generate_dataset
from facediff.denoiser import Denoiser, DenoiserConfig
from facediff.diffusion import SamplerConfig, make_schedule
from facediff.evaluation import (REPORT_COLUMNS, MissingCheckpointError,
                                 confidence_half_width, facial_dynamics_deviation,
                                 lip_vertex_error, motion_std_map, report_from_predictions,
                                 run_ablation, write_report_csv, write_std_map_csv)
from facediff.training import TrainConfig

LIP = np.array([True, True, False, False, False])
UPPER = np.array([False, False, True, True, False])


def test_lve_cases(rng):
    gt = rng.standard_normal((6, 5, 3))
    assert lip_vertex_error(gt, gt, LIP) == 0
    pred = gt.copy()
    pred[2, 1] += np.array([0.0, 0.3, 0.4])
    assert lip_vertex_error(pred, gt, LIP) == pytest.approx(0.5 / 6)
    pred = rng.standard_normal((6, 5, 3))
    assert lip_vertex_error(pred, gt, LIP) == pytest.approx(oracles.lve(pred, gt, LIP), abs=1e-7)
    with pytest.raises(ValueError):
        lip_vertex_error(pred, gt, np.zeros(5, bool))


def test_fdd_cases(rng):
    gt = rng.standard_normal((8, 5, 3))
    assert facial_dynamics_deviation(gt, gt, UPPER) == 0
    static = np.zeros_like(gt)
    gt_std = [oracles.two_pass_std([math.sqrt(sum(gt[t, v] ** 2)) for t in range(8)])
              for v in (2, 3)]
    assert facial_dynamics_deviation(static, gt, UPPER) == pytest.approx(np.mean(gt_std))
    pred = rng.standard_normal((8, 5, 3))
    assert facial_dynamics_deviation(pred, gt, UPPER) == pytest.approx(
        oracles.fdd(pred, gt, UPPER), abs=1e-6)
    with pytest.raises(ValueError):
        facial_dynamics_deviation(pred[:1], gt[:1], UPPER)


@given(arrays(np.float64, (4, 5, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (4, 5, 3), elements=st.floats(-5, 5)), st.floats(0.1, 10))
def test_metric_invariances(gt, noise, c):
    pred = gt + noise
    lve = lip_vertex_error(pred, gt, LIP)
    assert lip_vertex_error(c * pred, c * gt, LIP) == pytest.approx(c * lve, rel=1e-9, abs=1e-12)
    # errors outside a mask never change the metric
    bumped = pred.copy()
    bumped[:, ~LIP] += 7.0
    assert lip_vertex_error(bumped, gt, LIP) == pytest.approx(lve, rel=1e-12, abs=1e-12)
    fdd = facial_dynamics_deviation(pred, gt, UPPER)
    bumped = pred.copy()
    bumped[:, ~UPPER] *= 3.0
    assert facial_dynamics_deviation(bumped, gt, UPPER) == pytest.approx(fdd, abs=1e-12)
    assert lve >= 0 and fdd >= 0


def test_lve_zero_only_for_exact_lip_match(rng):
    gt = rng.standard_normal((5, 5, 3))
    pred = gt.copy()
    pred[4, 0, 2] += 1e-6
    assert lip_vertex_error(pred, gt, LIP) > 0


def test_std_map_cases():
    assert np.all(motion_std_map([np.zeros((5, 4, 3))]) == 0)
    T, A = 1000, 0.7
    t = np.arange(T)
    seq = np.zeros((T, 1, 3))
    # the norm of an offset-centred sinusoid stays positive, so it is the sinusoid itself
    seq[:, 0, 1] = 2.0 + A * np.sin(2 * np.pi * t / 37.3)
    assert motion_std_map([seq])[0] == pytest.approx(A / math.sqrt(2), rel=0.02)
    rng = np.random.default_rng(0)
    s = rng.standard_normal((9, 4, 3))
    np.testing.assert_allclose(motion_std_map([s, s]), motion_std_map([s]), atol=1e-12)


def test_std_map_csv(tmp_path):
    from facediff.data import make_template
    template = make_template(5, np.random.default_rng(0))
    write_std_map_csv(tmp_path / "m.csv", np.arange(5.0), template)
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert [float(r["std"]) for r in rows] == [0, 1, 2, 3, 4]
    assert rows[0]["region"] == "lip"


def test_confidence_half_width():
    assert confidence_half_width([1.0]) is None
    vals = [1.0, 2.0, 4.0]
    sem = np.std(vals, ddof=1) / math.sqrt(3)
    assert confidence_half_width(vals) == pytest.approx(stats.t.ppf(0.975, 2) * sem)


def test_report_and_csv(tmp_path):
    from facediff.data import make_template
    template = make_template(10, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    gts = [rng.standard_normal((6, 10, 3)) for _ in range(2)]
    preds = {s: [g + rng.standard_normal(g.shape) * 0.1 for g in gts] for s in (0, 1, 2)}
    r = report_from_predictions(preds, gts, template, "x", 0.5)
    assert r.seeds_used == [0, 1, 2] and r.lve_ci is not None and r.fdd_ci is not None
    assert r.lve == pytest.approx(np.mean(r.lve_per_seed))
    single = report_from_predictions({4: preds[0]}, gts, template)
    assert single.lve_ci is None and single.fdd_ci is None
    write_report_csv(tmp_path / "r.csv", [r, single])
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == REPORT_COLUMNS
    assert rows[1][REPORT_COLUMNS.index("lve_ci95")] != ""
    assert rows[2][REPORT_COLUMNS.index("lve_ci95")] == ""


@pytest.fixture(scope="module")
def tiny_setup():
    spec = SyntheticDatasetSpec(vertex_count=8, subject_count=2, feature_dim=4,
                                sequence_count=6, min_frames=8, max_frames=12, rng_seed=1)
    ds = generate_dataset(spec)
    cfg = DenoiserConfig(hidden_dim=8, ff_dim=8, heads=2, vertex_count=8, feature_dim=4,
                         subject_count=2, diffusion_steps=10)
    return ds, cfg


def test_run_ablation_shape_and_determinism(tiny_setup):
    ds, cfg = tiny_setup
    kwargs = dict(train_items=ds.items[:4], test_items=ds.items[4:], template=ds.template,
                  variants=["full", "no_cross_bias"], guidance_values=[0.0, 0.0, 1.0],
                  seeds=[0], schedule=make_schedule(10), model_config=cfg,
                  train_config=TrainConfig(batch_size=2, learning_rate=1e-3), train_steps=2,
                  sampler=SamplerConfig(3))
    trained = []
    rows = run_ablation(**kwargs, on_trained=lambda v, m: trained.append(v))
    assert [(r.label, r.guidance) for r in rows] == [
        ("full", 0.0), ("full", 0.0), ("full", 1.0),
        ("no_cross_bias", 0.0), ("no_cross_bias", 0.0), ("no_cross_bias", 1.0)]
    assert trained == [AttentionVariant.FULL, AttentionVariant.NO_CROSS_BIAS]
    assert rows[0].lve == rows[1].lve and rows[0].fdd == rows[1].fdd
    assert all(r.lve_ci is None for r in rows)
    with pytest.raises(MissingCheckpointError):
        run_ablation(**kwargs, allow_train=False)
    models = {AttentionVariant.FULL: Denoiser(cfg, seed=0)}
    rows = run_ablation(**{**kwargs, "variants": ["full"]}, models=models, allow_train=False)
    assert len(rows) == 3
