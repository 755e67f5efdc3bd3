import csv
import json

import numpy as np
import pytest

from nsdd.diffusion import GaussianPrior, make_schedule
from nsdd.distill import (TEACHER_SIGMA_Y, TeacherConfig, build_teacher_cache, is_test_item, load_cache,
                          load_student, make_student, save_student, student_forward, student_infer_batch,
                          student_input, teacher_target, train_student)
from nsdd.errors import ConfigError, ParameterError, ShapeError, StaleCacheError
from nsdd.forward_model import make_operator, make_pinv, pinv_apply, synth_mask_psf
from nsdd.micro_net import AdamState
from nsdd.scenes import simulate_capture, synth_scenes
from nsdd.tensor_io import SeededRng

DIMS = (8, 8, 1)


@pytest.fixture(scope="module")
def setup():
    rng = SeededRng(21)
    op = make_operator(synth_mask_psf("random_binary", rng.child("psf"), DIMS, {"fill": 0.5, "size": 3}), DIMS)
    pinv = make_pinv(op)
    scenes = synth_scenes("mixed", 10, rng.child("scenes"), DIMS)
    ys = {f"s{i:03d}": simulate_capture(op, x, 0.0, rng) for i, x in enumerate(scenes)}
    cfg = TeacherConfig(make_schedule(T=10), pinv)
    return {"op": op, "pinv": pinv, "ys": ys, "cfg": cfg, "prior": GaussianPrior(0.5, 0.1)}


def files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_default_teacher_noise_level(setup):
    assert TEACHER_SIGMA_Y == 0.6 and setup["cfg"].sigma_y == 0.6


def test_cache_rebuild_is_bit_identical(setup, tmp_path):
    a = build_teacher_cache(setup["ys"], setup["op"], setup["prior"], setup["cfg"], 5, tmp_path / "a")
    b = build_teacher_cache(setup["ys"], setup["op"], setup["prior"], setup["cfg"], 5, tmp_path / "b")
    assert a.name == b.name and files(a) == files(b)
    manifest = json.loads((a / "manifest.json").read_text())
    assert len(manifest["items"]) == 10 and manifest["T"] == 10
    # rebuilding in place is idempotent
    build_teacher_cache(setup["ys"], setup["op"], setup["prior"], setup["cfg"], 5, tmp_path / "a")
    assert files(a) == files(b)


def test_target_reproducible_from_manifest(setup, tmp_path):
    path = build_teacher_cache(setup["ys"], setup["op"], setup["prior"], setup["cfg"], 5, tmp_path)
    cache = load_cache(path)
    item = cache.manifest["items"][3]
    again = teacher_target(setup["op"], setup["prior"], setup["cfg"], cache.y[3], item["seed"])
    assert again.tobytes() == cache.target[3].tobytes()


def test_stale_cache_guard(setup, tmp_path):
    build_teacher_cache(setup["ys"], setup["op"], setup["prior"], setup["cfg"], 5, tmp_path)
    other = TeacherConfig(setup["cfg"].sched, setup["pinv"], sigma_y=0.4)
    with pytest.raises(StaleCacheError):
        build_teacher_cache(setup["ys"], setup["op"], setup["prior"], other, 5, tmp_path)
    fresh = build_teacher_cache(setup["ys"], setup["op"], setup["prior"], other, 5, tmp_path, overwrite=True)
    assert [p.name for p in tmp_path.iterdir()] == [fresh.name]


def test_changed_measurements_are_stale(setup, tmp_path):
    build_teacher_cache(setup["ys"], setup["op"], setup["prior"], setup["cfg"], 5, tmp_path)
    noisy = {k: v + 1e-3 for k, v in setup["ys"].items()}
    with pytest.raises(StaleCacheError):
        build_teacher_cache(noisy, setup["op"], setup["prior"], setup["cfg"], 5, tmp_path)


def test_empty_dataset_rejected(setup, tmp_path):
    with pytest.raises(ParameterError):
        build_teacher_cache({}, setup["op"], setup["prior"], setup["cfg"], 5, tmp_path)


def test_student_input_layout(setup):
    y = setup["ys"]["s000"]
    z = student_input(setup["pinv"], y)
    assert z.shape == (8, 8, 2)
    assert np.array_equal(z[..., :1], y) and np.array_equal(z[..., 1:], pinv_apply(setup["pinv"], y))


def test_untrained_student_is_anchor(setup):
    model = make_student(1, SeededRng(0), widths=(4, 6))
    y = setup["ys"]["s001"]
    x_s, resid = student_forward(model, setup["op"], setup["pinv"], y)
    assert np.array_equal(x_s, pinv_apply(setup["pinv"], y)) and not resid.any()


def test_composition_identity(setup):
    model = make_student(1, SeededRng(1), widths=(4, 6))
    model.set_params(SeededRng(2).normal(model.num_params) * 0.1)
    y = setup["ys"]["s002"]
    x_s, resid = student_forward(model, setup["op"], setup["pinv"], y)
    assert resid.any()
    anchor = pinv_apply(setup["pinv"], y)
    # equal up to the rounding of the one addition that formed x_s
    assert np.all(np.abs(x_s - resid - anchor) <= 2 * np.spacing(np.maximum(np.abs(x_s), np.abs(anchor))))


def test_project_null_flag(setup):
    model = make_student(1, SeededRng(1), widths=(4, 6), project_null=True)
    model.set_params(SeededRng(2).normal(model.num_params) * 0.1)
    y = setup["ys"]["s003"]
    x_s, _ = student_forward(model, setup["op"], setup["pinv"], y)
    assert np.max(np.abs(setup["op"].apply(x_s - pinv_apply(setup["pinv"], y)))) < 1e-8


def test_channel_mismatch(setup):
    model = make_student(3, SeededRng(0), widths=(4, 6))
    with pytest.raises(ShapeError):
        student_forward(model, setup["op"], setup["pinv"], setup["ys"]["s000"])


def test_bad_t_fix():
    with pytest.raises(ParameterError):
        make_student(1, SeededRng(0), t_fix="middle")


def test_single_item_overfit(setup, tmp_path):
    ys = {"only": setup["ys"]["s004"]}
    path = build_teacher_cache(ys, setup["op"], setup["prior"], setup["cfg"], 5, tmp_path)
    cache = load_cache(path)
    assert not is_test_item("only")
    model = make_student(1, SeededRng(3), widths=(8, 8))
    res = train_student(model, cache, setup["op"], setup["pinv"], AdamState(lr=3e-3), 1500, SeededRng(4),
                        curves_path=tmp_path / "curves.csv")
    assert res.curves[-1][1] < 1e-5 < res.initial_train_mse
    rows = list(csv.reader(open(tmp_path / "curves.csv")))
    assert rows[0] == ["epoch", "train_mse", "test_mse"] and len(rows) == 1501


def test_training_is_deterministic(setup, tmp_path):
    cache = load_cache(build_teacher_cache(setup["ys"], setup["op"], setup["prior"], setup["cfg"], 5, tmp_path))
    runs = []
    for _ in range(2):
        model = make_student(1, SeededRng(3), widths=(4, 6))
        runs.append(train_student(model, cache, setup["op"], setup["pinv"], AdamState(lr=1e-3), 3, SeededRng(4)))
    assert runs[0].curves == runs[1].curves
    assert runs[0].model.get_params().tobytes() == runs[1].model.get_params().tobytes()
    assert runs[0].curves[-1][1] < runs[0].initial_train_mse


def test_operator_mismatch_is_config_error(setup, tmp_path):
    cache = load_cache(build_teacher_cache(setup["ys"], setup["op"], setup["prior"], setup["cfg"], 5, tmp_path))
    wiener = make_pinv(setup["op"], "wiener", lambda_w=1e-2)
    with pytest.raises(ConfigError):
        train_student(make_student(1, SeededRng(0), widths=(4, 6)), cache, setup["op"], wiener,
                      AdamState(), 1, SeededRng(0))


def test_split_is_stable():
    ids = [f"item{i:05d}" for i in range(2000)]
    frac = np.mean([is_test_item(i) for i in ids])
    assert 0.07 < frac < 0.13
    assert [is_test_item(i) for i in ids[:100]] == [is_test_item(i) for i in ids[:100]]


def test_infer_rows_and_timed_region(setup):
    model = make_student(1, SeededRng(0), widths=(4, 6))
    ticks = iter(range(100))
    outs, secs = student_infer_batch(model, setup["op"], setup["pinv"], list(setup["ys"].values()),
                                     clock=lambda: float(next(ticks)))
    assert outs.shape == (10, 8, 8, 1) and secs == [1.0] * 10


def test_save_load_student(setup, tmp_path):
    model = make_student(1, SeededRng(5), t_fix="low", widths=(4, 6), project_null=True)
    model.set_params(SeededRng(6).normal(model.num_params) * 0.05)
    save_student(model, tmp_path / "st")
    back = load_student(tmp_path / "st")
    y = setup["ys"]["s005"]
    assert back.t_fix == "low" and back.project_null
    assert np.array_equal(student_forward(back, setup["op"], setup["pinv"], y)[0],
                          student_forward(model, setup["op"], setup["pinv"], y)[0])
