import csv

import numpy as np
import pytest
import torch
from PIL import Image

from fedgca import classifier as clf
from fedgca import dataset_store, federation, style_complement
from fedgca.config import AblationSpec, ConfigError
from fedgca.dataset_store import LabeledDataset
from fedgca.evaluation import (
    ABLATION_GRID,
    cam_panels,
    colormap,
    evaluate,
    export_cams,
    run_ablation,
    write_results_csv,
    write_summary_csv,
)
from fedgca.federation import RoundMetrics, run_federation
from fedgca.objectives import LossBreakdown

from conftest import TINY_SPEC, tiny_config, tiny_source


def balanced_target(n=2000, classes=10, shape=(3, 8, 8)):
    labels = np.arange(n) % classes
    return LabeledDataset(np.zeros((n, *shape), np.float32), labels, "bal", classes)


def test_random_predictions_are_at_chance(monkeypatch):
    rng = np.random.default_rng(0)
    monkeypatch.setattr(clf, "forward", lambda spec, p, x: (torch.from_numpy(rng.random((len(x), 10))), None))
    spec = clf.ClassifierSpec((3, 8, 8), (4, 8), 10)
    acc = evaluate(spec, torch.zeros(spec.D), [balanced_target()])["bal"]
    assert abs(acc - 0.10) <= 0.02


def test_label_leaking_model_is_perfect(monkeypatch):
    target = balanced_target(100)
    leaked = iter(np.array_split(target.labels, 1))
    monkeypatch.setattr(
        clf, "forward", lambda spec, p, x: (torch.nn.functional.one_hot(torch.from_numpy(next(leaked)), 10).double(), None)
    )
    spec = clf.ClassifierSpec((3, 8, 8), (4, 8), 10)
    assert evaluate(spec, torch.zeros(spec.D), [target]) == {"bal": 1.0}


def test_matches_argmax_loop():
    params = clf.init_params(TINY_SPEC, 3)
    target = tiny_source(20, seed=9)
    got = evaluate(TINY_SPEC, params, [target], batch_size=7)[target.domain_tag]
    hits = 0
    for img, label in zip(target.images, target.labels):
        logits, _ = clf.forward(TINY_SPEC, params, img[None])
        row = logits[0].tolist()
        hits += int(max(range(len(row)), key=lambda c: row[c]) == label)
    assert got == hits / 20


def test_class_count_mismatch():
    with pytest.raises(ValueError, match="classes"):
        evaluate(TINY_SPEC, clf.init_params(TINY_SPEC, 0), [balanced_target(10)])


def test_nesting_rejected():
    with pytest.raises(ConfigError):
        AblationSpec(True, True, False, True)
    with pytest.raises(ConfigError):
        AblationSpec(False, True, False, False)
    assert [s.label for s in ABLATION_GRID] == ["none", "P", "P+PG", "P+PG+M", "P+PG+M+MG"]


def test_paired_specs_share_random_streams(monkeypatch):
    """Rows differing only in the global-CAM flag draw from identical keys."""
    log = []
    real_rng, real_seed = federation.make_rng, federation.derive_seed

    def rng_spy(key):
        log.append(("rng", key))
        return real_rng(key)

    def seed_spy(*key):
        log.append(("seed", key))
        return real_seed(*key)

    for mod in (federation, style_complement, dataset_store, clf):
        monkeypatch.setattr(mod, "make_rng", rng_spy)
    monkeypatch.setattr(federation, "derive_seed", seed_spy)

    cfg = tiny_config()
    streams = []
    for flags in ("1110", "1111"):
        log.clear()
        run_federation(cfg.with_ablation(AblationSpec.from_flags(flags)), tiny_source())
        streams.append(list(log))
    assert streams[0] == streams[1]
    assert any(kind == "seed" for kind, _ in streams[0])


def test_run_ablation_rows():
    cfg = tiny_config(T=1)
    target = tiny_source(10, seed=4)
    rows = run_ablation(cfg, ABLATION_GRID[:2], tiny_source(), [target])
    assert [r.spec for r in rows] == ABLATION_GRID[:2]
    assert all(set(r.accuracy) == {target.domain_tag} for r in rows)
    assert 0 <= rows[0].average <= 1
    with pytest.raises(ConfigError):
        run_ablation(cfg, ["1111"], tiny_source(), [target])


def test_colormap_endpoints():
    lut = colormap()
    assert lut.shape == (256, 3) and lut.dtype == np.uint8
    assert lut[0].tolist() == [0, 0, 128]
    assert lut[255].tolist() == [128, 0, 0]


def zero_head_params(spec):
    params = clf.init_params(spec, 0)
    clf.unflatten(spec, params)["fc.weight"].zero_()
    return params


def test_export_names_and_uniform_heatmap(tmp_path):
    spec = clf.ClassifierSpec()
    samples = np.random.default_rng(0).random((3, 3, 28, 28)).astype(np.float32)
    paths = export_cams(spec, zero_head_params(spec), samples, tmp_path)
    # zero head: all logits tie, argmax picks class 0
    assert [p.name for p in paths] == ["cam_0_0.png", "cam_1_0.png", "cam_2_0.png"]
    strip = np.asarray(Image.open(paths[0]))
    assert strip.shape == (28, 84, 3)
    heat = strip[:, 28:56]
    expected = colormap()[int(np.rint(255 / 9))]
    assert np.all(heat == expected)


def test_export_byte_identical(tmp_path):
    spec = TINY_SPEC
    params = clf.init_params(spec, 7)
    samples = tiny_source(2).images
    a = export_cams(spec, params, samples, tmp_path / "a")
    b = export_cams(spec, params, samples, tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_cam_panels_grayscale_input():
    img = np.full((1, 4, 4), 0.5)
    strip = cam_panels(img, torch.full((2, 2), 0.25))
    assert strip.shape == (4, 12, 3)
    assert np.all(strip[:, :4] == 128)


def test_csv_writers(tmp_path):
    hist = [RoundMetrics(1, {}, LossBreakdown()), RoundMetrics(2, {"a": 0.5, "b": 0.25}, LossBreakdown())]
    rows = list(csv.reader(open(write_results_csv(tmp_path / "r.csv", "run", hist))))
    assert rows == [["run_id", "round", "domain", "accuracy"], ["run", "2", "a", "0.500000"], ["run", "2", "b", "0.250000"]]
    path = write_summary_csv(tmp_path / "s.csv", [("fedgca", {"a": 0.5, "b": 0.25})], ["a", "b"])
    assert list(csv.reader(open(path))) == [["method", "a", "b", "Avg"], ["fedgca", "50.00", "25.00", "37.50"]]
