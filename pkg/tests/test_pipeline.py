import hashlib
import json

import numpy as np
import pytest

from vdnet import data as D
from vdnet import pipeline as P

TINY_CLF = P.ClassifierRecipe(epochs=2, decay_epochs=())
TINY_DET = P.DetectorRecipe(epochs=1, decay_epochs=())


def test_derive_seed_is_sha256_prefix():
    want = int.from_bytes(hashlib.sha256(b"7:patches-train").digest()[:4], "little")
    assert P.derive_seed(7, "patches-train") == want
    assert P.derive_seed(7, "a") != P.derive_seed(7, "b") != P.derive_seed(8, "b")
    assert 0 <= P.derive_seed(123, "x") < 2 ** 32


def test_write_json_is_canonical(tmp_path):
    P.write_json(tmp_path / "sub" / "x.json", {"b": 1, "a": [1.5]})
    assert (tmp_path / "sub" / "x.json").read_text() == '{\n "a": [\n  1.5\n ],\n "b": 1\n}\n'


def test_object_coverage_oracle():
    scene = D.Scene(np.zeros((3, 8, 8)), [(0, (0, 0, 4, 4)), (1, (4, 4, 8, 6))], seed=0)
    mask = np.zeros((8, 8))
    mask[0:2, 0:4] = 1      # half of the first box
    mask[4:6, 4:8] = 1      # all of the second
    assert P.object_coverage(mask[None], [scene]) == [0.5, 1.0]


def test_ablation_table_marks_band():
    res = P.AblationResult([P.AblationRow(v, v / 12.25, 0.5 + v / 1000, 0.3, 0.9) for v in (5, 25, 35, 36)])
    lines = res.table().splitlines()
    marked = [ln for ln in lines[2:-1] if ln.endswith(" *")]
    assert len(marked) == 2 and "25.0" in marked[0] and "35.0" in marked[1]
    assert lines[-1].startswith("* variance inside")
    assert [r["in_tuned_band"] for r in res.to_json()["rows"]] == [False, True, True, False]


def test_classifier_layers_are_fully_convolutional():
    from vdnet import network as N
    m = N.Model.build((3, 16, 16), P.classifier_layers(4))
    assert m.fully_convolutional and m.last_conv_activation_index() == 3


def test_small_experiment_layout_and_repeatability(tmp_path):
    runs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        res = P.run_experiment(out, seed=11, n_train=6, n_test=3, classifier_recipe=TINY_CLF,
                               detector_recipe=TINY_DET, sweep=(5.0, 30.0))
        runs.append(res.summary)
    for rel in ("data/manifest.json", "data/train.jsonl", "data/test.jsonl",
                "ventral/classifier.ckpt", "ventral/report.json",
                "dorsal/plain.ckpt", "dorsal/masked.ckpt", "dorsal/plain.report.json",
                "eval/comparison.json", "eval/comparison.txt", "eval/ablation.json",
                "eval/plain.detections.jsonl", "eval/masked.detections.jsonl", "summary.json"):
        assert (tmp_path / "r0" / rel).is_file(), rel
    a, b = runs
    assert a["checkpoints"] == b["checkpoints"]
    assert a["mAP_plain"] == b["mAP_plain"] and a["mAP_masked"] == b["mAP_masked"]
    assert a["ablation"] == b["ablation"]
    summary = json.loads((tmp_path / "r0" / "summary.json").read_text())
    assert summary["checkpoints"]["masked.ckpt"] == P.sha256_file(tmp_path / "r0" / "dorsal" / "masked.ckpt")
    assert len(summary["ablation"]["rows"]) == 2


def test_arms_share_initialisation():
    m = D.make_manifest(2, 3, 1)
    plain, _ = P.train_dorsal(m, 2, None, P.DetectorRecipe(epochs=0))
    plain2, rep = P.train_dorsal(m, 2, None, P.DetectorRecipe(epochs=0))
    assert rep["arm"] == "plain" and rep["lambda"] == 10.0
    for k in plain.params:
        np.testing.assert_array_equal(plain.params[k].data, plain2.params[k].data)


def test_trained_ventral_fixture(trained_ventral):
    _, report, _ = trained_ventral
    assert report["test_accuracy"] >= 0.9
    assert report["train_patches"] > 0 and report["test_patches"] > 0


@pytest.mark.parametrize("context", [-0.1, 1.01])
def test_context_outside_unit_interval_rejected(context):
    m = D.make_manifest(1, 2, 1)
    with pytest.raises(D.ConfigError):
        P.patch_sets(m, 1, P.ClassifierRecipe(context=context))


def test_arms_share_batch_order():
    a = P.DetectorRecipe().schedule(7)
    assert a == P.DetectorRecipe().schedule(7)
    assert a.seed == P.derive_seed(7, "detector-shuffle")
