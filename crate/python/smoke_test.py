"""Smoke test for the pecad_py extension.

Build and run from the repository root:

    cargo build --release -p pecad-py --features extension-module
    cp target/release/libpecad_py.so python/pecad_py.so
    python3 python/smoke_test.py
"""
import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pecad_py as pc


def check_rules():
    p, r = pc.weighted_precision_recall([1, 1, 0, 0, 0], [1, 0, 1, 0, 0])
    assert (p, r) == (0.6, 0.6), (p, r)
    assert pc.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    m = pc.patient_metrics(tp=9, fp=1, tn=9, fn_=2)
    assert abs(m["sensitivity"] - 9 / 11) < 1e-12 and abs(m["specificity"] - 0.9) < 1e-12
    assert pc.cascade_label(0.7, 0.2) == "NON_PE"
    assert pc.cascade_label(0.7, None) == "PE"
    assert pc.patient_verdict(["NON_PE", "PE", "PE"]) == ("PE", [1, 2])
    assert pc.iou([1, 1, 0], [1, 0, 0]) == 0.5
    try:
        pc.roc_auc([0.1, 0.2], [1, 1])
    except ValueError:
        pass
    else:
        raise AssertionError("single-class AUC accepted")


def check_networks():
    study = pc.phantom_study(seed=3, pe=True, n_slices=8, size=64)
    n, rows, cols = study["shape"]
    assert len(study["voxels"]) == n * rows * cols and "PE" in study["labels"]
    images = [[math.sin(i * 0.01 + k) for i in range(64 * 64)] for k in range(2)]
    for arch in ("drn", "mixnet"):
        net = pc.Classifier(arch, seed=1)
        probs = net.predict(images)
        assert len(probs) == 2 and all(0.0 < q < 1.0 for q in probs), probs
        assert net.num_params > 0
    seg = pc.Segmenter(seed=1)
    masks = seg.predict(images)
    assert len(masks) == 2 and len(masks[0]) == 64 * 64


def check_pipeline():
    with tempfile.TemporaryDirectory() as d:
        toml = f"""
seed = 2
output_dir = {json.dumps(os.path.join(d, "out"))}

[phantom]
n_pe = 3
n_non_pe = 3

[dataset]
split_ratios = [0.6666666666666666, 0.16666666666666666, 0.16666666666666669]

[training.classifier]
max_epochs = 1

[training.fp_classifier]
max_epochs = 1

[training.segmenter]
max_epochs = 1
"""
        run = pc.Pipeline(toml)
        assert len(run.config_hash) == 64
        data = run.synth()
        run.split()
        for target in ("drn", "mixnet", "fpnet", "segmenter"):
            run.train(target)
        report = json.load(open(run.eval("test")))
        assert [r["model"] for r in report["per_image"]][-1] == "Ensemble with false-positive reduction"
        vol = os.path.join(os.path.dirname(data), "ph0000-pe.ctvol.json")
        triage = json.loads(run.triage(vol))
        assert triage["verdict"] in ("PE", "NON_PE")
        assert len(pc.preprocess_volume(vol)) == len(triage["per_image"])


if __name__ == "__main__":
    check_rules()
    check_networks()
    check_pipeline()
    print("python smoke test passed")
