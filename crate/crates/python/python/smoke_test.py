"""Smoke test for the lesionmap Python bindings.

Build and install the extension first, e.g.

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/lesionmap-*.whl

then run ``python crates/python/python/smoke_test.py``.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

import lesionmap as lm


def main():
    ph = lm.generate_phantom(noise_sigma=15.0, seed=42)
    flair, brain, lesion = ph["flair"], ph["brain"], ph["lesion"]
    assert flair.shape == (64, 64, 48)
    assert lesion.count() > 0 and lesion.is_subset_of(brain)

    # numpy round trip keeps [x, y, z] indexing
    arr = flair.to_numpy()
    assert arr.shape == (64, 64, 48)
    assert np.array_equal(lm.Volume(arr).to_numpy(), arr)
    assert np.array_equal(lm.Mask(brain.to_numpy()).to_numpy(), brain.to_numpy())

    # stage by stage
    den = lm.nlm_denoise(flair, brain, sigma=15.0)
    norm = lm.normalize_intensity(den, brain)
    sob = lm.sobel_magnitude(norm)
    inter, hist = lm.build_intermediate(norm, sob, brain, bins=1024)
    assert hist["q_rescaled"][-1] == 1.0
    hi, degenerate = lm.score_map(inter, brain)
    assert not degenerate
    lo, top = hi.min_max()
    assert 0.0 <= lo and top <= 1.0

    labels = lm.initial_segmentation([norm, ph["t1"]], brain, k=3, seed=0)
    assert labels.shape == (64, 64, 48) and labels.max() == 3
    wm_initial = lm.select_cluster_by_atlas(labels, ph["wm_atlas"])
    assert wm_initial == ph["wm"]
    wm_est = lm.estimate_wm(wm_initial, hi, ph["wm_atlas"], brain, k_sigma=3.0)
    assert wm_initial.is_subset_of(wm_est)

    truth = ph["wm"].union(lesion)
    print(f"DSC {lm.dsc(truth, wm_est):.4f}  LI {lm.lesion_intersection(lesion, wm_est):.2f}%")
    wm_pure = wm_initial.difference(lesion)
    print(f"IPD vs WM: HI map {lm.ipd(hi, lesion, wm_pure):.1f}%")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        lm.write_volume(flair, tmp / "flair.nii")
        lm.write_volume(ph["t1"], tmp / "t1.nii")
        lm.write_volume(ph["wm_atlas"], tmp / "wm_atlas.nii")
        lm.write_volume(ph["gm_atlas"], tmp / "gm_atlas.nii")
        lm.write_mask(brain, tmp / "brain.nii")
        lm.write_mask(lesion, tmp / "lesion.nii")
        assert lm.read_mask(tmp / "lesion.nii") == lesion
        config = {
            "inputs": {
                "flair": str(tmp / "flair.nii"),
                "t1": str(tmp / "t1.nii"),
                "brain_mask": str(tmp / "brain.nii"),
                "wm_atlas": str(tmp / "wm_atlas.nii"),
                "gm_atlas": str(tmp / "gm_atlas.nii"),
                "lesion_gt": [str(tmp / "lesion.nii")],
            },
            "out_dir": str(tmp / "out"),
        }
        (tmp / "config.json").write_text(json.dumps(config))
        stages, report = lm.run_pipeline(tmp / "config.json")
        assert set(stages.values()) == {"ran"}
        stages, _ = lm.run_pipeline(tmp / "config.json")
        assert set(stages.values()) == {"reused"}
        masks = json.loads(report)["metrics"]["masks"]
        print("pipeline:", ", ".join(f"{m['mask']} DSC {m['dsc']}" for m in masks))

    try:
        lm.read_volume("/nonexistent.nii")
    except OSError:
        pass
    else:
        raise AssertionError("reading a missing file should fail")

    print("smoke test passed")


if __name__ == "__main__":
    main()
