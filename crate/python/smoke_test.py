"""Smoke test for the dbag_py extension module.

Build and install it first, e.g.

    pip install maturin
    cd crates/py && maturin develop --release

then run `python python/smoke_test.py [artifact_dir]`. With an artifact dir
holding `model.ckpt` and `reference.emb` (as written by `dbag evaluate`), the
trained model is also exercised.
"""

import math
import sys
from pathlib import Path

import dbag_py as d


def main() -> None:
    # geometry: 478 landmarks on a line, distances are translation invariant
    lm = [[i * 0.001, 0.0, 0.0] for i in range(478)]
    g = d.geometric_features(lm)
    shifted = d.geometric_features([[x + 3.0, y - 1.0, z] for x, y, z in lm])
    assert len(g) == 36 and all(abs(a - b) < 1e-4 for a, b in zip(g, shifted))

    assert d.triplet_loss([0.0, 0.0], [1.0, 0.0], [0.0, 3.0], 1.0) == 0.0
    assert math.isclose(d.triplet_loss([0.0], [2.0], [1.0], 1.0), 2.0)

    labels = ["real", "real", "fake", "fake"]
    assert d.auc([0.1, 0.2, 0.8, 0.9], labels) == 100.0
    assert d.eer([0.5] * 4, labels) == 50.0
    assert d.accuracy([0.1, 0.6, 0.8, 0.4], labels, 0.5) == 50.0
    assert d.segment_ranges(10) == ((0, 2), (8, 10))

    label, score, neighbors = d.knn_predict([0.5], [[0.0], [1.0], [10.0]], ["real", "real", "fake"], 3)
    assert label == "real" and math.isclose(score, 1 / 3) and neighbors == [0, 1, 2]

    videos = d.synthetic_videos(2, 130, 7)
    assert [v[1] for v in videos] == ["real", "fake"]
    assert len(videos[0][2]) == 130 and len(videos[0][2][0]) == d.FRAME_DIM

    if len(sys.argv) > 1:
        root = Path(sys.argv[1])
        ckpt = d.Checkpoint.load(str(root / "model.ckpt"))
        ref = d.ReferenceSet.load(str(root / "reference.emb"))
        emb = ckpt.embed([videos[0][2][:120]])
        assert len(emb) == 1 and len(emb[0]) == ckpt.embedding_dim
        verdict = ckpt.predict_video(ref, videos[1][2], 5, 0.5)
        print("prediction for a synthetic fake:", verdict)

    print("smoke test passed")


if __name__ == "__main__":
    main()
