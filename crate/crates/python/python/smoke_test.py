"""Smoke test for the odseg extension module."""

import math
import tempfile
from pathlib import Path

import odseg


def main():
    # layer ops
    x = odseg.Tensor([1, 4, 4, 1], [float(i) for i in range(16)])
    pooled = odseg.maxpool2(x)
    assert pooled.shape == [1, 2, 2, 1]
    assert pooled.tolist() == [5.0, 7.0, 13.0, 15.0]
    assert odseg.upsample2(pooled).shape == [1, 4, 4, 1]
    ident = odseg.Tensor([1, 1, 1, 1], [1.0])
    assert odseg.conv2d(x, ident, odseg.Tensor([1], [0.0])) == x
    assert odseg.concat_channels(x, x).shape == [1, 4, 4, 2]
    assert odseg.relu(odseg.Tensor([2], [-1.0, 2.0])).tolist() == [0.0, 2.0]
    assert abs(odseg.sigmoid(odseg.Tensor([1], [0.0])).tolist()[0] - 0.5) < 1e-7

    # losses against hand-computed values
    y = odseg.Tensor([1, 1, 2, 1], [1.0, 0.0])
    p = odseg.Tensor([1, 1, 2, 1], [0.8, 0.3])
    bce = -(math.log(0.8) + math.log(0.7)) / 2
    assert abs(odseg.bce_loss(y, p) - bce) < 1e-6
    assert abs(odseg.jaccard_loss(y, p) - (1 - 0.8 / (1 + 0.3))) < 1e-6
    assert abs(odseg.combined_loss(y, p) - odseg.bce_loss(y, p) - odseg.jaccard_loss(y, p)) < 1e-9
    try:
        odseg.jaccard_loss(odseg.Tensor([1, 1, 2, 1], [0.0, 0.0]), p)
        raise AssertionError("empty labels accepted")
    except ValueError:
        pass

    # metrics
    m = odseg.compute_metrics(odseg.binarize(p), y)
    assert (m["tp"], m["fp"], m["tn"], m["fn"]) == (1, 0, 1, 0)
    assert m["dice"] == 1.0

    # model, training and weights
    pairs = odseg.generate_synthetic(6, 32, 3)
    model = odseg.Model(32, 32, width_multiplier=0.0625, seed=1)
    report = model.parameter_report()
    assert report["total"] == model.parameter_count()
    trained, history = odseg.fit(model, pairs[:5], pairs[5:], max_epochs=3, learning_rate=1e-3)
    assert len(history) == 3 and all(math.isfinite(r["val_loss"]) for r in history)
    batch = pairs[0][0].reshape([1, 32, 32, 3])
    probs = trained.predict(batch).tolist()
    assert all(0.0 < v < 1.0 for v in probs)
    with tempfile.TemporaryDirectory() as tmp:
        path = str(Path(tmp) / "w.odsw")
        trained.save_weights(path)
        fresh = odseg.Model(32, 32, width_multiplier=0.0625, seed=9)
        assert fresh != trained
        fresh.load_weights(path)
        assert fresh == trained
    print(f"odseg {odseg.__version__} smoke test passed")


if __name__ == "__main__":
    main()
