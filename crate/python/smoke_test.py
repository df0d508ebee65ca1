"""Smoke test for the padforge Python bindings.

Build and install first:  pip install --no-build-isolation -e crates/python
"""

import math
import tempfile
from pathlib import Path

import numpy as np

import padforge


def check_cost_model():
    assert padforge.flop_cost(3, 32, 64, 56) == 57_802_752
    assert padforge.flop_cost(3, 32, 64, 56, "depthwise_separable") == 7_325_696
    assert abs(padforge.speedup_ratio(3, 8, 64, 7) - 576 / 73) < 1e-12


def check_metrics():
    scores = [2.0, 0.5, -0.1, -1.5, 0.3, -0.7]
    truth = ["live", "live", "live", "spoof", "spoof", "spoof"]
    m = padforge.compute_metrics(scores, truth)
    assert math.isclose(m["bpcer"], 100 / 3) and math.isclose(m["apcer"], 100 / 3)
    assert math.isclose(m["ace"], (m["apcer"] + m["bpcer"]) / 2)
    assert math.isclose(padforge.metrics_from_rates(0.05, 0.35)["ace"], 0.20)
    curve = padforge.det_curve(scores, truth, 11)
    assert all(b[1] <= a[1] and b[2] >= a[2] for a, b in zip(curve, curve[1:]))
    assert padforge.bpcer_at_apcer(scores, truth, 40.0) is not None
    assert padforge.normalize_scores([3.0, 1.0, 2.0]) == [1.0, 0.0, 0.5]
    assert padforge.classify(0.0) == "spoof" and padforge.classify(1e-9) == "live"
    loss, grad = padforge.hinge_loss([0.5, -2.0], [1.0, 1.0], 2.0)
    assert math.isclose(loss, 2 * (0.5 + 3.0)) and grad == [-2.0, -2.0]


def check_errors():
    for call, exc in [
        (lambda: padforge.compute_metrics([1.0], ["live"]), ValueError),
        (lambda: padforge.classify(float("nan")), ArithmeticError),
        (lambda: padforge.Model.load("/nonexistent/checkpoint.bin"), OSError),
        (lambda: padforge.Model({"input_size": 50}), ValueError),
    ]:
        try:
            call()
        except exc:
            pass
        else:
            raise AssertionError(f"expected {exc.__name__}")


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        corpus = {"n_live": 12, "n_spoof_per_material": 4, "image_size": 32}
        n = padforge.generate_corpus(root / "data", corpus, seed=3)
        assert n == 2 * (12 + 3 * 4)
        image = padforge.read_image(root / "data" / "images" / "biometrika-live-00000.pgm")
        assert len(image) == 32 and all(0.0 <= v <= 1.0 for row in image for v in row)

        cfg = {"input_size": 32, "width_multiplier": 0.0625, "block_repeats": [1, 1, 1, 1, 1], "hidden_width": 32}
        model = padforge.Model(cfg, seed=1)
        trained, log = padforge.train(
            model, root / "data", split={"protocol": "intra_sensor_known", "train_sensors": ["italdata"]},
            train={"epochs": 2, "batch_size": 8, "learning_rate": 1e-3}, seed=4,
        )
        assert [r["epoch"] for r in log] == [1, 2] and all(r["mean_loss"] >= 0 for r in log)

        batch = np.random.default_rng(0).random((3, 32, 32))
        scores = trained.score(batch)
        assert len(scores) == 3 and all(math.isfinite(s) for s in scores)
        trained.save(root / "model.bin")
        assert padforge.Model.load(root / "model.bin").score(batch) == scores
        assert trained.predict(batch) == ["live" if s > 0 else "spoof" for s in scores]
        assert model.score(batch) != scores


def check_gradients():
    report = padforge.gradcheck(seed=0)
    assert {r["layer"] for r in report} >= {"standard_conv", "end_to_end"}
    assert all(r["passed"] for r in report), report


def main():
    assert padforge.Model("tiny").input_size == 64
    check_cost_model()
    check_metrics()
    check_errors()
    check_pipeline()
    check_gradients()
    print("padforge python smoke test passed")


if __name__ == "__main__":
    main()
