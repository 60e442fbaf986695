"""Smoke test for the sgnet_py extension module.

Build and install first:
    pip install --no-build-isolation -e crates/py
"""

import json
import math
import os
import tempfile

import sgnet_py as sg


def main():
    assert sg.box_loss(1.0) == 0.0
    assert abs(sg.box_loss(0.0) - math.log(2)) < 1e-12
    assert abs(sg.giou([0, 0, 10, 10], [20, 0, 30, 10]) + 1 / 3) < 1e-12
    assert sg.centerness_target(2, 2, 2, 2) == 1.0

    r1, r2, cells = sg.divide_box([0, 0, 300, 120])
    assert (r1, r2) == (6, 3) and len(cells) == 18

    bits = [(i * 7) % 3 == 0 for i in range(12)]
    counts = sg.rle_encode(3, 4, bits)
    assert sum(counts) == 12
    assert sg.rle_decode(3, 4, counts) == bits

    v = sg.generate_video(0, frames=4)
    assert len(v["frames"]) == 4
    assert len(v["frames"][0]) == v["height"] * v["width"] * 3

    tr = sg.Tracker()
    assert tr.associate(0, [(0, 0.9, [10, 10], [0, 0, 20, 20])], [[0, 0]]) == [0]
    assert tr.associate(1, [(0, 0.9, [13, 14], [3, 4, 23, 24])], [[3, 4]]) == [0]

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        assert sg.run_cli(["gen-data", "--out", data, "--videos", "1", "--frames", "3"]) == 0
        model = sg.Model.untrained()
        assert model.num_parameters() > 0
        preds = json.loads(model.infer(data))
        assert preds["schema_version"] == 1
        path = os.path.join(tmp, "preds.json")
        with open(path, "w") as f:
            json.dump(preds, f)
        metrics = sg.evaluate(path, data)
        assert set(metrics) == {"AP", "AP50", "AP75", "AR1", "AR10"}

    print("python smoke test passed")


if __name__ == "__main__":
    main()
