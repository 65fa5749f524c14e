"""Smoke test for the mtdgrid_py extension.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/mtdgrid_py-*.whl
"""

import math
import pathlib
import tempfile

import mtdgrid_py as m

ROOT = pathlib.Path(__file__).resolve().parent.parent


def main():
    grid = m.Grid.load("ieee14")
    assert (grid.bus_count, grid.branch_count, grid.measurement_count) == (14, 20, 54)
    h = grid.jacobian()
    assert len(h) == 54 and len(h[0]) == 13

    system = m.System(grid, calibration_samples=2000, seed=1)
    z = system.sample_clean(seed=3)
    assert not system.bdd_alarm(z)
    assert len(system.estimate(z)) == 13

    rows, labels = system.dataset(0.05, 400, 400, seed=2)
    detector, accuracy = m.Detector.train(rows, labels, epochs=10, seed=4)
    assert accuracy > 0.8, accuracy
    with tempfile.TemporaryDirectory() as d:
        path = f"{d}/base.model"
        detector.save(path)
        again = m.Detector.load(path)
        assert again.predict_batch(rows[:50]) == detector.predict_batch(rows[:50])

    adv = None
    for index in range(20):
        adv = system.attack(detector, 0.05, seed=5, index=index)
        if adv is not None and adv["success"]:
            break
    assert adv is not None and adv["success"]
    assert detector.predict(adv["z_adv"]) == 0

    angles = m.principal_angles(h, grid.jacobian([x * 1.2 for x in grid.reactances]))
    assert all(0.0 <= a <= math.pi / 2 + 1e-12 for a in angles)

    x_star = grid.cost_optimal_reactances(starts=5)
    p = grid.optimize_perturbation(x_star, 0.1, starts=5)
    assert p["spa"] >= 0.1 - 1e-9 and p["relative_increase"] >= -1e-9
    shifted = system.with_reactances(p["reactances"], seed=6)
    assert shifted.threshold > 0

    files = dict(m.run_experiment("cai-vs-nu", (ROOT / "configs" / "tiny.toml").read_text()))
    assert files["cai_vs_nu.csv"].startswith("nu,replicate,seed")
    print("mtdgrid_py smoke test passed")


if __name__ == "__main__":
    main()
