"""Smoke test for the lad_drive extension module.

Build first with `cargo build -p lad-py` (or `maturin develop` inside
crates/py). When the module is not installed, the freshly built shared
library under target/ is imported directly.
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def import_lad_drive(tmp):
    try:
        import lad_drive
        return lad_drive
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("liblad_drive.so", "liblad_drive.dylib", "lad_drive.dll"):
            built = ROOT / "target" / profile / name
            if built.exists():
                suffix = ".pyd" if name.endswith(".dll") else ".so"
                shutil.copy(built, Path(tmp) / ("lad_drive" + suffix))
                sys.path.insert(0, tmp)
                import lad_drive
                return lad_drive
    sys.exit("lad_drive not built; run `cargo build -p lad-py` first")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        lad = import_lad_drive(tmp)
        print("lad_drive", lad.version())

        assert abs(lad.driving_score(50.0, 0.5) - 25.0) < 1e-12
        assert abs(lad.infraction_score(["CV", "CV"]) - 0.36) < 1e-12
        assert 0.0 < lad.alpha_bar(50) < lad.alpha_bar(1) <= 1.0
        straight = [[2.0 * i, 0.0] for i in range(1, 6)]
        shifted = [[x, y + 1.0] for x, y in straight]
        assert abs(lad.ade(straight, shifted) - 1.0) < 1e-12

        frames = lad.expert_waypoints(3, "fork")
        assert frames and all(len(f) == 5 for f in frames)

        config = json.loads(lad.default_config())
        config["kinds"] = ["straight", "fork"]
        config["train_seeds"]["count"] = 2
        config["eval_seeds"]["count"] = 1
        config["runs"] = 1
        config["train"]["model"]["decoder"]["d"] = 32
        config["train"]["model"]["decoder"]["n_anchors"] = 8
        config["train"]["plan"]["stage1_epochs"] = 1
        config["train"]["plan"]["stage2_epochs"] = 1
        text = json.dumps(config)

        data = Path(tmp) / "data"
        scenarios, records = lad.gen_data(str(data), text)
        assert scenarios == 4 and records > 0
        try:
            lad.gen_data(str(data), text)
            raise AssertionError("overwrite was not refused")
        except FileExistsError:
            pass

        anchors = lad.cluster(str(data), str(Path(tmp) / "anchors"), text)
        assert len(anchors) == 8
        anchor_file = str(Path(tmp) / "anchors" / "anchors.json")

        losses = lad.train(str(data), anchor_file, str(Path(tmp) / "model"), text)
        assert losses and all(math.isfinite(v) for v in losses)

        report = json.loads(
            lad.evaluate(str(Path(tmp) / "model" / "checkpoint.json"), anchor_file, str(Path(tmp) / "eval"), text)
        )
        assert len(report["runs"]) == 1
        mean = report["mean"]
        assert mean["episodes"] == 2 and 0.0 <= mean["ds"] <= 100.0

        rollout = Path(tmp) / "eval" / "rollouts" / "run1" / "fork-1000.jsonl"
        plot = lad.replay(str(rollout), str(Path(tmp) / "plots"))
        again = lad.replay(str(plot), str(Path(tmp) / "plots2"))
        assert Path(plot).read_text() == Path(again).read_text()

        try:
            lad.expert_waypoints(1, "hovercraft")
            raise AssertionError("unknown kind accepted")
        except ValueError:
            pass
        print("ok: mean DS %.2f over %d episodes" % (mean["ds"], mean["episodes"]))


if __name__ == "__main__":
    main()
