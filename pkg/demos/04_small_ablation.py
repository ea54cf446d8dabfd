# A miniature method x augmentation grid on the synthetic city, then the
# same tables the CLI "report" command prints.  Minutes on a laptop CPU;
# raise EPOCHS / image size for numbers worth reading.
# Run: python3 demos/04_small_ablation.py [out_dir]

import sys
from pathlib import Path

from scenead.fixture import make_fixture
from scenead.report import build_report, render_markdown
from scenead.training import ablation_grid

EPOCHS = 3
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_grid")

make_fixture(out / "scene", seed=7, n_train_poses=16, n_query_poses=8, image_size=64)

# missing INV / QANV folders are rendered on the fly
grid = ablation_grid(out / "scene", out / "runs", scale="tiny",
                     model_overrides={"input_size": [64, 64]},
                     train_overrides={"max_epochs": EPOCHS, "batch_size": 8},
                     methods=["OmniAD", "RD"], variants=["none", "qanv", "both"])

for method, row in grid["cells"].items():
    print(method, {v: round(c.get("pixel_f1", float("nan")), 4) for v, c in row.items()})

print(render_markdown(build_report([grid], ["synthetic"])))
