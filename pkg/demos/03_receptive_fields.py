# Effective receptive fields of the student decoder with and without the
# attention modules, measured by back-propagating from one output location.
# Run: python3 demos/03_receptive_fields.py [out_dir]

import sys
from pathlib import Path

import numpy as np
import torch

from scenead.erf import compare_erf, compute_erf, random_locations, save_erf_heatmap
from scenead.model import ModelConfig, build_model

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_erf")
torch.manual_seed(0)
rng = np.random.default_rng(0)

model = build_model(ModelConfig(backbone="tiny_random", use_attention_modules=True,
                                input_size=(128, 128))).double()
plain = model.without_attention()  # same weights, attention skipped

# freshly built modules are gated shut, so both ERFs coincide
img = rng.random((3, 128, 128))
a = compute_erf(model, img, (16, 16), level=0)
b = compute_erf(plain, img, (16, 16), level=0)
print("closed gates, areas:", a.area, b.area)

# open the gates
model.set_gates(0.5)
images = [rng.random((3, 128, 128)) for _ in range(4)]
for level, grid in enumerate((32, 16, 8)):
    res = compare_erf(model, plain, images, random_locations((grid, grid), 16, rng), level)
    print(f"level {level}: area with {res['area_with']:.0f}, without {res['area_without']:.0f}, "
          f"ratio {res['ratio']:.3f}, pairs that shrank {len(res['violations'])}")

for level, loc in enumerate([(16, 16), (8, 8), (4, 4)]):
    save_erf_heatmap(out / f"level{level}_attention.png", compute_erf(model, images[0], loc, level))
    save_erf_heatmap(out / f"level{level}_plain.png", compute_erf(plain, images[0], loc, level))
print("heatmaps in", out)
