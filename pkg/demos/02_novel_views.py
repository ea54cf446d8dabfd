# Render the synthetic city, then the two kinds of novel training views:
# INV (interpolated along a greedy tour of the training cameras) and
# QANV (the clean scene seen from each query's estimated pose).
# Run: python3 demos/02_novel_views.py [out_dir]

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from scenead.data import load_dataset
from scenead.fixture import make_fixture
from scenead.render import GroundTruthLocalizer
from scenead.synthesis import build_inv_augmentation, build_qanv_augmentation, renderer_from_manifest

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_views")
root = out / "scene"

stats = make_fixture(root, seed=7, n_train_poses=12, n_query_poses=6, image_size=128)
print("mask fractions:", stats)

ds = load_dataset(root)
renderer = renderer_from_manifest(root)
print(len(ds.train_images), "captured training views,", len(ds.test_images), "queries")

# 12 poses between every consecutive pair of the tour
inv, inv_poses = build_inv_augmentation(ds, renderer, k=12)
print("INV views:", len(inv), "= 12 x", len(ds.captured_train) - 1)

# ground-truth localization here; swap in NoisyLocalizer or ExternalLocalizer for real captures
qanv, _ = build_qanv_augmentation(ds, renderer, GroundTruthLocalizer(ds.poses))
print("QANV views:", len(qanv))


def u8(im):
    return (np.clip(im.data.transpose(1, 2, 0), 0, 1) * 255 + 0.5).astype(np.uint8)


# query | clean re-render | anomaly mask, one row per query
rows = []
for ref, rend in zip(ds.test_images, qanv):
    mask = ds.mask_for(ref)[..., None].repeat(3, -1) * 255
    rows.append(np.concatenate([u8(ds.load(ref)), u8(rend), mask.astype(np.uint8)], axis=1))
Image.fromarray(np.concatenate(rows, axis=0)).save(out / "qanv_pairs.png")

# the first 12 INV frames as a strip
Image.fromarray(np.concatenate([u8(im) for im in inv[:12]], axis=1)).save(out / "inv_strip.png")
print("wrote", out / "qanv_pairs.png", "and", out / "inv_strip.png")
