"""Synthetic binary nuclei volumes and a stand-in fluorescence rendering.

Writes label/microscopy volumes and a few PNG slices to ./demo_out/synth.
Run: python demos/02_synthetic_nuclei.py
"""

from pathlib import Path

import numpy as np

from volseg3d.postproc import connected_components_3d, overlay, write_overlay_slices
from volseg3d.synthgen import SynthConfig, binarize, generate_nuclei, profile_config, render_fluorescence
from volseg3d.volio import write_image_stack, write_volume

out = Path("demo_out/synth")
out.mkdir(parents=True, exist_ok=True)

# The two size profiles differ only in the semi-axis range.
for name in ("data1", "data2"):
    cfg = profile_config(name, volume_dims=(64, 64, 64), count_range=(10, 20), seed=7)
    labels, specs = generate_nuclei(cfg, np.random.default_rng(cfg.seed))
    fraction = binarize(labels).mean()
    print(f"{name}: {len(specs)} nuclei, axes {cfg.axis_range}, foreground {fraction:.1%}")

cfg = SynthConfig(volume_dims=(64, 64, 64), count_range=(10, 20), axis_range=(4, 10), seed=7)
labels, specs = generate_nuclei(cfg, np.random.default_rng(cfg.seed))
binary = binarize(labels)
micro = render_fluorescence(binary, np.random.default_rng(1))

# Placement never overlaps voxels, but touching nuclei merge once the labels are binarized.
print("distinct labels:", len(np.unique(labels)) - 1, "connected components:", connected_components_3d(binary).max())

write_volume(out / "label", binary, tag="label")
write_volume(out / "orig", micro, tag="orig")
write_image_stack(out / "orig_slices", micro)
write_overlay_slices(out / "overlay", overlay(micro, labels.astype(np.uint32), alpha=0.4))
print("wrote", sorted(p.name for p in out.iterdir()))
