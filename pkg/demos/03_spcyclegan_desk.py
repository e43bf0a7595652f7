"""Desk-scale SpCycleGAN: learn label -> microscopy with the spatial network H, then synthesize a volume.

Small networks on 16^3 crops; about a minute on a laptop CPU.
Run: python demos/03_spcyclegan_desk.py
"""

from pathlib import Path

import numpy as np

from volseg3d.gantrain import GanTrainConfig, generate_synthetic, train_spcyclegan
from volseg3d.networks import DiscriminatorConfig, GeneratorConfig
from volseg3d.synthgen import SynthConfig, binarize, generate_binary_volume, render_fluorescence
from volseg3d.volio import write_volume

out = Path("demo_out/gan")

label = binarize(generate_binary_volume(SynthConfig(volume_dims=(32, 32, 32), count_range=(4, 8), axis_range=(3, 6), seed=1)))
# "real" microscopy: rendered from an unrelated label volume, so the two sides are unpaired
unrelated = binarize(generate_binary_volume(SynthConfig(volume_dims=(32, 32, 32), count_range=(4, 8), axis_range=(3, 6), seed=2)))
real = render_fluorescence(unrelated, np.random.default_rng(5))

cfg = GanTrainConfig(
    iterations=100,
    crop_size=(16, 16, 16),
    generator=GeneratorConfig(base_channels=4, n_res=2),
    discriminator=DiscriminatorConfig(base_channels=4),
    checkpoint_every=50,
)
res = train_spcyclegan(cfg, [label], [real], out)
for r in res.log.records[::20] + res.log.records[-1:]:
    print(
        f"iter {r['iteration']:3d}  total {r['total']:7.3f}  cyc {r['L_cyc']:.3f}  "
        f"spatial {r['L_spatial']:.3f}  D1 {r['D1']:.3f}  D2 {r['D2']:.3f}"
    )

syn = generate_synthetic(res.models.G, label)
write_volume(out / "syn", syn, tag="syn")
print("synthetic volume:", syn.shape, syn.dtype, "mean inside nuclei", syn[label > 0].mean(), "outside", syn[label == 0].mean())
