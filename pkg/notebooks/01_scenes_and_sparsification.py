# %% [markdown]
# # Synthetic street scenes and LiDAR-like sparsification
#
# Renders one procedural scene, samples it with the scan pattern and runs the
# preprocessing chain that feeds the depth network. Writes PPM/PGM previews
# to ``notebooks_out/01``.

# %%
from pathlib import Path

import numpy as np

from depthlab.dataset_io import write_depth, write_image
from depthlab.evaluation import colorize_depth
from depthlab.preprocess import outlier_filter, spp_densify
from depthlab.synth import CLASS_NAMES, SparsifyConfig, random_scene, render, scan_pattern_lidar_like, sparsify

out = Path("notebooks_out/01")
out.mkdir(parents=True, exist_ok=True)

# %%
scene = random_scene(seed=4)
image, depth, seg = render(scene, pose_index=1)
print("image", image.shape, image.dtype, "depth range", depth.min(), depth.max())
for c, name in enumerate(CLASS_NAMES):
    print(f"{name:9s} {np.mean(seg.labels == c):6.1%}")

# %% [markdown]
# Sky pixels carry the maximum range. The scanner never returns from them.

# %%
cfg = SparsifyConfig()
h, w = depth.shape
pattern = scan_pattern_lidar_like(h, w, cfg.num_lines, cfg.horizontal_step, seed=0)
sparse = sparsify(depth, pattern, cfg.dropout, cfg.noise_sigma_m, rng_seed=0, max_range=scene.max_range)
rows = np.nonzero(sparse.any(axis=1))[0]
print(f"density {np.mean(sparse > 0):.2%}, first row with returns {rows.min()} of {h}")

# %% [markdown]
# Injected outliers (returns from behind a closer surface) are what the
# filter is for. Count how many survive.

# %%
noisy, outliers = sparsify(depth, pattern, 0.0, 0.0, rng_seed=1, outlier_fraction=0.05,
                           max_range=scene.max_range, return_outliers=True)
filtered = outlier_filter(noisy)
kept = np.count_nonzero(filtered[outliers] > 0)
print(f"outliers injected {outliers.sum()}, kept after filtering {kept}")

# %%
stack = spp_densify(filtered)
dense = stack.as_array()
for level, layer in enumerate(dense):
    print(f"pyramid level {level}: coverage {np.mean(layer > 0):.1%}")

# %%
write_image(out / "image.ppm", image)
write_image(out / "depth_colour.ppm", colorize_depth(depth))
write_image(out / "sparse_colour.ppm", colorize_depth(sparse))
write_depth(out / "sparse.pgm", sparse)
print("wrote", sorted(p.name for p in out.iterdir()))
