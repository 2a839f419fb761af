# %% [markdown]
# # Reprojection at true depth and pose
#
# The renderer knows exact depth and camera motion, so warping the
# neighbouring frames into the centre frame should reproduce it up to
# occlusions and resampling. This is the zero case for the photometric loss.

# %%
import numpy as np

from depthlab.geometry import Pose, inverse_warp
from depthlab.losses import LossBatch, photometric_loss
from depthlab.synth import random_scene, scene_samples
from depthlab.tensor import default_dtype

# %%
scene = random_scene(seed=11)
record = scene_samples(scene, seed=0, centre_only=True)[0]
batch = LossBatch.from_records([record], np.float64)
depth = record.gt_full[None, None].astype(np.float64)
print("pose to previous", record.extras["pose_prev"])
print("pose to next", record.extras["pose_next"])

# %%
with default_dtype(np.float64):
    loss = photometric_loss(batch.image, batch.prev_image, batch.next_image, depth, record.intrinsics,
                            record.extras["pose_prev"], record.extras["pose_next"])
    wrong = photometric_loss(batch.image, batch.prev_image, batch.next_image, 2 * depth, record.intrinsics,
                             record.extras["pose_prev"], record.extras["pose_next"])
print(f"photometric loss at true depth {float(loss.data):.4f}, at twice the depth {float(wrong.data):.4f}")

# %% [markdown]
# Where is the residual? Warp the next frame and look at the absolute error
# by distance to the nearest depth edge.

# %%
with default_dtype(np.float64):
    warped, mask = inverse_warp(batch.next_image, depth, record.intrinsics, record.extras["pose_next"])
err = np.abs(warped.data - batch.image).mean(axis=1)[0]
valid = mask[0, 0].astype(bool)
d = record.gt_full
edge = np.zeros_like(valid)
edge[:, 1:] |= np.abs(np.diff(np.log(d), axis=1)) > 0.1
edge[1:, :] |= np.abs(np.diff(np.log(d), axis=0)) > 0.1
near = np.zeros_like(edge)
for dy in range(-2, 3):
    for dx in range(-2, 3):
        near |= np.roll(np.roll(edge, dy, 0), dx, 1)
print(f"valid pixels {valid.mean():.1%}")
print(f"mean error near depth edges {err[valid & near].mean():.4f}, elsewhere {err[valid & ~near].mean():.4f}")

# %%
with default_dtype(np.float64):
    same, m = inverse_warp(batch.image, depth, record.intrinsics, Pose.identity())
print("identity warp max error", np.abs(same.data - batch.image)[m.astype(bool).repeat(3, 1)].max())
