# %% [markdown]
# # Expression intensity and the 4253H-twice smoother
#
# A per-frame intensity profile is noisy. The 4253H-twice smoother (running
# medians of 4, 2, 5 and 3, a Hanning pass, then the same on the residuals)
# removes isolated spikes while keeping straight lines and constants intact.

# %%
import numpy as np

from smileage import SyntheticSpec, generate_synthetic, smooth_4253h_twice
from smileage.data import smooth_intensity_profile

x = np.full(15, 2.0)
x[7] = 12.0
print("spike   ", np.round(smooth_4253h_twice(x), 3))
print("ramp    ", np.round(smooth_4253h_twice(np.arange(10.0)), 3))

# %% [markdown]
# On a synthetic smile the smoothed darkening of the planted regions rises
# towards the apex frame and relaxes after it.

# %%
data = generate_synthetic(SyntheticSpec(n_subjects=3, frames=(12, 14), seed=1))
mask = data.region_mask()
for v in data:
    profile = smooth_intensity_profile(v, mask)
    print(f"apex {v.apex:2d}  profile", np.round(profile - profile[0], 3))
