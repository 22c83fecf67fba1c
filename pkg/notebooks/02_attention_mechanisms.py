# %% [markdown]
# # Four ways to gate a feature map
#
# The spatial gate scores every cell of a convolutional feature map with a
# tiny two-layer network and multiplies the cell by that score. The four
# mechanisms differ in which of the two layers is shared across cells.
# Sharing both makes the gate blind to position: shuffle the cells and the
# scores shuffle with them. Any per-cell layer breaks that symmetry.

# %%
from smileage import MECHANISMS, ModelParams, SyntheticSpec, generate_synthetic, toy_config
from smileage.attention import spatial_param_count
from smileage.evaluation import permutation_equivariant
from smileage.network import attention_input

video = generate_synthetic(SyntheticSpec(n_subjects=1, seed=3))[0]

# %%
for mechanism in MECHANISMS:
    config = toy_config(mechanism=mechanism)
    M, N, C = config.attention_grid()
    params = ModelParams.init(config, seed=0)
    fmap = attention_input(video.frames, params)[video.apex]
    print(f"{mechanism:28s} params {spatial_param_count(mechanism, (M, N), C, config.attn_hidden):5d}"
          f"  permutation-equivariant: {permutation_equivariant(params, fmap)}")

# %% [markdown]
# Moving the gate deeper shrinks the grid and widens each cell's receptive field.

# %%
for layer in (1, 2, 3):
    print("after conv", layer, "grid", toy_config(attn_layer=layer).attention_grid())
