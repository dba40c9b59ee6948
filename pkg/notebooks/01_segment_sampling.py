# %% [markdown]
# # Dynamic segment sampling and segment attention
#
# A short proposal gets a sampling weight gamma / duration, every other
# snippet weight 1. Inverse-transform sampling of T positions from the
# cumulative weight then spends more of the fixed snippet budget inside the
# short action.

# %%
import numpy as np

from asmloc import autodiff as ad
from asmloc.optim import ParameterStore
from asmloc.segment import (attention_mask, build_sampling_plan, init_attention_block,
                            intra_segment_attention, resample_features)

np.set_printoptions(precision=3, suppress=True)

# %%
T = 6
plan = build_sampling_plan([(2, 5, 1)], T, gamma=6.0)
print("weights      ", plan.weights)
print("cumulative   ", plan.knots[1:])
print("positions    ", plan.positions)
print("proposal now ", plan.proposals)

# %% [markdown]
# Four of the six samples fall inside [2, 5). Features are linearly
# interpolated at those positions; a ramp shows the local stretching.

# %%
ramp = np.arange(T, dtype=float)[:, None]
print(resample_features(ad.Tensor(ramp), plan).data.ravel())

# %% [markdown]
# In a long video the same short proposal is stretched to about gamma
# snippets, because the extra weight is small next to T.

# %%
for d in (1, 2, 3, 5, 8):
    p = build_sampling_plan([(50, 50 + d, 1)], 300, gamma=6.0)
    s, e, _ = p.proposals[0]
    print(f"duration {d} -> {e - s}")

# %% [markdown]
# ## Masked intra-segment attention
# Each snippet only attends inside its own proposal; rows outside every
# proposal get no attention at all.

# %%
rng = np.random.default_rng(0)
params = ParameterStore()
init_attention_block(params, "intra", 8, rng, with_bn=True, identity=False)
X = ad.Tensor(rng.standard_normal((8, 8)))
M = attention_mask([(0, 3, 1), (5, 8, 2)], 8)
Z, attn = intra_segment_attention(X, M, params, "intra", H=2, return_attention=True)
print(attn.data[0])
print("row sums", attn.data[0].sum(axis=1))
