"""
One set of weights for any band count
=====================================

The first and last convolutions keep a single weight tensor sized for the
largest supported band count. A cube with ``C`` bands uses only the first
``C`` channel slabs. Zero-padding the input therefore changes nothing, and
output slabs past ``C`` never receive a gradient.
"""

# %%
import numpy as np

from mkfusion import FusionModel, MKInputLayer, ModelConfig, Tape, Tensor, fuse, mk_input_forward
from mkfusion.tensor import mean

rng = np.random.default_rng(0)
layer = MKInputLayer(d=4, c_max=10, rng=rng)
x = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
padded = np.concatenate([x, np.zeros((1, 7, 6, 6), np.float32)], axis=1)
same = np.array_equal(mk_input_forward(layer, Tensor(x)).data, mk_input_forward(layer, Tensor(padded)).data)
print("3-band input equals its zero-padded 10-band version:", same)

# %%
# A full model accepts 3, 8 and 20 bands without any change.
model = FusionModel(ModelConfig(d_feat=8, c_max=24, hidden=16, hidden_layers=2), rng=rng)
for C in (3, 8, 20):
    y = rng.uniform(0, 1, (1, C, 8, 8)).astype(np.float32)
    z = rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32)
    print(f"C={C:2d} -> fused {fuse(model, y, z).shape}")

# %%
# Gradient footprint of a 5-band step: the input layer sees 5 + 3 = 8
# channels (the upsampled cube next to the MSI), the output layer writes 5.
y = rng.uniform(0, 1, (1, 5, 8, 8)).astype(np.float32)
z = rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32)
model.zero_grad()
with Tape() as tape:
    out = fuse(model, y, z)
    tape.backward(mean(out * out))
g_in = np.abs(model.mk_in.w_nested.grad).sum(axis=(0, 2, 3))
g_out = np.abs(model.mk_out.w_nested.grad).sum(axis=(1, 2, 3))
print("input slabs with gradient: ", np.flatnonzero(g_in).tolist())
print("output slabs with gradient:", np.flatnonzero(g_out).tolist())
