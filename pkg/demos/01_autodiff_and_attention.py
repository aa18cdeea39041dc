"""A tour of the tensor/autodiff layer and the attention units.

Run from the repository root:  python demos/01_autodiff_and_attention.py
"""
import numpy as np

from cirnet import nn_ops
from cirnet import tensor as T
from cirnet.attention import ChannelAttention, SmarUnit, SpatialAttention, combine_3d
from cirnet.autodiff import backward, grad_check
from cirnet.tensor import Tensor

rng = np.random.default_rng(0)

# %% gradients of a tiny expression
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
y = T.tensor_sum(nn_ops.sigmoid(T.matmul(x, w)))
backward(y)
print("d y / d w:\n", w.grad)

# compare against central differences
rep = grad_check(lambda: T.tensor_sum(nn_ops.sigmoid(T.matmul(x, w))), [x, w])
print("max relative error", rep.max_rel_err, "passed", rep.passed)

# %% attention maps on a random feature tensor
feat = Tensor(rng.normal(size=(1, 8, 6, 6)))
sa, ca = SpatialAttention(rng=rng), ChannelAttention(8, rng=rng)
a_sp, a_ch = sa(feat), ca(feat)
a3 = combine_3d(a_ch, a_sp)
print("spatial map", a_sp.shape, "channel map", a_ch.shape, "3-D map", a3.shape)

# every channel slice of the 3-D map is the spatial map scaled by one channel weight
ratio = a3.data[0] / a_sp.data[0]
print("per-channel scale (should equal the channel weights):")
print(np.round(ratio[:, 0, 0], 6))
print(np.round(a_ch.data[0, :, 0, 0], 6))

# %% a freshly built smAR unit starts at A = 0.25, so the pre-conv tensor is 1.25 x
unit = SmarUnit(8)
print("pre-conv / input:", np.unique(np.round(unit.pre_conv(feat).data / feat.data, 12)))
