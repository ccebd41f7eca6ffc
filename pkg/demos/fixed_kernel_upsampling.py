"""
Nearest-neighbour upsampling with a fixed 1x1 kernel
====================================================

Instead of a dedicated resize op, XCAT copies each of the 3 input channels
9 times with a constant 1x1 convolution and lets depth-to-space lay the
copies out as 3x3 pixel blocks. The result is exactly nearest-neighbour x3,
in float and in uint8.
"""

import numpy as np

from xcat import depth_to_space, make_fixed_upsample_kernel, nearest_upsample_reference, conv2d
from xcat.quant import UNIT, QConv, qconv, quantize_weights

fixed = make_fixed_upsample_kernel()
print("kernel shape (out, in, kh, kw):", fixed.kernel.shape)
# Output channel o reads input channel o % 3.
print("first rows:\n", fixed.kernel[:6, :, 0, 0].astype(int))

rng = np.random.default_rng(0)
img = rng.uniform(size=(1, 4, 5, 3)).astype(np.float32)
up = depth_to_space(conv2d(img, fixed), 3)
print("float exact:", np.array_equal(up, nearest_upsample_reference(img, 3)))

# The integer path: weights quantize with scale 1, so the 0/1 kernel is kept as is.
qk, wp = quantize_weights(fixed.kernel, trainable=False)
print("weight params:", wp)
img8 = rng.integers(0, 256, size=(1, 4, 5, 3), dtype=np.uint8)
up8 = depth_to_space(qconv(img8, UNIT, QConv(qk, wp, np.zeros(27, np.int32), False), UNIT), 3)
print("uint8 exact:", np.array_equal(up8, nearest_upsample_reference(img8, 3)))
print(up8[0, :3, :6, 0])
