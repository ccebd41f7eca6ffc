"""
Cross concatenation and the HXBlock
===================================

An HXBlock splits its 28 channels 21/7, runs a 1x1 convolution on the big
group and a 3x3 on the small one, then glues the halves back together with
a circular shift of one quarter of the channels. This script walks through
that shift and what it buys in compute.
"""

import numpy as np

from xcat import XcatConfig, channel_concat, channel_rotate, channel_split, get_preset, mac_count
from xcat.model import block_macs_per_pixel

# Label each channel with its index so we can watch it move.
x = np.arange(28, dtype=np.int32).reshape(1, 1, 1, 28)
big, small = channel_split(x, [21, 7])
print("split sizes:", big.shape[-1], small.shape[-1])

# Straight concatenation puts the groups back where they were...
print("straight:", channel_concat([big, small]).ravel())

# ...while cross concatenation rotates by C/4 = 7, so the next block's
# 3x3 branch sees channels that just came out of the 1x1 branch.
cross = channel_rotate(channel_concat([big, small]), 7)
print("cross:   ", cross.ravel())

# Four quarter turns are the identity, and the shift costs no parameters.
y = x
for _ in range(4):
    y = channel_rotate(y, 7)
assert np.array_equal(y, x)

# Per-pixel cost of one block: 1x1/3x3 branches against 3x3 everywhere.
light = block_macs_per_pixel(XcatConfig())
heavy = block_macs_per_pixel(XcatConfig(branch_kernels=(3, 3)))
print(f"block MACs/pixel: {light} vs {heavy} ({heavy / light:.1f}x)")

# The same holds for whole networks in the concatenation study.
for m in (2, 4, 8):
    a = mac_count(get_preset(f"hx-21x7-m{m}-cross"), 1, 1)
    b = mac_count(get_preset(f"hx-21x7-m{m}-straight"), 1, 1)
    print(f"m={m}: cross {a:,} MACs/pixel, straight {b:,}")
