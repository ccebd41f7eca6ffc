"""
Training XCAT at desk scale
===========================

Three epochs of 50 minibatches on six natural images from scikit-image,
then a comparison with bicubic upsampling on a held-out crop. About a
minute on one CPU core. Without scikit-image the script falls back to the
procedural dataset, which is far harder to beat bicubic on.
"""

import time

import numpy as np

from xcat import XcatConfig, bicubic_downsample, bicubic_upsample, build, forward, psnr
from xcat.data import crop_to_multiple, synthetic_dataset, to_float
from xcat.train import TrainConfig, train

try:
    import skimage.data as sk

    names = ["coffee", "chelsea", "rocket", "immunohistochemistry", "hubble_deep_field", "colorwheel"]
    images = [crop_to_multiple(to_float(getattr(sk, n)()[:480, :480]), 3) for n in names]
    held = crop_to_multiple(to_float(sk.astronaut()[30:270, 120:360]), 3)
except ImportError:
    images = synthetic_dataset(6, 240, seed=0)
    held = synthetic_dataset(1, 240, seed=99)[0]

# The output conv starts at zero, so the untrained network is nearest-neighbour x3.
model = build(XcatConfig(), rng_seed=0)
cfg = TrainConfig.desk(batch_size=32)
print("epochs", cfg.epochs, "minibatches", cfg.minibatches_per_epoch, "batch", cfg.batch_size)

t0 = time.time()
result = train(model, cfg, images, on_epoch=lambda r: print(f"  epoch {r['epoch']}  lr {r['lr']:.2e}  loss {r['loss']:.6f}"))
print(f"trained in {time.time() - t0:.0f}s")

lr = bicubic_downsample(held, 3)
print(f"bicubic  {psnr(bicubic_upsample(lr, 3), held):.3f} dB")
print(f"untrained {psnr(forward(model, lr[None])[0], held):.3f} dB")
print(f"trained  {psnr(forward(result.model, lr[None])[0], held):.3f} dB")

# A second, MSE stage with the lower peak learning rate.
stage2 = train(result.model, TrainConfig.desk("two", batch_size=32, epochs=2), images)
print(f"after stage two {psnr(forward(stage2.model, lr[None])[0], held):.3f} dB")
