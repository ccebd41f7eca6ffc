"""
UINT8 quantization with a representative image search
=====================================================

Post-training quantization needs activation ranges, taken here from one
representative image. Which image you pick matters, so we try each
candidate, score the quantized model on validation pairs and keep the best.
"""

import numpy as np

from xcat import XcatConfig, build, challenge_score, evaluate, forward, representative_search
from xcat.data import ImagePair, bicubic_downsample, synthetic_dataset
from xcat.quant import dequantize, lr_to_uint8, qforward
from xcat.train import TrainConfig, train

# A quick training run so the float model does something worth quantizing.
data = synthetic_dataset(4, 96, seed=0)
cfg = TrainConfig.desk(epochs=2, minibatches_per_epoch=20, batch_size=8, crop_hr=48)
model = train(build(XcatConfig(), rng_seed=0), cfg, data).model

hr_val = synthetic_dataset(3, 72, seed=1)
val = [(bicubic_downsample(h, 3), h) for h in hr_val]

# Candidates: a dim image, a typical one and pure noise.
typical = bicubic_downsample(synthetic_dataset(1, 96, seed=2)[0], 3)
rng = np.random.default_rng(0)
candidates = [0.1 * typical, typical, rng.uniform(size=(32, 32, 3)).astype(np.float32)]
result = representative_search(model, candidates, val)
for i, s in enumerate(result.scores):
    print(f"candidate {i}: {s:.3f} dB" + ("  <- best" if i == result.best_index else ""))

# Float vs uint8 on the validation pairs.
pairs = [ImagePair(lr, hr, f"val{i}") for i, (lr, hr) in enumerate(val)]
report = evaluate(pairs, model=model, qmodel=result.qmodel)
for row in report.rows:
    print(f"{row.id}: fp32 {row.psnr_fp32:.3f}  uint8 {row.psnr_uint8:.3f}  delta {row.delta:+.3f}")

# The integer pipeline works entirely on bytes.
lr = val[0][0][None]
q = qforward(result.qmodel, lr_to_uint8(lr))
err = np.abs(dequantize(q, result.qmodel.edges["output"]) - forward(model, lr))
print("output", q.dtype, q.shape, f"max |fp32 - uint8| = {err.max():.4f} ({err.max() * 255:.1f} grey levels)")

# The challenge score rewards PSNR exponentially and runtime linearly.
print(f"score at 29.81 dB, 320 ms: {challenge_score(29.81, 320):.1f}")
