"""
Parameters and compute across the ablation presets
==================================================

Every named configuration builds a real network; this prints trainable and
fixed parameter counts and multiply-accumulates per LR pixel, then the cost
of a 640x360 LR frame (a 1920x1080 output).
"""

from xcat import PRESETS, build, get_preset, mac_count, param_count
from xcat.config import ABLATION_ROWS, CONCAT_STUDY_NAMES

print(f"{'config':>22s} {'trainable':>10s} {'fixed':>6s} {'MACs/px':>8s} {'GMACs@1080p':>12s}")
for name in ABLATION_ROWS + CONCAT_STUDY_NAMES:
    cfg = get_preset(name)
    t, f = param_count(build(cfg))
    per_px = mac_count(cfg, 1, 1)
    print(f"{name:>22s} {t:>10,d} {f:>6d} {per_px:>8,d} {mac_count(cfg, 360, 640) / 1e9:>12.2f}")

print(len(PRESETS), "presets in total")
