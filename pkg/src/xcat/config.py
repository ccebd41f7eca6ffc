"""Architecture configuration and the named ablation presets.

Preset names follow the row letters of the ablation table (``A`` .. ``M``)
plus ``xcat`` for the baseline. The cross vs. straight concatenation study
rows are named ``hx-<x>x<y>-m<m>-<cross|straight>``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

MIX_MODES = ("cross_concat", "straight_concat", "conv1x1")
ROTATE_DIRECTIONS = ("forward", "backward")
BLOCK_KINDS = ("hxblock", "plain_conv3x3")
POST_BLOCK_CONVS = ("conv3x3", "conv1x1", "none")
MERGE_MODES = ("add", "concat")


@dataclass(frozen=True)
class XcatConfig:
    m: int = 2
    split: tuple[int, int] = (21, 7)
    branch_kernels: tuple[int, int] = (1, 3)
    mix_mode: str = "cross_concat"
    rotate_direction: str = "forward"
    block_kind: str = "hxblock"
    post_block_conv: str = "conv3x3"
    merge_mode: str = "add"
    scale: int = 3
    image_channels: int = 3
    hidden_relu: bool = True

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(int(s) for s in self.split))
        object.__setattr__(self, "branch_kernels", tuple(int(k) for k in self.branch_kernels))
        self.validate()

    def validate(self) -> None:
        def bad(fieldname, msg):
            raise ValueError(f"invalid config field {fieldname!r}: {msg}")

        if self.m < 0:
            bad("m", f"block count must be >= 0, got {self.m}")
        if len(self.split) != 2 or min(self.split) < 1:
            bad("split", f"need two positive channel counts, got {self.split}")
        if len(self.branch_kernels) != 2 or any(k not in (1, 3) for k in self.branch_kernels):
            bad("branch_kernels", f"kernels must be 1 or 3, got {self.branch_kernels}")
        for name, allowed in (
            ("mix_mode", MIX_MODES),
            ("rotate_direction", ROTATE_DIRECTIONS),
            ("block_kind", BLOCK_KINDS),
            ("post_block_conv", POST_BLOCK_CONVS),
            ("merge_mode", MERGE_MODES),
        ):
            if getattr(self, name) not in allowed:
                bad(name, f"{getattr(self, name)!r} not in {allowed}")
        if self.scale < 1:
            bad("scale", f"must be >= 1, got {self.scale}")
        if self.image_channels < 1:
            bad("image_channels", f"must be >= 1, got {self.image_channels}")
        if (
            self.block_kind == "hxblock"
            and self.mix_mode == "cross_concat"
            and self.feature_channels % 4
        ):
            bad("split", f"{self.feature_channels} feature channels cannot be rotated by a quarter")

    @property
    def feature_channels(self) -> int:
        return self.split[0] + self.split[1]

    @property
    def out_channels_before_d2s(self) -> int:
        return self.image_channels * self.scale ** 2

    @property
    def rotation(self) -> int:
        """Signed channel shift applied by cross concatenation (0 for other mix modes)."""
        if self.block_kind != "hxblock" or self.mix_mode != "cross_concat":
            return 0
        k = self.feature_channels // 4
        return k if self.rotate_direction == "forward" else -k

    def replace(self, **changes) -> "XcatConfig":
        return dataclasses.replace(self, **changes)


BASELINE = XcatConfig()

_M4 = BASELINE.replace(m=4)
_M4_NOPOST = _M4.replace(post_block_conv="none")

PRESETS: dict[str, XcatConfig] = {
    "xcat": BASELINE,
    # same network as xcat, trained with a single stage
    "A": BASELINE,
    "B": BASELINE.replace(mix_mode="conv1x1"),
    "C": BASELINE.replace(branch_kernels=(3, 3), mix_mode="conv1x1"),
    "D": BASELINE.replace(block_kind="plain_conv3x3"),
    "E": _M4,
    "F": _M4.replace(post_block_conv="conv1x1"),
    "G": _M4_NOPOST,
    "H": _M4_NOPOST.replace(split=(16, 12)),
    "I": _M4_NOPOST.replace(split=(7, 21)),
    "J": _M4_NOPOST.replace(split=(7, 21), branch_kernels=(3, 3)),
    "K": _M4_NOPOST.replace(m=3, split=(7, 21)),
    "L": _M4_NOPOST.replace(split=(16, 4)),
    "M": _M4_NOPOST.replace(split=(16, 4), merge_mode="concat"),
}

CONCAT_STUDY = [((21, 7), 2), ((21, 7), 4), ((21, 7), 8), ((21, 7), 12), ((24, 8), 6), ((56, 8), 4)]

for (_x, _y), _m in CONCAT_STUDY:
    for _mode, _tag in (("cross_concat", "cross"), ("straight_concat", "straight")):
        PRESETS[f"hx-{_x}x{_y}-m{_m}-{_tag}"] = BASELINE.replace(split=(_x, _y), m=_m, mix_mode=_mode)

PRESETS["xcat-baseline"] = BASELINE

ABLATION_ROWS = ["xcat"] + list("ABCDEFGHIJKLM")
CONCAT_STUDY_NAMES = [f"hx-{x}x{y}-m{m}-{tag}" for (x, y), m in CONCAT_STUDY for tag in ("cross", "straight")]


def get_preset(name: str) -> XcatConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown config {name!r}; valid names: {', '.join(PRESETS)}") from None


def concat_study_pairs() -> list[tuple[XcatConfig, XcatConfig]]:
    """(cross, straight) config pairs of the concatenation study."""
    return [
        (PRESETS[f"hx-{x}x{y}-m{m}-cross"], PRESETS[f"hx-{x}x{y}-m{m}-straight"])
        for (x, y), m in CONCAT_STUDY
    ]
