import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))

from selfshot.vistr import VisConfig  # noqa: E402

torch.set_num_threads(1)


def toy_vis_config(**kw) -> VisConfig:
    """The toy model: T=4 frames of 32x32, width 48, three slots."""
    base = dict(d=48, enc_layers=2, fuse_layers=1, dec_layers=2, heads=4, n_slots=3, num_frames=4,
                support_frames=4, height=32, width=32, backbone_strides=[2, 2, 1], backbone_channels=[16, 32, 48],
                ffn_dim=96, mask_channels=8, mask_upsample=4)
    base.update(kw)
    return VisConfig(**base)


CRITERIA: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    """Remember one acceptance line; printed in the terminal summary."""
    CRITERIA[criterion] = (bool(passed), detail)
    print(f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(CRITERIA):
        ok, detail = CRITERIA[c]
        terminalreporter.write_line(f"criterion {c:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
