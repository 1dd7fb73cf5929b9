"""Named configurations: benchmark hyperparameters and split shapes, plus synthetic regimes."""

from __future__ import annotations

from dataclasses import dataclass

from .data import SplitSpec, SyntheticConfig


@dataclass(frozen=True)
class Preset:
    name: str
    split: SplitSpec
    hyper: dict
    synthetic: SyntheticConfig | None = None
    kind: str = "fine"  # "fine" or "coarse"


def _hp(alpha, beta, gamma, c, tau, base_epochs, inc_epochs, base_lr, inc_lr, base_batch, inc_batch):
    return dict(
        alpha=alpha, beta=beta, gamma=gamma, c=c, tau=tau,
        base_epochs=base_epochs, inc_epochs=inc_epochs,
        base_lr=base_lr, inc_lr=inc_lr, base_batch=base_batch, inc_batch=inc_batch,
    )


PRESETS: dict[str, Preset] = {
    "cub200": Preset("cub200", SplitSpec(100, 10, 5, 10), _hp(10, 25, 30, 0.5, 0.05, 30, 20, 0.0025, 0.002, 4, 4)),
    "cars": Preset("cars", SplitSpec(96, 10, 5, 10), _hp(10, 25, 40, 0.8, 0.05, 100, 20, 0.0025, 0.002, 4, 4)),
    "aircraft": Preset("aircraft", SplitSpec(50, 5, 5, 10), _hp(10, 25, 20, 0.5, 0.05, 100, 10, 0.0025, 0.002, 32, 4)),
    "inf200": Preset("inf200", SplitSpec(100, 10, 5, 10), _hp(10, 25, 40, 0.5, 0.05, 30, 30, 0.0025, 0.01, 4, 4)),
    "cifar100": Preset("cifar100", SplitSpec(60, 5, 5, 8), _hp(0, 0, 20, 0.5, 0.02, 15, 10, 0.0025, 0.0001, 32, 4), kind="coarse"),
    "miniimagenet": Preset("miniimagenet", SplitSpec(60, 5, 5, 8), _hp(10, 25, 30, 0.8, 0.02, 5, 5, 0.0025, 0.0002, 32, 4), kind="coarse"),
}

# Desk-scale stand-ins for the two regimes. Sizes are small enough that a full
# four-way ablation over several seeds runs in well under a minute.
_SYNTH_SPLIT = SplitSpec(n_base=15, n_way=3, k_shot=5, T=5)
# The regulariser weights and learning rates are scaled for 32-dim toy features.
# Picked on tuning seeds 100-109, disjoint from the seeds the tests use.
_SYNTH_HP = _hp(0.1, 0.1, 5.0, 0.5, 0.2, 30, 10, 0.05, 0.01, 16, 4)

PRESETS["synthetic-fine"] = Preset(
    "synthetic-fine",
    _SYNTH_SPLIT,
    _SYNTH_HP,
    SyntheticConfig(num_classes=30, dim=32, cluster_count=5, within_std=0.3,
                    fine_grained=True, fine_shrink=0.35, text_noise=0.6),
)
PRESETS["synthetic-coarse"] = Preset(
    "synthetic-coarse",
    _SYNTH_SPLIT,
    _SYNTH_HP,
    SyntheticConfig(num_classes=30, dim=32, cluster_count=30, within_std=1.2,
                    fine_grained=False, text_noise=0.6),
    kind="coarse",
)


def synthetic_for(preset: Preset) -> SyntheticConfig:
    """Generator settings for ``preset``; benchmark presets get data shaped like their split."""
    if preset.synthetic is not None:
        return preset.synthetic
    n = preset.split.num_classes
    fine = preset.kind == "fine"
    return SyntheticConfig(
        num_classes=n, dim=64, cluster_count=max(1, n // 10) if fine else n,
        within_std=0.3, fine_grained=fine, text_noise=0.6,
    )


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
