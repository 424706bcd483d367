"""Liveness labels shared across modules."""

from dataclasses import dataclass

SPOOF = "spoof"
LIVE = "live"
LIVENESS = (SPOOF, LIVE)

# PAD logit index of each class; "classified as real" means argmax == LIVE_INDEX.
SPOOF_INDEX = 0
LIVE_INDEX = 1
LABEL_INDEX = {SPOOF: SPOOF_INDEX, LIVE: LIVE_INDEX}

MEDIA = ("none", "print", "replay")


@dataclass(frozen=True)
class AttackTarget:
    target_label: str = LIVE

    def __post_init__(self):
        if self.target_label not in LIVENESS:
            raise ValueError(f"unknown target label {self.target_label!r}")

    @property
    def index(self) -> int:
        return LABEL_INDEX[self.target_label]

    def check_source(self, source_liveness: str) -> None:
        if source_liveness == self.target_label:
            raise ValueError(
                f"target label {self.target_label!r} equals the source label"
            )


def target_index(target) -> int:
    """Accept an AttackTarget, a label string or a class index."""
    if isinstance(target, AttackTarget):
        return target.index
    if isinstance(target, str):
        return LABEL_INDEX[target]
    return int(target)
