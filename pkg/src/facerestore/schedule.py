"""Resolution ladders and channel schedules shared by the codec and generator."""

from __future__ import annotations

from .errors import ConfigError

__all__ = ["resolution_ladder", "channel_schedule"]


def _check_pow2(value: int, name: str) -> None:
    if value < 1 or value & (value - 1):
        raise ConfigError(f"{name} must be a power of two, got {value}")


def resolution_ladder(base_resolution: int, min_resolution: int = 4) -> list[int]:
    """Resolutions from min_resolution up to base_resolution, doubling each step."""
    _check_pow2(base_resolution, "base_resolution")
    _check_pow2(min_resolution, "min_resolution")
    if min_resolution > base_resolution:
        raise ConfigError(
            f"min_resolution {min_resolution} exceeds base_resolution {base_resolution}"
        )
    ladder = []
    r = min_resolution
    while r <= base_resolution:
        ladder.append(r)
        r *= 2
    return ladder


def channel_schedule(
    base_resolution: int,
    channel_base: int = 32,
    channel_max: int = 512,
    min_resolution: int = 4,
) -> dict[int, int]:
    """Channel count per resolution: channel_base at the finest scale, doubling
    as resolution halves, capped at channel_max."""
    if channel_base < 1 or channel_max < channel_base:
        raise ConfigError(f"bad channel bounds ({channel_base}, {channel_max})")
    return {
        r: min(channel_max, channel_base * (base_resolution // r))
        for r in resolution_ladder(base_resolution, min_resolution)
    }
