"""Reading and writing long-form Praat TextGrid interval tiers."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

SILENCE_LABELS = frozenset({"", "sil", "sp", "spn"})


class TextGridError(ValueError):
    pass


@dataclass
class AlignmentIntervals:
    """Phone intervals ``(label, start_s, end_s)``, sorted and non-overlapping."""

    intervals: list[tuple[str, float, float]]
    source: str = ""
    speaker_id: int | None = None

    def __post_init__(self):
        prev_end = -float("inf")
        for label, start, end in self.intervals:
            if end <= start:
                raise TextGridError(f"interval {label!r} has end {end} <= start {start}")
            if start < prev_end - 1e-9:
                raise TextGridError(f"interval {label!r} at {start} overlaps the previous one")
            prev_end = end

    def durations(self) -> list[float]:
        return [end - start for _, start, end in self.intervals]

    def labels(self) -> list[str]:
        return [label for label, _, _ in self.intervals]


@dataclass
class _Tier:
    name: str
    intervals: list[tuple[str, float, float]] = field(default_factory=list)


_NUM = r"([-+0-9.eE]+)"
_TIER_RE = re.compile(r'item\s*\[\d+\]\s*:(.*?)(?=item\s*\[\d+\]\s*:|\Z)', re.S)
_CLASS_RE = re.compile(r'class\s*=\s*"([^"]*)"')
_NAME_RE = re.compile(r'name\s*=\s*"((?:[^"]|"")*)"')
_INTERVAL_RE = re.compile(
    r'intervals\s*\[\d+\]\s*:\s*xmin\s*=\s*' + _NUM + r'\s*xmax\s*=\s*' + _NUM
    + r'\s*text\s*=\s*"((?:[^"]|"")*)"', re.S)


def _read_tiers(text: str) -> list[_Tier]:
    if "ooTextFile" not in text:
        raise TextGridError("not a TextGrid file")
    tiers = []
    for block in _TIER_RE.findall(text):
        cls = _CLASS_RE.search(block)
        name = _NAME_RE.search(block)
        if not cls or not name or cls.group(1) != "IntervalTier":
            continue
        tier = _Tier(name.group(1).replace('""', '"'))
        for xmin, xmax, label in _INTERVAL_RE.findall(block):
            tier.intervals.append((label.replace('""', '"').strip(), float(xmin), float(xmax)))
        tiers.append(tier)
    return tiers


def parse_textgrid(path, tier: str = "phones", silence=SILENCE_LABELS, speaker_id: int | None = None,
                   keep_silence: bool = False) -> AlignmentIntervals:
    """Phone intervals of ``tier``, with silence labels dropped unless ``keep_silence``."""
    path = Path(path)
    tiers = _read_tiers(path.read_text(encoding="utf-8"))
    match = [t for t in tiers if t.name == tier]
    if not match:
        raise TextGridError(f"no phone tier {tier!r} in {path}")
    AlignmentIntervals(match[0].intervals)  # validates the unfiltered tier
    intervals = [iv for iv in match[0].intervals if keep_silence or iv[0] not in silence]
    return AlignmentIntervals(intervals, str(path), speaker_id)


def write_textgrid(path, tiers: dict[str, list[tuple[str, float, float]]], xmin: float = 0.0,
                   xmax: float | None = None) -> None:
    """Write interval tiers in long TextGrid form."""
    if xmax is None:
        xmax = max((iv[2] for ivs in tiers.values() for iv in ivs), default=0.0)
    lines = [
        'File type = "ooTextFile"',
        'Object class = "TextGrid"',
        "",
        f"xmin = {float(xmin)!r}",
        f"xmax = {float(xmax)!r}",
        "tiers? <exists>",
        f"size = {len(tiers)}",
        "item []:",
    ]
    for i, (name, intervals) in enumerate(tiers.items(), 1):
        lines += [
            f"    item [{i}]:",
            '        class = "IntervalTier"',
            f'        name = "{name}"',
            f"        xmin = {float(xmin)!r}",
            f"        xmax = {float(xmax)!r}",
            f"        intervals: size = {len(intervals)}",
        ]
        for j, (label, start, end) in enumerate(intervals, 1):
            text = label.replace('"', '""')
            lines += [
                f"        intervals [{j}]:",
                f"            xmin = {float(start)!r}",
                f"            xmax = {float(end)!r}",
                f'            text = "{text}"',
            ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
