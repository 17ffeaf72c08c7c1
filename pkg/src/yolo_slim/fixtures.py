"""Synthetic label corpora shaped like published dataset size profiles.

The original datasets are external; these corpora reproduce only their
small/medium/large instance counts at a fixed 640x640 image size. Box areas
are drawn well inside each bin so that 6-decimal rounding never moves an
object across a threshold.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from pathlib import Path

from .labelset import MEDIUM_MAX_AREA, SMALL_MAX_AREA

IMG = 640


@dataclass(frozen=True)
class DatasetRow:
    slug: str
    name: str
    total: int
    small: int
    medium: int
    large: int
    model_used: str


TABLE2 = [
    DatasetRow("weedcrop", "WeedCrop", 18693, 15237, 3363, 93, "small"),
    DatasetRow("bccd", "BCCD", 11780, 547, 10094, 1139, "medium"),
    DatasetRow("underwater_pipes", "Underwater Pipes", 12238, 4, 551, 11683, "large"),
    DatasetRow("aerial_airport", "Aerial Airport", 11731, 9008, 2682, 41, "sm"),
    DatasetRow("brain_tumor", "Brain Tumor", 21526, 1056, 3484, 16985, "ml"),
    DatasetRow("face_detection", "Face Detection", 620, 21, 0, 599, "sl"),
]
ROWS = {r.slug: r for r in TABLE2}

# (low, high) areas in px^2 per bin, with margin from the thresholds
AREA_RANGES = {
    "small": (16.0, SMALL_MAX_AREA - 24.0),
    "medium": (SMALL_MAX_AREA + 24.0, MEDIUM_MAX_AREA - 200.0),
    "large": (MEDIUM_MAX_AREA + 200.0, IMG * IMG / 2),
}


def _box(rng: random.Random, area: float) -> tuple[float, float, float, float]:
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    w = min(math.sqrt(area * aspect), IMG) / IMG
    h = min(area / (w * IMG), IMG) / IMG
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return cx, cy, w, h


def label_lines(small: int, medium: int, large: int, seed: int = 0) -> list[str]:
    rng = random.Random(seed)
    lines = []
    for bin_name, n in (("small", small), ("medium", medium), ("large", large)):
        lo, hi = AREA_RANGES[bin_name]
        for _ in range(n):
            area = math.exp(rng.uniform(math.log(lo), math.log(hi)))
            cx, cy, w, h = _box(rng, area)
            lines.append(f"{rng.randrange(3)} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}")
    rng.shuffle(lines)
    return lines


def write_corpus(out_dir: str | Path, small: int, medium: int, large: int, seed: int = 0, max_per_file: int = 120) -> int:
    """Write the corpus as ``img_00000.txt``...; returns the number of files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = label_lines(small, medium, large, seed)
    rng = random.Random(seed + 1)
    i = n_files = 0
    while i < len(lines):
        k = rng.randint(1, max_per_file)
        chunk = lines[i : i + k]
        (out / f"img_{n_files:05d}.txt").write_text("\n".join(chunk) + "\n", encoding="utf-8")
        i += k
        n_files += 1
    return n_files


def write_table2(root: str | Path, seed: int = 0) -> dict[str, Path]:
    root = Path(root)
    paths = {}
    for row in TABLE2:
        d = root / row.slug
        write_corpus(d, row.small, row.medium, row.large, seed)
        paths[row.slug] = d
    return paths


if __name__ == "__main__":
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else "fixtures/table2"
    for slug, path in write_table2(target).items():
        print(f"{slug}: {path}")
