"""YOLO label parsing, object-size classification and dataset profiling."""

from __future__ import annotations

import enum
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

log = logging.getLogger(__name__)

SMALL_MAX_AREA = 32**2
MEDIUM_MAX_AREA = 96**2
RANGE_TOL = 1e-6
DEFAULT_THETA = 0.20
SCHEMA_VERSION = 1
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".webp", ".tif", ".tiff")


class LabelError(ValueError):
    pass


class MalformedLine(LabelError):
    pass


class OutOfRange(LabelError):
    pass


class DirNotFound(FileNotFoundError):
    pass


class EmptyProfile(ValueError):
    pass


class SizeClass(enum.Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


class Variant(enum.Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"
    SM = "sm"
    ML = "ml"
    SL = "sl"
    FULL = "full"


COVERAGE = {
    frozenset({SizeClass.SMALL}): Variant.SMALL,
    frozenset({SizeClass.MEDIUM}): Variant.MEDIUM,
    frozenset({SizeClass.LARGE}): Variant.LARGE,
    frozenset({SizeClass.SMALL, SizeClass.MEDIUM}): Variant.SM,
    frozenset({SizeClass.MEDIUM, SizeClass.LARGE}): Variant.ML,
    frozenset({SizeClass.SMALL, SizeClass.LARGE}): Variant.SL,
    frozenset(SizeClass): Variant.FULL,
}


@dataclass(frozen=True)
class LabelRecord:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float


def parse_label_line(line: str) -> LabelRecord:
    tokens = line.split()
    if len(tokens) != 5:
        raise MalformedLine(f"expected 5 tokens, got {len(tokens)}: {line.strip()!r}")
    try:
        cls_f = float(tokens[0])
        cx, cy, w, h = (float(t) for t in tokens[1:])
    except ValueError:
        raise MalformedLine(f"non-numeric token in {line.strip()!r}") from None
    if not cls_f.is_integer() or cls_f < 0:
        raise MalformedLine(f"class id must be a non-negative integer: {tokens[0]!r}")
    vals = (cx, cy, w, h)
    if any(not (-RANGE_TOL <= v <= 1 + RANGE_TOL) for v in vals):
        raise OutOfRange(f"geometry outside [0, 1]: {line.strip()!r}")
    cx, cy, w, h = (min(max(v, 0.0), 1.0) for v in vals)
    return LabelRecord(int(cls_f), cx, cy, w, h)


def object_area_px(rec: LabelRecord, img_w: float, img_h: float) -> float:
    return (rec.w * img_w) * (rec.h * img_h)


def classify_size(area: float) -> SizeClass:
    if area <= SMALL_MAX_AREA:
        return SizeClass.SMALL
    if area <= MEDIUM_MAX_AREA:
        return SizeClass.MEDIUM
    return SizeClass.LARGE


# ---------------------------------------------------------------------------
# image-size policies


@dataclass(frozen=True)
class FixedSize:
    width: int = 640
    height: int = 640

    def size_for(self, label_path: Path) -> tuple[int, int]:
        return self.width, self.height

    def describe(self):
        return {"policy": "fixed", "width": self.width, "height": self.height}


@dataclass(frozen=True)
class SidecarImages:
    """Read true image dimensions from files sharing the label's stem."""

    image_dir: Path

    def size_for(self, label_path: Path) -> tuple[int, int]:
        from PIL import Image

        for suffix in IMAGE_SUFFIXES:
            for cand in (suffix, suffix.upper()):
                p = Path(self.image_dir) / (label_path.stem + cand)
                if p.is_file():
                    with Image.open(p) as im:
                        return im.size
        raise FileNotFoundError(f"no image for {label_path.name} in {self.image_dir}")

    def describe(self):
        return {"policy": "sidecar", "image_dir": str(self.image_dir)}


ImageSizePolicy = Union[FixedSize, SidecarImages]


# ---------------------------------------------------------------------------
# profiling


@dataclass(frozen=True)
class FileCounts:
    small: int = 0
    medium: int = 0
    large: int = 0
    degenerate: int = 0
    skipped_lines: int = 0
    failed: bool = False

    def __add__(self, o: "FileCounts") -> "FileCounts":
        return FileCounts(
            self.small + o.small,
            self.medium + o.medium,
            self.large + o.large,
            self.degenerate + o.degenerate,
            self.skipped_lines + o.skipped_lines,
        )


@dataclass(frozen=True)
class DatasetProfile:
    total_objects: int
    count_small: int
    count_medium: int
    count_large: int
    files_scanned: int = 0
    files_failed: int = 0
    assumed_image_size: dict = field(default_factory=lambda: FixedSize().describe())
    degenerate_objects: int = 0
    skipped_lines: int = 0

    def __post_init__(self):
        if self.count_small + self.count_medium + self.count_large != self.total_objects:
            raise ValueError("size-class counts must sum to total_objects")
        if min(self.count_small, self.count_medium, self.count_large) < 0:
            raise ValueError("counts must be non-negative")

    @classmethod
    def from_counts(cls, small: int, medium: int, large: int, **kw) -> "DatasetProfile":
        return cls(small + medium + large, small, medium, large, **kw)

    @property
    def empty(self) -> bool:
        return self.total_objects == 0

    def count(self, c: SizeClass) -> int:
        return {SizeClass.SMALL: self.count_small, SizeClass.MEDIUM: self.count_medium, SizeClass.LARGE: self.count_large}[c]

    def fractions(self) -> dict[SizeClass, float]:
        if self.empty:
            raise EmptyProfile("profile has no objects")
        return {c: self.count(c) / self.total_objects for c in SizeClass}

    def to_dict(self, theta: float | None = None) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "total_objects": self.total_objects,
            "small": self.count_small,
            "medium": self.count_medium,
            "large": self.count_large,
            "files_scanned": self.files_scanned,
            "files_failed": self.files_failed,
            "assumed_image_size": self.assumed_image_size,
            "degenerate_objects": self.degenerate_objects,
            "skipped_lines": self.skipped_lines,
        }
        if theta is not None:
            d["theta"] = theta
            d["recommended_variant"] = None if self.empty else recommend_variant(self, theta).value
        return d

    def to_json(self, theta: float | None = None, indent=2) -> str:
        return json.dumps(self.to_dict(theta), indent=indent)


def count_lines(lines: Iterable[str], img_w: float, img_h: float, strict: bool = False, source: str = "") -> FileCounts:
    small = medium = large = degenerate = skipped = 0
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = parse_label_line(line)
        except LabelError as e:
            if strict:
                raise type(e)(f"{source}:{lineno}: {e}") from None
            skipped += 1
            continue
        area = object_area_px(rec, img_w, img_h)
        if area == 0:
            degenerate += 1
        c = classify_size(area)
        if c is SizeClass.SMALL:
            small += 1
        elif c is SizeClass.MEDIUM:
            medium += 1
        else:
            large += 1
    return FileCounts(small, medium, large, degenerate, skipped)


def profile_file(path: Path, policy: ImageSizePolicy, strict: bool = False) -> FileCounts:
    try:
        img_w, img_h = policy.size_for(path)
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        log.warning("skipping %s: %s", path, e)
        return FileCounts(failed=True)
    return count_lines(text.splitlines(), img_w, img_h, strict, str(path))


def profile_directory(
    dir: str | os.PathLike,
    policy: ImageSizePolicy | None = None,
    strict: bool = False,
    workers: int = 1,
) -> DatasetProfile:
    """Classify every annotation in ``dir/*.txt``.

    A dataset with no parseable objects returns a profile with ``empty`` set
    rather than raising. Strict mode raises on the first malformed line.
    """
    root = Path(dir)
    if not root.is_dir():
        raise DirNotFound(f"label directory not found: {root}")
    policy = policy or FixedSize()
    files = sorted(p for p in root.glob("*.txt") if p.is_file())
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda p: profile_file(p, policy, strict), files))
    else:
        results = [profile_file(p, policy, strict) for p in files]

    total = FileCounts()
    failed = 0
    for r in results:
        failed += r.failed
        total = total + r
    log.info("scanned %d files (%d failed) in %s", len(files), failed, root)
    return DatasetProfile.from_counts(
        total.small,
        total.medium,
        total.large,
        files_scanned=len(files),
        files_failed=failed,
        assumed_image_size=policy.describe(),
        degenerate_objects=total.degenerate,
        skipped_lines=total.skipped_lines,
    )


# ---------------------------------------------------------------------------
# recommendation


_SIZE_ORDER = [SizeClass.SMALL, SizeClass.MEDIUM, SizeClass.LARGE]


def significant_classes(profile: DatasetProfile, theta: float = DEFAULT_THETA) -> frozenset[SizeClass]:
    if not 0 < theta <= 1:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    frac = profile.fractions()
    chosen = frozenset(c for c in SizeClass if frac[c] >= theta)
    if not chosen:
        # ties go to the larger class
        best = max(_SIZE_ORDER, key=lambda c: (profile.count(c), _SIZE_ORDER.index(c)))
        chosen = frozenset({best})
    return chosen


def recommend_variant(profile: DatasetProfile, theta: float = DEFAULT_THETA) -> Variant:
    return COVERAGE[significant_classes(profile, theta)]
