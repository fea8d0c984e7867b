"""Silhouette ingestion: frame normalisation, sequence loading, clip sampling and the dataset manifest."""
import csv
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np

from dygait.pgm import PGMFormatError, read_image

log = logging.getLogger(__name__)

FRAME_RE = re.compile(r"^(\d+)\.(pgm|png)$", re.IGNORECASE)
MANIFEST_FIELDS = ("subject", "condition", "view", "path", "frames", "partition")
PARTITIONS = ("train", "gallery", "probe")


class EmptyFrameError(ValueError):
    """A frame has no foreground pixel; loaders drop it."""


class EmptySequenceError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class SilhouetteSequence:
    frames: np.ndarray  # (T, H, W), values in {0, 1}
    subject: str = ""
    condition: str = ""
    view: str = ""
    dropped: list = field(default_factory=list)  # (frame file, reason)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (T, H, W), got {self.frames.shape}")

    def __len__(self):
        return self.frames.shape[0]

    def with_frames(self, frames):
        return SilhouetteSequence(frames, self.subject, self.condition, self.view, list(self.dropped))


def normalize_frame(raw, out_size=(64, 44), mode="crop"):
    """Binary silhouette mask of size ``out_size`` from a grayscale frame (nonzero = foreground).

    ``crop``: crop rows to the foreground's vertical extent, resample to the
    output height with the aspect ratio kept (nearest neighbour, extent
    endpoints map exactly), then place the foreground's column centroid at the
    output centre with a whole-pixel shift and crop/zero-pad to the output
    width. Idempotent, and exactly invariant to whole-pixel horizontal shifts
    of a subject that fits in frame.

    ``resize``: plain nearest-neighbour resize of the whole frame.
    """
    mask = np.asarray(raw) > 0
    if mask.ndim != 2:
        raise ValueError(f"frame must be 2-D, got shape {mask.shape}")
    if not mask.any():
        raise EmptyFrameError("frame has no foreground pixel")
    h_out, w_out = out_size
    if mode == "resize":
        h, w = mask.shape
        rows = (np.arange(h_out) * h) // h_out
        cols = (np.arange(w_out) * w) // w_out
        return mask[np.ix_(rows, cols)].astype(np.uint8)
    if mode != "crop":
        raise ValueError(f"unknown normalisation mode {mode!r}")

    fg_rows = np.flatnonzero(mask.any(axis=1))
    top, bottom = fg_rows[0], fg_rows[-1]
    extent = bottom - top + 1
    if extent > 1 and h_out > 1:
        scale = (h_out - 1) / (extent - 1)
        rows = top + np.rint(np.arange(h_out) / scale).astype(int)
    else:
        scale = h_out / extent
        rows = top + (np.arange(h_out) * extent) // h_out
    band = mask[rows]  # (h_out, W)

    fg_cols = np.flatnonzero(band.any(axis=0))
    left, right = fg_cols[0], fg_cols[-1]
    # resampled columns, anchored at the leftmost foreground column
    width = int(np.ceil((right - left + 1) * scale))
    src = left + np.floor((np.arange(width) + 0.5) / scale).astype(int)
    src = np.clip(src, 0, mask.shape[1] - 1)
    scaled = band[:, src]
    ys, xs = np.nonzero(scaled)
    centroid = xs.mean()
    shift = int(np.floor(centroid - (w_out / 2 - 0.5)))

    out = np.zeros((h_out, w_out), dtype=np.uint8)
    u = np.arange(w_out) + shift
    ok = (u >= 0) & (u < width)
    out[:, ok] = scaled[:, u[ok]]
    return out


def frame_files(path):
    names = []
    for name in os.listdir(path):
        m = FRAME_RE.match(name)
        if m:
            names.append((int(m.group(1)), name))
    names.sort()
    return [os.path.join(path, n) for _, n in names]


def load_sequence(path, out_size=(64, 44), mode="crop", subject="", condition="", view=""):
    """Load and normalise every ``NNNN.pgm`` (or ``.png``) frame in ``path``, in index order.

    Undecodable or empty frames are dropped and logged; an unreadable file
    raises ``OSError`` naming it.
    """
    if not os.path.isdir(path):
        raise FileNotFoundError(f"sequence directory not found: {path}")
    frames, dropped = [], []
    for fpath in frame_files(path):
        try:
            raw = read_image(fpath)
        except PGMFormatError as exc:
            dropped.append((fpath, str(exc)))
            log.warning("dropped frame %s: %s", fpath, exc)
            continue
        except OSError as exc:
            raise OSError(f"cannot read frame {fpath}: {exc}") from exc
        try:
            frames.append(normalize_frame(raw, out_size, mode))
        except EmptyFrameError as exc:
            dropped.append((fpath, str(exc)))
            log.warning("dropped frame %s: %s", fpath, exc)
    if not frames:
        raise EmptySequenceError(f"no usable frame in {path}")
    return SilhouetteSequence(np.stack(frames), subject, condition, view, dropped)


def sample_clip(seq, length, rng):
    """``length`` consecutive frames from a uniformly random start; short sequences wrap cyclically."""
    if length < 1:
        raise ValueError("clip length must be at least 1")
    t = len(seq)
    if t >= length:
        start = int(rng.integers(0, t - length + 1))
        idx = np.arange(start, start + length)
    else:
        start = int(rng.integers(0, t))
        idx = (start + np.arange(length)) % t
    return seq.with_frames(seq.frames[idx])


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestRow:
    subject: str
    condition: str
    view: str
    path: str
    frames: int
    partition: str


@dataclass
class DatasetManifest:
    root: str
    rows: list

    def __post_init__(self):
        self.validate()

    def validate(self):
        seen = {}
        for r in self.rows:
            if r.partition not in PARTITIONS:
                raise ManifestError(f"unknown partition {r.partition!r} for {r.path}")
            if r.path in seen and seen[r.path] != r.partition:
                raise ManifestError(f"sequence {r.path} appears in partitions {seen[r.path]!r} and {r.partition!r}")
            if r.path in seen:
                raise ManifestError(f"duplicate manifest row for {r.path}")
            seen[r.path] = r.partition

    def partition(self, name):
        return [r for r in self.rows if r.partition == name]

    def subjects(self, partition=None):
        rows = self.rows if partition is None else self.partition(partition)
        return sorted({r.subject for r in rows})

    def abspath(self, row):
        return row.path if os.path.isabs(row.path) else os.path.join(self.root, row.path)

    def write(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_FIELDS)
            for r in self.rows:
                w.writerow([r.subject, r.condition, r.view, r.path, r.frames, r.partition])

    @classmethod
    def read(cls, path, root=None):
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
                raise ManifestError(f"manifest header must be {','.join(MANIFEST_FIELDS)}")
            rows = [
                ManifestRow(d["subject"], d["condition"], d["view"], d["path"], int(d["frames"]), d["partition"])
                for d in reader
            ]
        return cls(root if root is not None else os.path.dirname(os.path.abspath(path)), rows)


def scan_dataset(root, partition_rule=None):
    """Build a manifest from ``<root>/<subject>/<condition>/<view>/NNNN.pgm``.

    ``partition_rule(index, count)`` names the partition of a subject's
    ``index``-th sequence (sorted by condition, then view) out of ``count``;
    by default every sequence is ``train``.
    """
    rows = []
    for subject in sorted(os.listdir(root)):
        sdir = os.path.join(root, subject)
        if not os.path.isdir(sdir):
            continue
        found = []
        for condition in sorted(os.listdir(sdir)):
            cdir = os.path.join(sdir, condition)
            if not os.path.isdir(cdir):
                continue
            for view in sorted(os.listdir(cdir)):
                vdir = os.path.join(cdir, view)
                n = len(frame_files(vdir)) if os.path.isdir(vdir) else 0
                if n:
                    found.append((condition, view, vdir, n))
        for index, (condition, view, vdir, n) in enumerate(found):
            part = partition_rule(index, len(found)) if partition_rule else "train"
            rows.append(ManifestRow(subject, condition, view, os.path.relpath(vdir, root), n, part))
    return DatasetManifest(root, rows)


def gallery_probe_split(n_gallery=2, n_probe=2):
    """Partition rule: each subject's last ``n_probe`` sequences are probes, the ``n_gallery``
    before them gallery, the rest training (two + two is the GREW arrangement)."""

    def rule(index, count):
        if index >= count - n_probe:
            return "probe"
        if index >= count - n_probe - n_gallery:
            return "gallery"
        return "train"

    return rule
