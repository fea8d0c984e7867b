"""Procedural walkers whose identity lives only in leg dynamics.

Every walker shares one static body (head + torso ellipse). Identities differ
in leg swing frequency, phase and amplitude; bags are static rectangles
attached per sequence, independent of identity unless the adversarial policy
asks otherwise. Frames are binary 64x44 silhouettes by default.
"""
import csv
import os
from dataclasses import dataclass

import numpy as np

from dygait.pgm import write_pgm
from dygait.preprocess import DatasetManifest, ManifestRow, gallery_probe_split

POLICIES = ("none", "random", "adversarial")
MIN_FREQ_SEPARATION = 0.01  # cycles/frame between any two identities

# default body geometry for 64x44 frames: (row, col) pixel coordinates
HEAD = (8.0, 22.0, 4.5)  # centre row, centre col, radius
TORSO = (22.0, 22.0, 9.0, 5.0)  # centre row, centre col, semi-axis rows, semi-axis cols
HIPS = ((30.0, 21.0), (30.0, 23.0))
SHOULDERS = ((15.0, 20.0), (15.0, 24.0))
LEG_LENGTH, LEG_HALF_WIDTH = 20.0, 1.5
ARM_LENGTH, ARM_HALF_WIDTH = 12.0, 1.0
BAG_SIZE = (8, 6)


class SpecInvalidError(ValueError):
    pass


@dataclass(frozen=True)
class WalkerSpec:
    identity: str
    leg_freq: float  # cycles per frame
    leg_phase: float  # radians
    leg_amplitude: float  # peak swing, radians from vertical
    arm_amplitude: float = 0.5  # arm swing relative to leg swing (arms move against the legs)
    time_offset: float = 0.0  # frames; per-sequence start within the gait cycle
    bag: tuple = None  # (top row, left col) of a BAG_SIZE rectangle, or None
    size: tuple = (64, 44)
    noise: float = 0.005  # per-pixel flip probability


@dataclass
class RegionMasks:
    legs: np.ndarray  # (T, H, W) bool
    torso: np.ndarray
    bag: np.ndarray


def _scale_geometry(size):
    return size[0] / 64.0, size[1] / 44.0


def _segment_mask(rr, cc, start, angle, length, half_width):
    r0, c0 = start
    dr, dc = np.cos(angle), np.sin(angle)  # angle 0 points straight down
    pr, pc = rr - r0, cc - c0
    s = np.clip(pr * dr + pc * dc, 0.0, length)
    return (pr - s * dr) ** 2 + (pc - s * dc) ** 2 <= half_width**2


def leg_angle(spec, t):
    return spec.leg_amplitude * np.sin(2 * np.pi * spec.leg_freq * (t + spec.time_offset) + spec.leg_phase)


def check_spec(spec):
    h, w = spec.size
    sy, sx = _scale_geometry(spec.size)
    reach = LEG_LENGTH * sy + LEG_HALF_WIDTH
    amp = abs(spec.leg_amplitude)
    for hr, hc in HIPS:
        hr, hc = hr * sy, hc * sx
        lowest = hr + reach * (1.0 if amp < np.pi / 2 else 0.0)
        side = reach * np.sin(min(amp, np.pi / 2))
        if lowest >= h or hc - side < 0 or hc + side >= w:
            raise SpecInvalidError(f"leg swing {spec.leg_amplitude:.3f} rad leaves the {h}x{w} frame")
    if spec.bag is not None:
        top, left = spec.bag
        bh, bw = BAG_SIZE
        if top < 0 or left < 0 or top + bh > h or left + bw > w:
            raise SpecInvalidError(f"bag at {spec.bag} leaves the {h}x{w} frame")
    if not 0 <= spec.noise < 0.5:
        raise SpecInvalidError("noise must lie in [0, 0.5)")
    if spec.leg_freq < 0:
        raise SpecInvalidError("leg frequency must be non-negative")


def render_walker(spec, n_frames, rng):
    """Render ``n_frames`` binary frames and their ground-truth region masks.

    Region priority where parts overlap: bag, then legs, then torso (head
    included). Arm pixels belong to no region. Noise flips pixels after the
    masks are taken.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    check_spec(spec)
    h, w = spec.size
    sy, sx = _scale_geometry(spec.size)
    rr, cc = np.mgrid[0:h, 0:w].astype(float)
    rr += 0.5
    cc += 0.5

    hr, hc, rad = HEAD
    head = (rr - hr * sy) ** 2 + (cc - hc * sx) ** 2 <= (rad * min(sy, sx)) ** 2
    tr, tc, ar, ac = TORSO
    torso = ((rr - tr * sy) / (ar * sy)) ** 2 + ((cc - tc * sx) / (ac * sx)) ** 2 <= 1.0
    body = head | torso
    bag = np.zeros((h, w), dtype=bool)
    if spec.bag is not None:
        top, left = spec.bag
        bag[top : top + BAG_SIZE[0], left : left + BAG_SIZE[1]] = True

    frames = np.zeros((n_frames, h, w), dtype=np.uint8)
    legs_m = np.zeros((n_frames, h, w), dtype=bool)
    torso_m = np.zeros_like(legs_m)
    bag_m = np.zeros_like(legs_m)
    leg_len = LEG_LENGTH * sy
    arm_len = ARM_LENGTH * sy
    for t in range(n_frames):
        theta = leg_angle(spec, t)
        legs = np.zeros((h, w), dtype=bool)
        for (r0, c0), sign in zip(HIPS, (1.0, -1.0)):
            legs |= _segment_mask(rr, cc, (r0 * sy, c0 * sx), sign * theta, leg_len, LEG_HALF_WIDTH)
        arms = np.zeros((h, w), dtype=bool)
        for (r0, c0), sign in zip(SHOULDERS, (-1.0, 1.0)):
            arms |= _segment_mask(rr, cc, (r0 * sy, c0 * sx), sign * spec.arm_amplitude * theta, arm_len, ARM_HALF_WIDTH)
        fg = body | legs | arms | bag
        bag_m[t] = bag
        legs_m[t] = legs & ~bag
        torso_m[t] = body & ~legs & ~bag
        if spec.noise > 0:
            fg = fg ^ (rng.random((h, w)) < spec.noise)
        frames[t] = fg
    return frames, RegionMasks(legs_m, torso_m, bag_m)


# ---------------------------------------------------------------- datasets

def draw_identities(n, rng, freq_low=0.03, amp_range=(0.25, 0.55)):
    """Leg parameters for ``n`` identities with frequencies at least MIN_FREQ_SEPARATION apart.

    Frequencies sit on a shuffled grid of pitch 0.0125 with jitter below 0.0025.
    """
    pitch = 0.0125
    slots = rng.permutation(n)
    freqs = freq_low + pitch * slots + rng.uniform(0, pitch - MIN_FREQ_SEPARATION, size=n)
    phases = rng.uniform(0, 2 * np.pi, size=n)
    amps = rng.uniform(amp_range[0], amp_range[1], size=n)
    return [(float(f), float(p), float(a)) for f, p, a in zip(freqs, phases, amps)]


def _bag_position(rng, size):
    h, w = size
    sy, sx = _scale_geometry(size)
    bh, bw = BAG_SIZE
    top = int(round(rng.uniform(20, 28) * sy))
    side = rng.integers(0, 2)
    left = int(round((11 if side == 0 else 27) * sx)) + int(rng.integers(-1, 2))
    return min(max(top, 0), h - bh), min(max(left, 0), w - bw)


def generate_dataset(
    out_dir,
    n_identities=16,
    seqs_per_id=8,
    n_frames=40,
    policy="random",
    seed=0,
    size=(64, 44),
    noise=0.005,
    n_gallery=2,
    n_probe=2,
    bag_rate=0.5,
):
    """Render a dataset to ``out_dir`` and return its manifest.

    Layout: ``silhouettes/<subject>/<condition>/090/NNNN.pgm`` (condition
    ``nm-XX`` or ``bg-XX``), ``regions/<subject>/<condition>/090/NNNN_{legs,torso,bag}.pgm``,
    ``specs.csv`` and ``manifest.csv`` (paths relative to ``out_dir``). Each subject's last ``n_probe``
    sequences are probes and the ``n_gallery`` before them gallery.

    Policies: ``none`` never draws bags; ``random`` gives each sequence a bag
    with probability ``bag_rate`` regardless of identity; ``adversarial``
    gives bags to even-numbered identities in training and to odd-numbered
    identities in gallery/probe.
    """
    if n_identities < 2:
        raise ValueError("need at least two identities")
    if policy not in POLICIES:
        raise ValueError(f"unknown confounder policy {policy!r}; expected one of {POLICIES}")
    if seqs_per_id < 1 or n_frames < 1:
        raise ValueError("need at least one sequence of one frame per identity")
    root = os.path.join(out_dir, "silhouettes")
    regions_root = os.path.join(out_dir, "regions")
    ss = np.random.SeedSequence(seed)
    id_seq, *seq_seeds = ss.spawn(1 + n_identities * seqs_per_id)
    identities = draw_identities(n_identities, np.random.default_rng(id_seq))
    split = gallery_probe_split(n_gallery, n_probe)

    rows, spec_rows = [], []
    for i, (freq, phase, amp) in enumerate(identities):
        subject = f"{i:03d}"
        for k in range(seqs_per_id):
            rng = np.random.default_rng(seq_seeds[i * seqs_per_id + k])
            partition = split(k, seqs_per_id)
            offset = float(rng.uniform(0, 1.0 / freq))
            if policy == "none":
                has_bag = False
            elif policy == "random":
                has_bag = bool(rng.random() < bag_rate)
            else:
                has_bag = (i % 2 == 0) if partition == "train" else (i % 2 == 1)
            bag = _bag_position(rng, size) if has_bag else None
            spec = WalkerSpec(subject, freq, phase, amp, time_offset=offset, bag=bag, size=size, noise=noise)
            frames, masks = render_walker(spec, n_frames, rng)
            condition = f"{'bg' if has_bag else 'nm'}-{k:02d}"
            rel = os.path.join(subject, condition, "090")
            for t in range(n_frames):
                write_pgm(os.path.join(root, rel, f"{t:04d}.pgm"), frames[t] * 255)
                for part in ("legs", "torso", "bag"):
                    write_pgm(os.path.join(regions_root, rel, f"{t:04d}_{part}.pgm"), getattr(masks, part)[t] * 255)
            rows.append(ManifestRow(subject, condition, "090", os.path.join("silhouettes", rel), n_frames, partition))
            spec_rows.append((spec, condition, partition))

    manifest = DatasetManifest(out_dir, rows)
    manifest.write(os.path.join(out_dir, "manifest.csv"))
    write_specs(os.path.join(out_dir, "specs.csv"), spec_rows)
    return manifest


SPEC_FIELDS = (
    "subject", "condition", "view", "partition", "leg_freq", "leg_phase", "leg_amplitude",
    "arm_amplitude", "time_offset", "bag", "bag_top", "bag_left", "noise",
)


def write_specs(path, spec_rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPEC_FIELDS)
        for spec, condition, partition in spec_rows:
            top, left = spec.bag if spec.bag is not None else ("", "")
            w.writerow([
                spec.identity, condition, "090", partition, repr(spec.leg_freq), repr(spec.leg_phase),
                repr(spec.leg_amplitude), repr(spec.arm_amplitude), repr(spec.time_offset),
                int(spec.bag is not None), top, left, repr(spec.noise),
            ])


def read_specs(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def load_regions(out_dir, row, size=None):
    """Ground-truth masks for one manifest row, optionally nearest-resized to ``size``."""
    from dygait.pgm import read_pgm

    base = os.path.join(out_dir, "regions", os.path.relpath(row.path, "silhouettes"))
    parts = {}
    for part in ("legs", "torso", "bag"):
        masks = np.stack([read_pgm(os.path.join(base, f"{t:04d}_{part}.pgm")) > 0 for t in range(row.frames)])
        if size is not None and masks.shape[1:] != tuple(size):
            h, w = masks.shape[1:]
            rows = (np.arange(size[0]) * h) // size[0]
            cols = (np.arange(size[1]) * w) // size[1]
            masks = masks[:, rows][:, :, cols]
        parts[part] = masks
    return RegionMasks(**parts)


def mutual_information(xs, ys):
    """Empirical mutual information (nats) between two discrete label lists."""
    xs, ys = list(xs), list(ys)
    n = len(xs)
    joint, px, py = {}, {}, {}
    for x, y in zip(xs, ys):
        joint[(x, y)] = joint.get((x, y), 0) + 1
        px[x] = px.get(x, 0) + 1
        py[y] = py.get(y, 0) + 1
    return sum(c / n * np.log(c * n / (px[x] * py[y])) for (x, y), c in joint.items())

