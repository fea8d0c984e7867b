"""Gallery/probe retrieval: embeddings, distance matrices, Rank-k, mAP, mINP and the cross-view protocol.

Distances rank gallery entries in ascending order; equal distances are
broken by ascending gallery index (a stable sort), everywhere.
"""
import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from dygait.model import Embedding, SequenceTooShortError, as_input, network_forward

log = logging.getLogger(__name__)

RANKS = (1, 5, 10, 20)
PROTOCOLS = ("plain", "cross_view")


class EmptyProtocolError(ValueError):
    """Nothing to evaluate: empty gallery or probe set."""


# ---------------------------------------------------------------- embeddings

class EmbeddingSet(list):
    """List of Embedding with uniform strip count and width."""

    def __init__(self, items=()):
        super().__init__(items)
        shapes = {e.strips.shape for e in self}
        if len(shapes) > 1:
            raise ValueError(f"embeddings have mixed shapes {sorted(shapes)}")

    def matrix(self):
        """(N, S*d) stack of flattened embeddings."""
        if not self:
            return np.zeros((0, 0))
        return np.stack([e.flat() for e in self])

    def strips(self):
        return np.stack([e.strips for e in self])

    def labels(self):
        return np.array([e.subject for e in self])

    def views(self):
        return np.array([e.view for e in self])

    def conditions(self):
        return np.array([e.condition for e in self])


def embed_sequence(frames, params, config):
    """Embedding of one whole sequence (T, H, W); no clip sampling."""
    x = as_input(frames, params["hm"].dtype)
    return network_forward(x, params, config).data


def embed_all(sequences, params, config):
    """Embed every sequence in full. Sequences shorter than 3 frames are skipped with a warning."""
    out = []
    for seq in sequences:
        try:
            strips = embed_sequence(seq.frames, params, config)
        except SequenceTooShortError as exc:
            log.warning("skipped %s/%s/%s: %s", seq.subject, seq.condition, seq.view, exc)
            continue
        out.append(Embedding(strips, seq.subject, seq.condition, seq.view))
    return EmbeddingSet(out)


# ---------------------------------------------------------------- distances

def _as_matrix(x):
    if isinstance(x, EmbeddingSet):
        return x.matrix(), x.strips() if x else None
    a = np.asarray(x)
    if a.ndim == 3:
        return a.reshape(len(a), -1), a
    return a, None


def distance_matrix(probe, gallery, per_strip_sum=False, chunk=64):
    """Euclidean distances between flattened (strip-concatenated) embeddings.

    ``per_strip_sum`` sums per-strip Euclidean distances instead. Differences
    are formed explicitly (no ``a^2 + b^2 - 2ab`` shortcut), so the result is
    exactly symmetric and exactly zero on the diagonal of a self-comparison.
    """
    pm, ps = _as_matrix(probe)
    gm, gs = _as_matrix(gallery)
    if pm.shape[1:] != gm.shape[1:]:
        raise ValueError(f"embedding dimension mismatch: probe {pm.shape[1:]} vs gallery {gm.shape[1:]}")
    if per_strip_sum:
        if ps is None or gs is None:
            raise ValueError("per-strip distances need (N, S, d) embeddings")
        if ps.shape[1:] != gs.shape[1:]:
            raise ValueError(f"strip shape mismatch: {ps.shape[1:]} vs {gs.shape[1:]}")
    out = np.empty((len(pm), len(gm)), dtype=np.float64)
    for i in range(0, len(pm), chunk):
        if per_strip_sum:
            diff = ps[i : i + chunk, None].astype(np.float64) - gs[None].astype(np.float64)
            out[i : i + chunk] = np.sqrt((diff * diff).sum(axis=-1)).sum(axis=-1)
        else:
            diff = pm[i : i + chunk, None].astype(np.float64) - gm[None].astype(np.float64)
            out[i : i + chunk] = np.sqrt((diff * diff).sum(axis=-1))
    return out


# ---------------------------------------------------------------- metrics

def ranking(D):
    """Gallery order per probe: ascending distance, ties by ascending gallery index."""
    return np.argsort(D, axis=1, kind="stable")


def _prepare(D, probe_labels, gallery_labels, valid):
    D = np.asarray(D, dtype=np.float64)
    pl, gl = np.asarray(probe_labels), np.asarray(gallery_labels)
    if D.shape != (len(pl), len(gl)):
        raise ValueError(f"distance matrix {D.shape} does not match {len(pl)} probes x {len(gl)} gallery")
    if valid is None:
        valid = np.ones(D.shape, dtype=bool)
    # invalid entries sink to the end while keeping index order among themselves
    order = ranking(np.where(valid, D, np.inf))
    hits = (gl[order] == pl[:, None]) & np.take_along_axis(valid, order, axis=1)
    n_valid = valid.sum(axis=1)
    return order, hits, n_valid


def cmc(D, probe_labels, gallery_labels, ks=RANKS, valid=None):
    """Rank-k accuracies for every k in ``ks``. Returns ``({k: acc}, n_excluded)``.

    Probes with no valid gallery entry are excluded; probes whose label is
    absent from the gallery count as misses. ``valid`` (probe x gallery
    bool) masks out gallery entries per probe.
    """
    _, hits, n_valid = _prepare(D, probe_labels, gallery_labels, valid)
    keep = n_valid > 0
    n_excluded = int((~keep).sum())
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), np.iinfo(np.int64).max)[keep]
    if not keep.any():
        return {k: float("nan") for k in ks}, n_excluded
    return {k: float(np.mean(first < k)) for k in ks}, n_excluded


def rank_k(D, probe_labels, gallery_labels, k, valid=None):
    return cmc(D, probe_labels, gallery_labels, (k,), valid)[0][k]


def _positive_ranks(D, probe_labels, gallery_labels, valid):
    _, hits, n_valid = _prepare(D, probe_labels, gallery_labels, valid)
    return [np.flatnonzero(h) + 1 for h in hits]


def average_precisions(D, probe_labels, gallery_labels, valid=None):
    """Per-probe AP = mean over positives of i / r_i; NaN for probes without a positive."""
    out = []
    for r in _positive_ranks(D, probe_labels, gallery_labels, valid):
        out.append(np.mean(np.arange(1, len(r) + 1) / r) if len(r) else np.nan)
    return np.array(out, dtype=np.float64)


def inverse_negative_penalties(D, probe_labels, gallery_labels, valid=None):
    """Per-probe INP = M / r_M (M positives, r_M the rank of the last); NaN without a positive."""
    out = []
    for r in _positive_ranks(D, probe_labels, gallery_labels, valid):
        out.append(len(r) / r[-1] if len(r) else np.nan)
    return np.array(out, dtype=np.float64)


def _nanmean(a):
    a = a[~np.isnan(a)]
    return float(a.mean()) if len(a) else float("nan")


def mean_average_precision(D, probe_labels, gallery_labels, valid=None):
    """mAP over probes that have at least one positive (the rest are excluded)."""
    return _nanmean(average_precisions(D, probe_labels, gallery_labels, valid))


def mean_inverse_negative_penalty(D, probe_labels, gallery_labels, valid=None):
    return _nanmean(inverse_negative_penalties(D, probe_labels, gallery_labels, valid))


# ---------------------------------------------------------------- protocol

def condition_group(condition):
    """``nm-01`` -> ``NM``: the condition family used for breakdowns."""
    return condition.split("-")[0].upper() if condition else ""


@dataclass
class RankingReport:
    protocol: str
    order: np.ndarray = None  # (n_probe, n_gallery) gallery indices per probe
    sorted_distances: np.ndarray = None
    ranks: dict = field(default_factory=dict)  # k -> accuracy
    mAP: float = float("nan")
    mINP: float = float("nan")
    n_probe: int = 0
    n_gallery: int = 0
    n_excluded: int = 0  # probes with no valid gallery entry
    n_without_positive: int = 0  # probes excluded from mAP/mINP
    per_condition: dict = field(default_factory=dict)  # group -> {k: acc}
    per_view: dict = field(default_factory=dict)  # probe view -> rank-1 (mean over gallery views for cross_view)
    cells: dict = field(default_factory=dict)  # (probe view, gallery view) -> (rank-1, n probes); None when absent
    grand_mean: float = float("nan")
    no_valid_pairs: bool = False

    def metrics_rows(self):
        rows = [(f"rank_{k}", v) for k, v in sorted(self.ranks.items())]
        rows += [("mAP", self.mAP), ("mINP", self.mINP)]
        if self.protocol == "cross_view":
            rows.append(("cross_view_mean_rank_1", self.grand_mean))
        rows += [("n_probe", self.n_probe), ("n_gallery", self.n_gallery), ("n_excluded", self.n_excluded),
                 ("n_without_positive", self.n_without_positive), ("no_valid_pairs", int(self.no_valid_pairs))]
        return rows

    def metrics_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("metric", "value"))
        for name, value in self.metrics_rows():
            w.writerow((name, _fmt(value)))
        return buf.getvalue()

    def cells_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("probe_view", "gallery_view", "rank_1", "n_probe"))
        for (pv, gv), cell in sorted(self.cells.items()):
            w.writerow((pv, gv, "absent", 0) if cell is None else (pv, gv, _fmt(cell[0]), cell[1]))
        return buf.getvalue()

    def conditions_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("condition", *(f"rank_{k}" for k in RANKS)))
        for cond, accs in sorted(self.per_condition.items()):
            w.writerow((cond, *(_fmt(accs.get(k, float("nan"))) for k in RANKS)))
        return buf.getvalue()

    def summary(self):
        lines = [f"protocol: {self.protocol}", f"probes: {self.n_probe}  gallery: {self.n_gallery}"]
        if self.no_valid_pairs:
            lines.append("no valid pairs: every probe/gallery pair shares a view")
            return "\n".join(lines) + "\n"
        lines.append("  ".join(f"Rank-{k}: {100 * v:.2f}%" for k, v in sorted(self.ranks.items())))
        lines.append(f"mAP: {100 * self.mAP:.2f}%  mINP: {100 * self.mINP:.2f}%")
        if self.n_excluded or self.n_without_positive:
            lines.append(f"excluded probes: {self.n_excluded} without gallery, {self.n_without_positive} without positive")
        for cond, accs in sorted(self.per_condition.items()):
            lines.append(f"  {cond or '-'}: Rank-1 {100 * accs[1]:.2f}%")
        if self.protocol == "cross_view":
            for view, acc in sorted(self.per_view.items()):
                lines.append(f"  probe view {view}: mean Rank-1 {100 * acc:.2f}%")
            lines.append(f"cross-view mean Rank-1: {100 * self.grand_mean:.2f}%")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if np.isnan(v) else f"{float(v):.10g}"


def cross_view_protocol(probe, gallery, protocol="cross_view", per_strip_sum=False):
    """Evaluate ``probe`` against ``gallery`` (EmbeddingSets).

    ``plain`` ranks each probe against the whole gallery. ``cross_view``
    additionally scores every (probe view, gallery view) cell with the views
    different, restricting each probe's gallery to the cell's view; the
    per-probe-view mean averages present cells and the grand mean averages
    the per-view means. Aggregate Rank-k/mAP/mINP under ``cross_view`` use
    the gallery minus entries sharing the probe's view.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if not len(probe) or not len(gallery):
        raise EmptyProtocolError(f"empty {'probe' if not len(probe) else 'gallery'} set")
    D = distance_matrix(probe, gallery, per_strip_sum)
    pl, gl = probe.labels(), gallery.labels()
    pv, gv = probe.views(), gallery.views()
    report = RankingReport(protocol, n_probe=len(probe), n_gallery=len(gallery))
    valid = None
    if protocol == "cross_view":
        valid = pv[:, None] != gv[None, :]
        if not valid.any():
            report.no_valid_pairs = True
            return report
    order, _, _ = _prepare(D, pl, gl, valid)
    report.order = order
    report.sorted_distances = np.take_along_axis(np.where(valid, D, np.inf) if valid is not None else D, order, axis=1)
    report.ranks, report.n_excluded = cmc(D, pl, gl, RANKS, valid)
    ap = average_precisions(D, pl, gl, valid)
    report.n_without_positive = int(np.isnan(ap).sum())
    report.mAP = _nanmean(ap)
    report.mINP = _nanmean(inverse_negative_penalties(D, pl, gl, valid))

    groups = np.array([condition_group(c) for c in probe.conditions()])
    for g in sorted(set(groups)):
        sel = groups == g
        report.per_condition[g] = cmc(D[sel], pl[sel], gl, RANKS, None if valid is None else valid[sel])[0]

    if protocol == "plain":
        for v in sorted(set(pv)):
            sel = pv == v
            report.per_view[v] = cmc(D[sel], pl[sel], gl, (1,))[0][1]
        return report

    view_means = []
    for p_view in sorted(set(pv)):
        rows = pv == p_view
        accs = []
        for g_view in sorted(set(gv)):
            if g_view == p_view:
                continue
            cols = gv == g_view
            if not cols.any():
                report.cells[(p_view, g_view)] = None
                continue
            acc = cmc(D[np.ix_(rows, cols)], pl[rows], gl[cols], (1,))[0][1]
            report.cells[(p_view, g_view)] = (acc, int(rows.sum()))
            accs.append(acc)
        if accs:
            report.per_view[p_view] = float(np.mean(accs))
            view_means.append(report.per_view[p_view])
    report.grand_mean = float(np.mean(view_means)) if view_means else float("nan")
    return report


def write_report(report, prefix):
    """Write ``<prefix>metrics.csv``, ``<prefix>cells.csv``, ``<prefix>conditions.csv`` and ``<prefix>summary.txt``."""
    paths = []
    for suffix, text in (
        ("metrics.csv", report.metrics_csv()),
        ("cells.csv", report.cells_csv()),
        ("conditions.csv", report.conditions_csv()),
        ("summary.txt", report.summary()),
    ):
        path = prefix + suffix
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        paths.append(path)
    return paths


# ---------------------------------------------------------------- dumps

def format_embeddings(embeddings):
    """CSV text ``subject,condition,view,v_0,...`` with 9-significant-digit f32 values."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    width = embeddings[0].strips.size if len(embeddings) else 0
    w.writerow(["subject", "condition", "view", *(f"v_{i}" for i in range(width))])
    for e in embeddings:
        vals = np.asarray(e.flat(), dtype=np.float32)
        w.writerow([e.subject, e.condition, e.view, *(f"{v:.9g}" for v in vals.tolist())])
    return buf.getvalue()


def dump_embeddings(embeddings, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_embeddings(embeddings))


def parse_embeddings(text, strip_shape=None):
    """Inverse of ``format_embeddings``. Values come back as float32, bit-exact.

    Strips are reshaped to ``strip_shape`` (S, d) when given, else kept as (1, S*d).
    """
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header[:3] != ["subject", "condition", "view"]:
        raise ValueError("embedding dump must start with subject,condition,view")
    out = []
    for row in reader:
        vals = np.array([np.float32(v) for v in row[3:]], dtype=np.float32)
        strips = vals.reshape(strip_shape) if strip_shape else vals[None]
        out.append(Embedding(strips, row[0], row[1], row[2]))
    return EmbeddingSet(out)


def read_embeddings(path, strip_shape=None):
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_embeddings(fh.read(), strip_shape)
