"""Synthetic desk-scale tablet benchmark plus the transliteration tag parser.

Clouds are sampled from a rounded-box tablet (roughly 28 x 36 x 28 mm)
whose faces carry wedge-shaped indentations. The front and back always
carry a fixed grid of wedges along the writing direction; the generated
tasks differ in what else gets carved. Points are laid down in proportion
to true surface area, the way a uniform scan would land: groove walls add
area, so a densely carved face gathers more of the point budget and the
walls themselves are sampled at full density. The filler grid is
deliberately near-deterministic: at a thousand points per cloud the class
signal is millimetre-scale relief, and randomized filler would bury it
under between-cloud variance.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .pointcloud import PointCloud, write_ply
from .training import DatasetEntry, LabeledDataset, save_manifest

__all__ = [
    "SyntheticSpec",
    "TagQuery",
    "generate",
    "scan_tags",
    "build_manifest",
    "TABLET_HALF_EXTENTS",
]

logger = logging.getLogger(__name__)

TASKS = ("left_imprint", "seal_imprint", "period_proxy")

# tablet half extents in mm: x spans width, y height, z thickness
TABLET_HALF_EXTENTS = (14.0, 18.0, 14.0)
_EDGE_EXPONENT = 8          # rounding sharpness of the box edges
_THICKNESS = 2 * TABLET_HALF_EXTENTS[2]
_DEPTH_RANGE = (0.02 * _THICKNESS, 0.05 * _THICKNESS)
_FACE_MARGIN = 4.0          # keep filler wedges away from rounded edges

# slab holding the left face and anything carved into it, with slack for
# carve depth, edge rounding, and noise; used for bounding-box checks
_A, _B, _C = TABLET_HALF_EXTENTS
LEFT_REGION = {
    "min": [-_A - 1.0, -_B, -_C],
    "max": [-0.7 * _A, _B, _C],
}


@dataclass
class SyntheticSpec:
    task: str
    per_class: int
    points: int
    noise_sigma: float = 0.01
    seed: int = 0
    test_fraction: float = 0.1

    def __post_init__(self):
        if self.task not in TASKS:
            raise InputError(f"unknown task '{self.task}', expected one of {TASKS}")
        if self.per_class < 2:
            raise InputError(f"need at least 2 samples per class, got {self.per_class}")
        if self.points < 64:
            raise InputError(
                f"points per cloud must comfortably exceed the neighbor pool, "
                f"got {self.points}"
            )
        if self.noise_sigma < 0:
            raise InputError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 <= self.test_fraction < 1:
            raise InputError(f"test_fraction must be in [0, 1), got {self.test_fraction}")


@dataclass
class _FacePlan:
    """Everything carved into one face, expressed as a height field over
    that face's (u, v) plane. Wedges are (u0, v0, length, width, depth)
    with the tail along +u; the optional seal is (u0, v0, radius, depth).

    Successive strikes excavate cumulatively, but the total relief bottoms
    out at the band ceiling: the stylus is never pressed past it.
    """

    face: int
    u_axis: int
    v_axis: int
    wedges: list = field(default_factory=list)
    seal: tuple | None = None

    def heights(self, u, v):
        h = np.zeros_like(u, dtype=float)
        for u0, v0, length, width, depth in self.wedges:
            du = u - u0
            profile = 1.0 - du / length - np.abs(v - v0) / width
            h += depth * np.where((du >= 0) & (profile > 0), profile, 0.0)
        if self.seal is not None:
            u0, v0, radius, depth = self.seal
            r2 = (u - u0) ** 2 + (v - v0) ** 2
            h += depth * np.maximum(0.0, 1.0 - r2 / radius**2)
        return np.minimum(h, _DEPTH_RANGE[1])


def _face_axes(face):
    """(axis, sign) of a face's outward normal, faces -x,+x,-y,+y,-z,+z."""
    axis, sign = divmod(face, 2)
    return axis, (1.0 if sign else -1.0)


def _gain_grid(plan):
    """Area element sqrt(1 + |grad h|^2) of the carved face on a ~0.1 mm
    grid, for the sampling density and the effective-area quadrature."""
    extents = np.array(TABLET_HALF_EXTENTS)
    eu, ev = extents[plan.u_axis], extents[plan.v_axis]
    uu = np.linspace(-eu, eu, int(20 * eu) + 1)
    vv = np.linspace(-ev, ev, int(20 * ev) + 1)
    grid_u, grid_v = np.meshgrid(uu, vv, indexing="ij")
    h = plan.heights(grid_u, grid_v)
    gu, gv = np.gradient(h, uu, vv)
    gain = np.sqrt(1.0 + gu**2 + gv**2)
    return uu, vv, gain


def _density_sample(rng, m, uu, vv, gain):
    """m points on the face, accepted in proportion to the area element."""
    gmax = float(gain.max())
    us, vs, have = [], [], 0
    while have < m:
        cu = rng.uniform(uu[0], uu[-1], 4 * m)
        cv = rng.uniform(vv[0], vv[-1], 4 * m)
        iu = np.clip(np.searchsorted(uu, cu) - 1, 0, len(uu) - 2)
        iv = np.clip(np.searchsorted(vv, cv) - 1, 0, len(vv) - 2)
        keep = rng.random(cu.size) * gmax <= gain[iu, iv]
        us.append(cu[keep])
        vs.append(cv[keep])
        have += int(keep.sum())
    return np.concatenate(us)[:m], np.concatenate(vs)[:m]


def _tablet_surface(n, rng, plans=()):
    """Points on the rounded box, weighted by true surface area per face.

    Carved faces hold more surface than their flat footprint, so their
    share of the budget rises by the quadrature factor and their points
    land with the right density on the groove walls.

    Returns (points, face_ids) with faces numbered -x,+x,-y,+y,-z,+z.
    """
    a, b, c = TABLET_HALF_EXTENTS
    extents = np.array([a, b, c])
    flat = np.array([4 * b * c, 4 * b * c, 4 * a * c, 4 * a * c, 4 * a * b, 4 * a * b])
    fields = {}
    eff = flat.astype(float)
    for plan in plans:
        uu, vv, gain = _gain_grid(plan)
        fields[plan.face] = (plan, uu, vv, gain)
        eff[plan.face] = flat[plan.face] * float(gain.mean())

    share = eff / eff.sum() * n
    counts = np.floor(share).astype(int)
    remainder = share - counts
    for i in np.argsort(-remainder)[: n - counts.sum()]:
        counts[i] += 1

    pts = np.empty((n, 3))
    face_ids = np.empty(n, dtype=np.int64)
    start = 0
    for face in range(6):
        axis, sign = _face_axes(face)
        m = counts[face]
        block = np.empty((m, 3))
        block[:, axis] = sign * extents[axis]
        if face in fields:
            plan, uu, vv, gain = fields[face]
            block[:, plan.u_axis], block[:, plan.v_axis] = _density_sample(
                rng, m, uu, vv, gain
            )
        else:
            u_axis, v_axis = [i for i in range(3) if i != axis]
            block[:, u_axis] = rng.uniform(-extents[u_axis], extents[u_axis], m)
            block[:, v_axis] = rng.uniform(-extents[v_axis], extents[v_axis], m)
        pts[start : start + m] = block
        face_ids[start : start + m] = face
        start += m

    # pull edges and corners inward for a gently rounded silhouette
    p = _EDGE_EXPONENT
    radii = (np.abs(pts / extents) ** p).sum(axis=1) ** (-1.0 / p)
    pts *= radii[:, None]

    order = rng.permutation(n)
    return pts[order], face_ids[order]


def _writing_plan(rng, face, count_scale=1.0, size_scale=1.0):
    """A fixed grid of wedges over one writing face, tails along x.

    Layout and sizes are constant up to a fraction-of-a-millimetre jitter;
    the grid is texture shared by every class, not a class signal, so its
    cloud-to-cloud variance is kept far below the carves that do carry
    labels.
    """
    extents = np.array(TABLET_HALF_EXTENTS)
    plan = _FacePlan(face=face, u_axis=0, v_axis=1)
    row_pitch = 7.0 / count_scale
    rows = np.arange(
        -extents[1] + _FACE_MARGIN + 1, extents[1] - _FACE_MARGIN, row_pitch
    )
    slots = np.arange(
        -extents[0] + _FACE_MARGIN + 2, extents[0] - _FACE_MARGIN, row_pitch
    )
    for v0 in rows:
        for u0 in slots:
            plan.wedges.append((
                u0 + rng.uniform(-0.25, 0.25),
                v0 + rng.uniform(-0.25, 0.25),
                3.6 * size_scale,
                1.6 * size_scale,
                min(0.5 * size_scale, 1.0),
            ))
    return plan


def _left_plan(rng, coverage):
    """Dense sign rows over the left face, tails along +y, rotated a
    quarter turn against the front-face writing.

    Columns are tiled at the footprint width and rows at half the tail
    length, so groove walls meet wall-to-wall and most of the face is
    steep relief; ``coverage`` is the fraction of grid cells actually
    struck, so lightly inscribed tablets shade toward the blank class in
    point share while every strike keeps the same local wall geometry.
    """
    a, b, c = TABLET_HALF_EXTENTS
    width = 0.7
    plan = _FacePlan(face=0, u_axis=1, v_axis=2)
    for v0 in np.arange(-c + 2.0, c - 2.0 + 1e-9, 2 * width):
        for u0 in np.arange(-b + 1.6, b - 6.4, 2.7):
            if rng.random() > coverage:
                continue
            plan.wedges.append((
                u0 + rng.uniform(-0.3, 0.3),
                v0 + rng.uniform(-0.15, 0.15),
                rng.uniform(5.2, 5.6),
                width,
                rng.uniform(1.30, 1.38),
            ))
    return plan


def _seal_stamp(rng):
    """Circular stamp pressed into the front face, over the writing."""
    a, b, c = TABLET_HALF_EXTENTS
    u0 = rng.uniform(-a + 9, a - 9)
    v0 = rng.uniform(-b + 9, b - 9)
    radius = rng.uniform(5.0, 8.0)
    depth = rng.uniform(*_DEPTH_RANGE)
    return (u0, v0, radius, depth)


def _class_plan(spec):
    """(name, count, style) per class, names already in sorted order."""
    if spec.task == "left_imprint":
        return [
            ("no_left", spec.per_class, {}),
            ("with_left", spec.per_class, {"left_signs": True}),
        ]
    if spec.task == "seal_imprint":
        return [
            ("no_seal", spec.per_class, {}),
            ("with_seal", spec.per_class, {"seal": True}),
        ]
    rare = math.ceil(0.37 * spec.per_class)
    return [
        (f"period_{letter}", count, {"count_scale": 1 + 0.35 * j, "size_scale": 1 + 0.18 * j})
        for j, (letter, count) in enumerate(
            zip("abcd", (rare, spec.per_class, spec.per_class, spec.per_class))
        )
    ]


def _make_cloud(spec, class_index, sample_index, style):
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed & 0x7FFFFFFFFFFFFFFF, class_index, sample_index])
    )
    count_scale = style.get("count_scale", 1.0)
    size_scale = style.get("size_scale", 1.0)
    plans = [
        _writing_plan(rng, face, count_scale=count_scale, size_scale=size_scale)
        for face in (4, 5)
    ]
    if style.get("left_signs"):
        plans.append(_left_plan(rng, coverage=rng.uniform(0.55, 1.0)))
    if style.get("seal"):
        plans[1].seal = _seal_stamp(rng)

    pts, face_ids = _tablet_surface(spec.points, rng, plans)
    for plan in plans:
        axis, sign = _face_axes(plan.face)
        mask = face_ids == plan.face
        h = plan.heights(pts[mask, plan.u_axis], pts[mask, plan.v_axis])
        pts[np.flatnonzero(mask), axis] -= sign * h

    if spec.noise_sigma > 0:
        pts = pts + rng.normal(0.0, spec.noise_sigma, pts.shape)
    return pts.astype(np.float32)


def _stratified_split(counts, test_fraction, seed):
    """Per class: (train_ids, test_ids) index sets, seeded and reproducible."""
    split = []
    for class_index, count in enumerate(counts):
        n_test = int(round(test_fraction * count))
        if test_fraction > 0:
            n_test = min(count - 1, max(1, n_test))
        perm = np.random.default_rng(
            np.random.SeedSequence([seed & 0x7FFFFFFFFFFFFFFF, class_index, 0x5B])
        ).permutation(count)
        split.append(set(perm[:n_test].tolist()))
    return split


def generate(spec, out_dir):
    """Write the synthetic dataset (clouds, manifest, region sidecar)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = _class_plan(spec)
    names = [name for name, _, _ in plan]
    test_ids = _stratified_split([count for _, count, _ in plan],
                                 spec.test_fraction, spec.seed)

    entries = []
    for class_index, (name, count, style) in enumerate(plan):
        for i in range(count):
            rel = f"{name}_{i:03d}.ply"
            pts = _make_cloud(spec, class_index, i, style)
            write_ply(out_dir / rel, PointCloud(points=pts, source_id=rel))
            split = "test" if i in test_ids[class_index] else "train"
            entries.append(DatasetEntry(path=rel, class_index=class_index, split=split))

    dataset = LabeledDataset(root=out_dir, entries=entries, class_names=names)
    save_manifest(dataset, out_dir / "manifest.tsv")

    regions = {
        "task": spec.task,
        "tablet_half_extents": list(TABLET_HALF_EXTENTS),
        "noise_sigma": spec.noise_sigma,
        "left_region": LEFT_REGION,
    }
    with open(out_dir / "regions.json", "w", encoding="utf-8") as fh:
        json.dump(regions, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return dataset


@dataclass
class TagQuery:
    tag: str

    def __post_init__(self):
        if not self.tag or not self.tag.startswith("@") or len(self.tag) < 2:
            raise InputError(f"tag must be '@' plus a name, got {self.tag!r}")


def scan_tags(text, query):
    """True iff some line starts (after leading-whitespace trim) with the tag
    followed by end-of-line, whitespace, or punctuation."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError:
            logger.warning("undecodable transliteration text, treating as untagged")
            return False
    tag = query.tag
    for line in text.splitlines():
        line = line.lstrip()
        if not line.startswith(tag):
            continue
        rest = line[len(tag):]
        if not rest or rest[0].isspace() or not (rest[0].isalnum() or rest[0] == "_"):
            return True
    return False


def build_manifest(ply_dir, transliteration_dir, query, test_fraction=0.1, seed=0):
    """Pair clouds with transliterations by filename stem, label by tag
    presence, and split stratified. Unmatched clouds are discarded."""
    ply_dir = Path(ply_dir)
    transliteration_dir = Path(transliteration_dir)
    if not ply_dir.is_dir():
        raise InputError(f"no such directory: {ply_dir}")
    if not transliteration_dir.is_dir():
        raise InputError(f"no such directory: {transliteration_dir}")

    texts = {p.stem: p for p in sorted(transliteration_dir.iterdir()) if p.is_file()}
    base = query.tag[1:]
    names = [f"no_{base}", f"with_{base}"]

    labeled = []
    for ply in sorted(ply_dir.glob("*.ply")):
        match = texts.get(ply.stem)
        if match is None:
            logger.warning("no transliteration for '%s', discarding", ply.name)
            continue
        positive = scan_tags(match.read_bytes(), query)
        labeled.append((ply.name, 1 if positive else 0))
    if not labeled:
        raise InputError("no cloud/transliteration pairs matched")

    entries = []
    for class_index in (0, 1):
        members = [rel for rel, cls in labeled if cls == class_index]
        if not members:
            continue
        n_test = int(round(test_fraction * len(members)))
        if test_fraction > 0:
            n_test = min(len(members) - 1, max(1, n_test))
        perm = np.random.default_rng(
            np.random.SeedSequence([seed & 0x7FFFFFFFFFFFFFFF, class_index, 0x5B])
        ).permutation(len(members))
        chosen = set(perm[:n_test].tolist())
        for i, rel in enumerate(members):
            entries.append(
                DatasetEntry(
                    path=rel,
                    class_index=class_index,
                    split="test" if i in chosen else "train",
                )
            )
    entries.sort(key=lambda e: e.path)
    return LabeledDataset(root=ply_dir, entries=entries, class_names=names)
