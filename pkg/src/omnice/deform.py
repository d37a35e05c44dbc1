"""Mechanical engine: crack, venetian and fold deformations.

Templates are procedural displacement fields on a 64x64 node mesh over
the unit square, triangulated into cells.  Warping pulls pixels through
each cell's affine map (inverse mapping, bilinear sampling in intensity)
and accumulates contributions in optical density, so folded regions sum
like physically overlapping tissue.  Cells cut by a crack or fold line
are dropped from the mesh; destination pixels no cell reaches are left
white (bare glass).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import severity as sev
from .imaging import od_to_rgb, validate_image

MESH_NODES_PER_SIDE = 64
DEGENERATE_AREA_FRACTION = 1e-9
CRACK_FALLOFF_RADIUS = 0.25
TEMPLATE_FORMAT_HEADER = "omnice-template v1"

# Pixels this close (in squared-pixel edge-function units) to a cell edge
# are resolved by the shared-edge tie-break instead of the sign test.
_EDGE_TOL = 1e-6


@dataclass
class DeformationTemplate:
    """Mesh of source/target node positions plus crack polylines.

    Node coordinates are normalized to [0, 1]^2; ``cells`` indexes node
    triples.  Cells removed along a crack/fold cut are simply absent.
    """

    mesh_nodes_src: np.ndarray  # (N, 2)
    mesh_nodes_dst: np.ndarray  # (N, 2)
    cells: np.ndarray  # (M, 3) int
    crack_polylines: list[np.ndarray] = field(default_factory=list)
    rotation: float = 0.0

    def validate(self):
        src, dst = self.mesh_nodes_src, self.mesh_nodes_dst
        if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
            raise ValueError("src/dst node lists must both be (N, 2)")
        if self.cells.min() < 0 or self.cells.max() >= src.shape[0]:
            raise ValueError("cells reference invalid node indices")
        a, b, c = (src[self.cells[:, i]] for i in range(3))
        area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (
            b[:, 1] - a[:, 1]
        ) * (c[:, 0] - a[:, 0])
        if not (np.all(area2 > 0) or np.all(area2 < 0)):
            raise ValueError("src mesh contains inverted triangles")

    def is_identity(self) -> bool:
        full_cells = 2 * (MESH_NODES_PER_SIDE - 1) ** 2
        return self.cells.shape[0] == full_cells and np.array_equal(
            self.mesh_nodes_src, self.mesh_nodes_dst
        )


@dataclass
class WarpResult:
    image: np.ndarray  # uint8 RGB
    overlap_mask: np.ndarray  # int16 contributing-cell count per pixel
    gap_mask: np.ndarray  # bool, true where no cell maps
    skipped_cells: int = 0
    od: np.ndarray | None = None  # accumulated density before quantization


def _base_mesh():
    u = np.linspace(0.0, 1.0, MESH_NODES_PER_SIDE)
    xx, yy = np.meshgrid(u, u)
    nodes = np.stack([xx.ravel(), yy.ravel()], axis=1)
    n = MESH_NODES_PER_SIDE
    idx = np.arange(n * n).reshape(n, n)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    cells = np.concatenate(
        [np.stack([a, b, c], axis=1), np.stack([d, c, b], axis=1)], axis=0
    )
    return nodes, cells


def _rotate(points, angle, center=(0.5, 0.5)):
    ca, sa = np.cos(angle), np.sin(angle)
    p = np.asarray(points, dtype=np.float64) - center
    return np.stack(
        [p[:, 0] * ca - p[:, 1] * sa, p[:, 0] * sa + p[:, 1] * ca], axis=1
    ) + center


def _polyline_field(nodes, poly):
    """Distance, side (+1 left / -1 right) and left normal of the nearest segment."""
    a = poly[:-1]
    seg = poly[1:] - a
    seg_len2 = np.maximum((seg**2).sum(axis=1), 1e-12)
    # (N, S) projections of each node on each segment
    diff = nodes[:, None, :] - a[None, :, :]
    t = np.clip((diff * seg[None, :, :]).sum(axis=2) / seg_len2[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * seg[None, :, :]
    d2 = ((nodes[:, None, :] - closest) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)
    rows = np.arange(nodes.shape[0])
    dist = np.sqrt(d2[rows, nearest])
    seg_n = seg[nearest]
    seg_n = seg_n / np.sqrt(np.maximum((seg_n**2).sum(axis=1), 1e-12))[:, None]
    normal = np.stack([-seg_n[:, 1], seg_n[:, 0]], axis=1)  # left normal
    rel = nodes - closest[rows, nearest]
    side = np.where((rel * normal).sum(axis=1) >= 0, 1.0, -1.0)
    return dist, side, normal


def _cut_cells(cells, signed_dist):
    """Drop cells whose nodes straddle the cut (sign change across the line)."""
    sd = signed_dist[cells]
    crossed = (sd.max(axis=1) > 0) & (sd.min(axis=1) < 0)
    return cells[~crossed]


def generate_crack_template(severity, seed, table=None) -> DeformationTemplate:
    """Jagged polyline across the domain; sides separate to open a gap."""
    params = sev.params_for("crack", severity, seed, table)
    gap = params["gap_width"]
    rng = np.random.default_rng(np.uint64(seed))
    rotation = rng.uniform(0.0, 2.0 * np.pi)

    xs = np.linspace(-0.25, 1.25, 25)
    ys = 0.5 + np.clip(np.cumsum(rng.normal(0.0, 0.035, size=xs.size)), -0.2, 0.2)
    poly = _rotate(np.stack([xs, ys], axis=1), rotation)

    nodes, cells = _base_mesh()
    dist, side, normal = _polyline_field(nodes, poly)
    falloff = np.clip(1.0 - dist / CRACK_FALLOFF_RADIUS, 0.0, None) ** 2
    disp = (side * falloff * (gap / 2.0))[:, None] * normal
    dst = nodes + disp
    cells = _cut_cells(cells, side * dist)
    return DeformationTemplate(nodes, dst, cells, [poly], rotation)


def generate_venetian_template(severity, seed, table=None) -> DeformationTemplate:
    """Parallel strips with alternating compress/stretch displacement."""
    params = sev.params_for("venetian", severity, seed, table)
    beta = params["area_fraction"]
    amplitude = params["amplitude"]
    period = params["period"]
    rng = np.random.default_rng(np.uint64(seed))
    rotation = rng.uniform(0.0, 2.0 * np.pi)
    normal = np.array([np.cos(rotation), np.sin(rotation)])

    nodes, cells = _base_mesh()
    dst = nodes.copy()
    if beta > 0 and amplitude > 0:
        t = nodes @ normal
        u = rng.uniform(0.0, max(1e-9, 1.0 - beta))
        lo = np.quantile(t, u)
        hi = np.quantile(t, min(1.0, u + beta))
        ramp = 0.02
        envelope = np.clip(
            np.minimum((t - lo) / ramp, (hi - t) / ramp), 0.0, 1.0
        )
        wave = amplitude * np.sin(2.0 * np.pi * (t - lo) / period)
        dst = nodes + (envelope * wave)[:, None] * normal[None, :]
    return DeformationTemplate(nodes, dst, cells, [], rotation)


def venetian_covered_fraction(template: DeformationTemplate) -> float:
    """Fraction of mesh nodes displaced by the strip set (test hook)."""
    moved = np.any(template.mesh_nodes_src != template.mesh_nodes_dst, axis=1)
    return float(moved.mean())


def generate_fold_template(severity, seed, table=None) -> DeformationTemplate:
    """One side of a line slides over the other, overlapping by the band width."""
    params = sev.params_for("fold", severity, seed, table)
    width = params["band_width"]
    rng = np.random.default_rng(np.uint64(seed))
    rotation = rng.uniform(0.0, 2.0 * np.pi)
    normal = np.array([np.cos(rotation), np.sin(rotation)])
    center = np.array([0.5, 0.5]) + rng.uniform(-0.15, 0.15, size=2)

    nodes, cells = _base_mesh()
    d = (nodes - center) @ normal
    dst = nodes - np.where(d > 0, width, 0.0)[:, None] * normal[None, :]
    cells = _cut_cells(cells, d)
    return DeformationTemplate(nodes, dst, cells, [], rotation)


def _node_pixels(nodes, width, height):
    # Unit square spans the pixel grid edge-to-edge ([-0.5, W-0.5]) so no
    # pixel center sits exactly on the outer mesh boundary.
    out = np.empty_like(nodes)
    out[:, 0] = nodes[:, 0] * width - 0.5
    out[:, 1] = nodes[:, 1] * height - 0.5
    return out


def _edge_fn(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _edge_accept(ax, ay, bx, by):
    # Antisymmetric tie-break: exactly one of an edge and its reverse
    # accepts pixels lying exactly on it.
    dx, dy = bx - ax, by - ay
    return (dy < 0) | ((dy == 0) & (dx > 0))


def _rasterize(template: DeformationTemplate, width, height, region=None):
    """Yield (dst_flat_idx, src_x, src_y) covered-pixel batches in cell order.

    ``region`` restricts output to the (x, y, w, h) window of the frame;
    indices are relative to that window.  Accumulation order is fixed by
    cell order, so results are independent of any outer scheduling.
    """
    rx, ry, rw, rh = region if region is not None else (0, 0, width, height)
    src = _node_pixels(template.mesh_nodes_src, width, height)
    dst = _node_pixels(template.mesh_nodes_dst, width, height)
    tri = template.cells

    v0, v1, v2 = dst[tri[:, 0]], dst[tri[:, 1]], dst[tri[:, 2]]
    s0, s1, s2 = src[tri[:, 0]], src[tri[:, 1]], src[tri[:, 2]]
    area2 = _edge_fn(v0[:, 0], v0[:, 1], v1[:, 0], v1[:, 1], v2[:, 0], v2[:, 1])

    degenerate = np.abs(area2) < DEGENERATE_AREA_FRACTION * width * height
    skipped = int(degenerate.sum())

    # Orient every destination triangle positively for rasterization
    # (fold cells arrive inverted); swap source vertices in lockstep.
    flip = area2 < 0
    v1f = np.where(flip[:, None], v2, v1)
    v2f = np.where(flip[:, None], v1, v2)
    s1f = np.where(flip[:, None], s2, s1)
    s2f = np.where(flip[:, None], s1, s2)
    v1, v2, s1, s2 = v1f, v2f, s1f, s2f
    area2 = np.abs(area2)

    x0 = np.maximum(np.ceil(np.minimum.reduce([v0[:, 0], v1[:, 0], v2[:, 0]])), rx)
    x1 = np.minimum(
        np.floor(np.maximum.reduce([v0[:, 0], v1[:, 0], v2[:, 0]])), rx + rw - 1
    )
    y0 = np.maximum(np.ceil(np.minimum.reduce([v0[:, 1], v1[:, 1], v2[:, 1]])), ry)
    y1 = np.minimum(
        np.floor(np.maximum.reduce([v0[:, 1], v1[:, 1], v2[:, 1]])), ry + rh - 1
    )
    keep = (~degenerate) & (x1 >= x0) & (y1 >= y0)

    order = np.nonzero(keep)[0]
    if order.size == 0:
        return skipped, iter(())

    bw = (x1 - x0 + 1).astype(np.int64)
    bh = (y1 - y0 + 1).astype(np.int64)

    def batches():
        # Chunk triangles so padded bounding boxes stay a bounded-size block.
        budget = 4_000_000
        start = 0
        while start < order.size:
            stop = start
            pw = ph = 1
            while stop < order.size:
                i = order[stop]
                nw, nh = max(pw, bw[i]), max(ph, bh[i])
                if (stop - start + 1) * nw * nh > budget and stop > start:
                    break
                pw, ph = nw, nh
                stop += 1
            idx = order[start:stop]
            start = stop

            gx0 = x0[idx][:, None, None]
            gy0 = y0[idx][:, None, None]
            px = gx0 + np.arange(pw)[None, None, :]
            py = gy0 + np.arange(ph)[None, :, None]
            inb = (px <= x1[idx][:, None, None]) & (py <= y1[idx][:, None, None])

            a, b, c = v0[idx], v1[idx], v2[idx]
            e0 = _edge_fn(
                b[:, 0, None, None], b[:, 1, None, None],
                c[:, 0, None, None], c[:, 1, None, None], px, py,
            )
            e1 = _edge_fn(
                c[:, 0, None, None], c[:, 1, None, None],
                a[:, 0, None, None], a[:, 1, None, None], px, py,
            )
            e2 = _edge_fn(
                a[:, 0, None, None], a[:, 1, None, None],
                b[:, 0, None, None], b[:, 1, None, None], px, py,
            )
            acc0 = _edge_accept(b[:, 0], b[:, 1], c[:, 0], c[:, 1])[:, None, None]
            acc1 = _edge_accept(c[:, 0], c[:, 1], a[:, 0], a[:, 1])[:, None, None]
            acc2 = _edge_accept(a[:, 0], a[:, 1], b[:, 0], b[:, 1])[:, None, None]

            def _cover(e, acc):
                return (e > _EDGE_TOL) | ((np.abs(e) <= _EDGE_TOL) & acc)

            inside = inb & _cover(e0, acc0) & _cover(e1, acc1) & _cover(e2, acc2)
            if not inside.any():
                continue

            t_idx, yy, xx = np.nonzero(inside)
            inv = 1.0 / area2[idx][t_idx]
            w0 = e0[inside] * inv
            w1 = e1[inside] * inv
            w2 = 1.0 - w0 - w1
            sa, sb, sc = s0[idx][t_idx], s1[idx][t_idx], s2[idx][t_idx]
            sx = w0 * sa[:, 0] + w1 * sb[:, 0] + w2 * sc[:, 0]
            sy = w0 * sa[:, 1] + w1 * sb[:, 1] + w2 * sc[:, 1]
            dpx = (gx0[t_idx, 0, 0] + xx - rx).astype(np.int64)
            dpy = (gy0[t_idx, 0, 0] + yy - ry).astype(np.int64)
            yield dpy * rw + dpx, sx, sy

    return skipped, batches()


def _bilinear(image_f, sx, sy):
    h, w = image_f.shape[:2]
    sx = np.clip(sx, 0.0, w - 1.000001)
    sy = np.clip(sy, 0.0, h - 1.000001)
    ix = sx.astype(np.int64)
    iy = sy.astype(np.int64)
    fx = (sx - ix).astype(np.float32)[:, None]
    fy = (sy - iy).astype(np.float32)[:, None]
    tl = image_f[iy, ix]
    tr = image_f[iy, ix + 1]
    bl = image_f[iy + 1, ix]
    br = image_f[iy + 1, ix + 1]
    top = tl + fx * (tr - tl)
    bot = bl + fx * (br - bl)
    return top + fy * (bot - top)


def apply_piecewise_affine(image, template: DeformationTemplate, region=None,
                           i0: float = 255.0) -> WarpResult:
    """Warp an image through a deformation template.

    Bilinear sampling happens in intensity; contributions accumulate in
    optical density so overlapping cells sum like stacked tissue.  Pixels
    no cell reaches stay white.  ``region`` renders only an (x, y, w, h)
    window of the output frame.
    """
    arr = validate_image(image)
    template.validate()
    height, width = arr.shape[:2]
    rx, ry, rw, rh = region if region is not None else (0, 0, width, height)

    if template.is_identity():
        out = arr[ry : ry + rh, rx : rx + rw].copy()
        return WarpResult(
            out,
            np.ones((rh, rw), dtype=np.int16),
            np.zeros((rh, rw), dtype=bool),
            od=-np.log10(
                np.maximum(out.astype(np.float64), 1.0) / i0
            ),
        )

    pad = arr.astype(np.float32)
    od_acc = np.zeros((rh * rw, 3), dtype=np.float64)
    count = np.zeros(rh * rw, dtype=np.int64)
    skipped, batches = _rasterize(template, width, height, (rx, ry, rw, rh))
    npix = rh * rw
    for flat_idx, sx, sy in batches:
        sampled = _bilinear(pad, sx, sy)
        od = -np.log10(np.maximum(sampled, 1.0) / np.float32(i0))
        for ch in range(3):
            od_acc[:, ch] += np.bincount(
                flat_idx, weights=od[:, ch], minlength=npix
            )
        count += np.bincount(flat_idx, minlength=npix)

    out = od_to_rgb(od_acc.reshape(rh, rw, 3).astype(np.float32), i0)
    overlap = count.reshape(rh, rw).astype(np.int16)
    gap = overlap == 0
    return WarpResult(out, overlap, gap, skipped, od=od_acc.reshape(rh, rw, 3))


def co_deform_mask(mask, template: DeformationTemplate, region=None) -> np.ndarray:
    """Apply the identical geometric transform to a label mask.

    Nearest-neighbor sampling; overlaps resolve foreground-wins (maximum
    label) and gaps become background (0).
    """
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError("mask must be a 2-D label image")
    template.validate()
    height, width = arr.shape
    rx, ry, rw, rh = region if region is not None else (0, 0, width, height)

    if template.is_identity():
        return arr[ry : ry + rh, rx : rx + rw].copy()

    out = np.zeros(rh * rw, dtype=arr.dtype)
    _, batches = _rasterize(template, width, height, (rx, ry, rw, rh))
    for flat_idx, sx, sy in batches:
        ix = np.clip(np.rint(sx), 0, width - 1).astype(np.int64)
        iy = np.clip(np.rint(sy), 0, height - 1).astype(np.int64)
        np.maximum.at(out, flat_idx, arr[iy, ix])
    return out.reshape(rh, rw)


def generate_template(kind, severity, seed, table=None) -> DeformationTemplate:
    if kind == "crack":
        return generate_crack_template(severity, seed, table)
    if kind == "venetian":
        return generate_venetian_template(severity, seed, table)
    if kind == "fold":
        return generate_fold_template(severity, seed, table)
    raise sev.UnknownKindError(kind)


def save_template(path, template: DeformationTemplate) -> None:
    template.validate()
    lines = [TEMPLATE_FORMAT_HEADER, f"rotation {float(template.rotation)!r}"]
    lines.append(f"nodes {template.mesh_nodes_src.shape[0]}")
    for (sx, sy), (dx, dy) in zip(
        template.mesh_nodes_src, template.mesh_nodes_dst
    ):
        lines.append(f"{float(sx)!r} {float(sy)!r} {float(dx)!r} {float(dy)!r}")
    lines.append(f"cells {template.cells.shape[0]}")
    for a, b, c in template.cells:
        lines.append(f"{a} {b} {c}")
    lines.append(f"polylines {len(template.crack_polylines)}")
    for poly in template.crack_polylines:
        lines.append(f"polyline {poly.shape[0]}")
        for x, y in poly:
            lines.append(f"{float(x)!r} {float(y)!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_template(path) -> DeformationTemplate:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != TEMPLATE_FORMAT_HEADER:
        raise ValueError(f"not a deformation template file (expected "
                         f"{TEMPLATE_FORMAT_HEADER!r} header)")
    pos = 1
    rotation = float(lines[pos].split()[1]); pos += 1
    n = int(lines[pos].split()[1]); pos += 1
    node_rows = [list(map(float, lines[pos + i].split())) for i in range(n)]
    pos += n
    nodes = np.asarray(node_rows)
    src, dst = nodes[:, :2], nodes[:, 2:]
    m = int(lines[pos].split()[1]); pos += 1
    cells = np.asarray(
        [list(map(int, lines[pos + i].split())) for i in range(m)], dtype=np.int64
    )
    pos += m
    p = int(lines[pos].split()[1]); pos += 1
    polylines = []
    for _ in range(p):
        k = int(lines[pos].split()[1]); pos += 1
        polylines.append(
            np.asarray([list(map(float, lines[pos + i].split())) for i in range(k)])
        )
        pos += k
    template = DeformationTemplate(src, dst, cells, polylines, rotation)
    template.validate()
    return template
