"""Batch corruption pipeline: dispatch, datasets, tiled slides, augmix.

Every corruption application is fully determined by a
(kind, severity, seed) spec.  Dataset runs derive each image's seed from
a stable digest of (master seed, relative path, kind, severity), so
outputs are byte-reproducible regardless of worker count or scheduling.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, deform, optics, severity as sev, stains
from .imaging import (
    TIFF_SUFFIXES,
    IMAGE_SUFFIXES,
    extract_tile,
    load_image,
    save_image,
    split_tiles,
    stitch_tiles,
    validate_image,
)
from .severity import CorruptionSpec, SeverityTable


class CorruptionError(RuntimeError):
    """Engine failure annotated with the spec that triggered it."""

    def __init__(self, spec: CorruptionSpec, cause: Exception):
        super().__init__(f"{spec.kind} severity {spec.severity} seed {spec.seed}: {cause}")
        self.spec = spec
        self.__cause__ = cause


def derive_seed(master_seed: int, rel_path: str, kind: str, severity: int) -> int:
    """Stable 64-bit digest of the dataset-run coordinates of one output."""
    payload = "\x1f".join(
        [str(int(master_seed)), rel_path.replace("\\", "/"), kind, str(int(severity))]
    ).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")


def param_digest(kind, severity, seed, table=None) -> str:
    params = sev.params_for(kind, severity, seed, table)
    canonical = json.dumps(params, sort_keys=True, separators=(",", ":"))
    return hashlib.blake2b(canonical.encode("utf-8"), digest_size=8).hexdigest()


def _make_plan(image, spec: CorruptionSpec, table):
    """Compile a spec against one image into a per-region render callable."""
    arr = validate_image(image)
    kind = spec.kind

    if kind in sev.STAIN_KINDS:
        plan = stains.plan_stain_corruption(arr, kind, spec.severity, spec.seed, table)
        return lambda region: plan.render(
            extract_tile(arr, region), (region[0], region[1])
        )

    if kind in sev.COVERAGE_KINDS:
        template = optics.coverage_template(
            arr.shape[:2], kind, spec.severity, spec.seed, table
        )
        return lambda region: optics.apply_coverage_template(
            extract_tile(arr, region), template, (region[0], region[1])
        )

    if kind in sev.DEFORMATION_KINDS:
        template = deform.generate_template(kind, spec.severity, spec.seed, table)
        return lambda region: deform.apply_piecewise_affine(
            arr, template, region
        ).image

    if kind in ("cold-color", "warm-color"):
        return lambda region: optics.apply_color_cast(
            extract_tile(arr, region), kind, spec.severity, spec.seed, table
        )
    if kind in ("overexposure", "underexposure"):
        return lambda region: optics.apply_exposure(
            extract_tile(arr, region), kind, spec.severity, spec.seed, table
        )
    if kind == "defocus":
        kernels = optics.defocus_kernels(spec.severity, table)
        radius = max(k.size // 2 for k in kernels)
        full = arr.astype(np.float32)

        def render(region):
            x, y, w, h = region
            height, width = arr.shape[:2]
            px0, py0 = max(0, x - radius), max(0, y - radius)
            px1, py1 = min(width, x + w + radius), min(height, y + h + radius)
            patch = full[py0:py1, px0:px1]
            out = np.empty((py1 - py0, px1 - px0, 3), dtype=np.float32)
            for ch in range(3):
                out[:, :, ch] = optics._convolve_reflect(
                    patch[:, :, ch], kernels[ch].weights
                )
            out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
            return out[y - py0 : y - py0 + h, x - px0 : x - px0 + w]

        return render

    raise sev.UnknownKindError(kind)


def corrupt_one(image, spec: CorruptionSpec, table: SeverityTable | None = None):
    """Apply one corruption to a whole image; output dimensions equal input."""
    arr = validate_image(image)
    try:
        render = _make_plan(arr, spec, table)
        return render((0, 0, arr.shape[1], arr.shape[0]))
    except (sev.UnknownKindError, CorruptionError):
        raise
    except Exception as exc:
        raise CorruptionError(spec, exc) from exc


def corrupt_slide(image, spec: CorruptionSpec, tile_size: int,
                  mask=None, table: SeverityTable | None = None):
    """Tile-by-tile corruption of a large image.

    Pixelwise kinds produce output identical to whole-image processing;
    defocus runs with a kernel-radius halo per tile; deformation kinds
    evaluate the global template per tile.  A segmentation mask, when
    given, is co-deformed through the identical template.
    """
    arr = validate_image(image)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape[:2] != arr.shape[:2]:
            raise ValueError("mask dimensions do not match the image")

    try:
        height, width = arr.shape[:2]
        grid = split_tiles(width, height, tile_size)

        if spec.kind in sev.DEFORMATION_KINDS:
            template = deform.generate_template(
                spec.kind, spec.severity, spec.seed, table
            )
            tiles = [
                deform.apply_piecewise_affine(arr, template, t).image
                for t in grid.tiles
            ]
            out = stitch_tiles(grid, tiles)
            if mask is not None:
                warped_mask = stitch_tiles(
                    grid, [deform.co_deform_mask(mask, template, t) for t in grid.tiles]
                )
                return out, warped_mask
            return out

        render = _make_plan(arr, spec, table)
        out = stitch_tiles(grid, [render(t) for t in grid.tiles])
        return (out, mask.copy()) if mask is not None else out
    except (sev.UnknownKindError, CorruptionError):
        raise
    except Exception as exc:
        raise CorruptionError(spec, exc) from exc


@dataclass
class ManifestRecord:
    input_path: str
    output_path: str
    kind: str
    severity: int
    seed: int
    param_digest: str
    engine_version: str = __version__

    def to_json(self) -> str:
        return json.dumps(
            {
                "input": self.input_path,
                "output": self.output_path,
                "kind": self.kind,
                "severity": self.severity,
                "seed": self.seed,
                "param_digest": self.param_digest,
                "engine_version": self.engine_version,
            },
            sort_keys=True,
            separators=(",", ":"),
        )


@dataclass
class BenchmarkManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def sorted_records(self):
        return sorted(self.records, key=lambda r: (r.input_path, r.kind, r.severity))

    def write(self, path):
        lines = [r.to_json() for r in self.sorted_records()]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), "utf-8")


def _discover_images(input_dir: Path):
    return sorted(
        p.relative_to(input_dir).as_posix()
        for p in input_dir.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def _output_rel_path(rel: str) -> str:
    p = Path(rel)
    suffix = ".tiff" if p.suffix.lower() in TIFF_SUFFIXES else ".png"
    return p.with_suffix(suffix).as_posix()


def _run_task(args):
    (input_dir, output_dir, rel, kind, severity, master_seed, tile_size,
     table, masks_dir) = args
    seed = derive_seed(master_seed, rel, kind, severity)
    spec = CorruptionSpec(kind, severity, seed)
    image = load_image(Path(input_dir) / rel)
    out_rel = f"{kind}/{severity}/{_output_rel_path(rel)}"
    out_path = Path(output_dir) / out_rel
    out_path.parent.mkdir(parents=True, exist_ok=True)

    mask = None
    mask_path = None
    if masks_dir is not None:
        candidate = Path(masks_dir) / rel
        if candidate.exists():
            mask = np.asarray(load_image(candidate))[:, :, 0]

    if tile_size:
        result = corrupt_slide(image, spec, tile_size, mask=mask, table=table)
        if mask is not None:
            result, warped_mask = result
            mask_path = Path(output_dir) / kind / str(severity) / "masks" / (
                _output_rel_path(rel)
            )
            mask_path.parent.mkdir(parents=True, exist_ok=True)
            save_image(mask_path, np.repeat(warped_mask[:, :, None], 3, axis=2))
    else:
        result = corrupt_one(image, spec, table)
        if mask is not None and spec.kind in sev.DEFORMATION_KINDS:
            template = deform.generate_template(kind, severity, seed, table)
            warped_mask = deform.co_deform_mask(mask, template)
            mask_path = Path(output_dir) / kind / str(severity) / "masks" / (
                _output_rel_path(rel)
            )
            mask_path.parent.mkdir(parents=True, exist_ok=True)
            save_image(mask_path, np.repeat(warped_mask[:, :, None], 3, axis=2))

    save_image(out_path, result)
    return ManifestRecord(
        input_path=rel,
        output_path=out_rel,
        kind=kind,
        severity=severity,
        seed=seed,
        param_digest=param_digest(kind, severity, seed, table),
    )


def corrupt_dataset(input_dir, output_dir, kinds, severities, master_seed,
                    workers: int = 1, tile_size: int | None = None,
                    table: SeverityTable | None = None,
                    include_clean: bool = False,
                    masks_dir=None) -> BenchmarkManifest:
    """Corrupt every image for every (kind, severity); returns the manifest.

    Output tree: ``output_dir/<kind>/<severity>/<relative path>``.  Images
    that fail to load or corrupt are skipped and recorded.
    """
    input_dir = Path(input_dir)
    output_dir = Path(output_dir)
    for kind in kinds:
        if kind not in sev.KINDS:
            raise sev.UnknownKindError(kind)
    rels = _discover_images(input_dir)
    if not rels:
        raise FileNotFoundError(f"no readable images under {input_dir}")

    if include_clean:
        clean_dir = output_dir / "clean"
        for rel in rels:
            dst = clean_dir / _output_rel_path(rel)
            dst.parent.mkdir(parents=True, exist_ok=True)
            save_image(dst, load_image(input_dir / rel))

    tasks = [
        (str(input_dir), str(output_dir), rel, kind, severity, master_seed,
         tile_size, table, str(masks_dir) if masks_dir else None)
        for rel in rels
        for kind in kinds
        for severity in severities
    ]

    manifest = BenchmarkManifest()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_run_task_safe, tasks)
            for outcome in results:
                _collect(manifest, outcome)
    else:
        for task in tasks:
            _collect(manifest, _run_task_safe(task))

    manifest.records = manifest.sorted_records()
    manifest.write(output_dir / "manifest.jsonl")
    return manifest


def _run_task_safe(args):
    try:
        return _run_task(args)
    except Exception as exc:  # skip and report, per dataset contract
        rel, kind, severity = args[2], args[3], args[4]
        return f"{rel} [{kind}/{severity}]: {exc}"


def _collect(manifest, outcome):
    if isinstance(outcome, ManifestRecord):
        manifest.records.append(outcome)
    else:
        manifest.skipped.append(outcome)


@dataclass
class AugmixSpec:
    """Augmix-style chain mixing over the corruption pool."""

    width: int = 3
    depth: int | None = None  # None samples 1..3 per chain
    alpha: float = 1.0
    pool: tuple[str, ...] = sev.KINDS
    severity_range: tuple[int, int] = (1, 5)

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if not self.pool:
            raise ValueError("op pool must be nonempty")
        for kind in self.pool:
            if kind not in sev.KINDS:
                raise sev.UnknownKindError(kind)


def _augmix_chains(arr, spec: AugmixSpec, rng, table):
    """Sample the chain weights, mix weight and corrupted chain images."""
    weights = rng.dirichlet([spec.alpha] * spec.width).astype(np.float32)
    m = np.float32(rng.beta(spec.alpha, spec.alpha))
    lo, hi = spec.severity_range
    chains = []
    for _ in range(spec.width):
        chain = arr
        depth = spec.depth or int(rng.integers(1, 4))
        for _ in range(depth):
            kind = spec.pool[int(rng.integers(0, len(spec.pool)))]
            level = int(rng.integers(lo, hi + 1))
            op_seed = int(rng.integers(0, 2**63))
            chain = corrupt_one(chain, CorruptionSpec(kind, level, op_seed), table)
        chains.append(chain)
    return weights, m, chains


def augmix_compose(image, spec: AugmixSpec, seed: int,
                   table: SeverityTable | None = None,
                   mix_weight: float | None = None) -> np.ndarray:
    """Mix ``width`` corruption chains with the original image.

    Chain weights are Dirichlet(alpha) and the final original/mix weight
    Beta(alpha, alpha); blending happens in intensity space, the Augmix
    convention.  Deterministic under (image, spec, seed).  ``mix_weight``
    overrides the sampled Beta weight (0 reproduces the input exactly).
    """
    arr = validate_image(image)
    rng = np.random.default_rng(np.uint64(seed))
    weights, m, chains = _augmix_chains(arr, spec, rng, table)
    if mix_weight is not None:
        m = np.float32(mix_weight)

    mix = np.zeros(arr.shape, dtype=np.float32)
    for w, chain in zip(weights, chains):
        mix += w * chain.astype(np.float32)
    mixed = (1.0 - m) * arr.astype(np.float32) + m * mix
    return np.clip(np.rint(mixed), 0, 255).astype(np.uint8)
