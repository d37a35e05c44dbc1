"""Command line interface.

Exit codes: 0 success, 1 partial run (some images skipped), 2 invalid
arguments or configuration.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import metrics, severity as sev
from .pipeline import AugmixSpec, augmix_compose, corrupt_dataset
from .imaging import load_image, save_image
from .severity import DEFAULT_TABLE, dump_default_config, load_table


def _parse_kinds(value: str):
    if value == "all":
        return list(sev.KINDS)
    kinds = [k.strip() for k in value.split(",") if k.strip()]
    for kind in kinds:
        if kind not in sev.KINDS:
            raise click.BadParameter(str(sev.UnknownKindError(kind)))
    return kinds


def _parse_severities(value: str):
    out = []
    for part in value.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    for s in out:
        if s not in sev.SEVERITIES:
            raise click.BadParameter(f"severity {s} outside 1..5")
    return sorted(set(out))


def _load_table(path):
    if path is None:
        return DEFAULT_TABLE
    try:
        return load_table(path)
    except Exception as exc:
        raise click.BadParameter(f"bad severity config {path}: {exc}")


@click.group()
def main():
    """Deterministic emulation of pathology image corruptions."""


@main.command()
@click.option("--input", "input_dir", required=True, type=click.Path(exists=True))
@click.option("--output", "output_dir", required=True, type=click.Path())
@click.option("--kinds", default="all", show_default=True,
              help="comma-separated corruption kinds, or 'all'")
@click.option("--severities", default="1-5", show_default=True)
@click.option("--seed", type=int, required=True, help="master seed for the run")
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--tile-size", type=int, default=None,
              help="process images tile-by-tile at this size")
@click.option("--severity-config", type=click.Path(exists=True), default=None,
              envvar="OMNICE_SEVERITY_CONFIG")
@click.option("--include-clean", is_flag=True,
              help="also copy the originals into the output tree")
@click.option("--masks", "masks_dir", type=click.Path(exists=True), default=None,
              help="segmentation masks mirroring the input tree (co-deformed)")
def corrupt(input_dir, output_dir, kinds, severities, seed, workers, tile_size,
            severity_config, include_clean, masks_dir):
    """Corrupt a dataset into output/<kind>/<severity>/<relative path>."""
    table = _load_table(severity_config)
    manifest = corrupt_dataset(
        input_dir, output_dir,
        kinds=_parse_kinds(kinds),
        severities=_parse_severities(severities),
        master_seed=seed,
        workers=workers,
        tile_size=tile_size,
        table=table,
        include_clean=include_clean,
        masks_dir=masks_dir,
    )
    click.echo(f"wrote {len(manifest.records)} images, "
               f"{len(manifest.skipped)} skipped")
    for skip in manifest.skipped:
        click.echo(f"skipped: {skip}", err=True)
    if manifest.skipped:
        sys.exit(1)


@main.command()
@click.option("--input", "input_dir", required=True, type=click.Path(exists=True))
@click.option("--output", "output_dir", required=True, type=click.Path())
@click.option("--width", type=int, default=3, show_default=True)
@click.option("--alpha", type=float, default=1.0, show_default=True)
@click.option("--pool", default="all", show_default=True)
@click.option("--seed", type=int, required=True)
@click.option("--severity-config", type=click.Path(exists=True), default=None,
              envvar="OMNICE_SEVERITY_CONFIG")
def augmix(input_dir, output_dir, width, alpha, pool, seed, severity_config):
    """Augmix-style chain mixing over the corruption op pool."""
    from .pipeline import derive_seed

    table = _load_table(severity_config)
    try:
        spec = AugmixSpec(width=width, alpha=alpha, pool=tuple(_parse_kinds(pool)))
    except ValueError as exc:
        raise click.BadParameter(str(exc))
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    skipped = 0
    count = 0
    for path in sorted(input_dir.rglob("*")):
        if not path.is_file() or path.suffix.lower() not in {
            ".png", ".jpg", ".jpeg", ".tif", ".tiff"
        }:
            continue
        rel = path.relative_to(input_dir).as_posix()
        try:
            image = load_image(path)
            out = augmix_compose(image, spec, derive_seed(seed, rel, "augmix", 0),
                                 table)
            dst = output_dir / Path(rel).with_suffix(".png")
            dst.parent.mkdir(parents=True, exist_ok=True)
            save_image(dst, out)
            count += 1
        except Exception as exc:
            click.echo(f"skipped {rel}: {exc}", err=True)
            skipped += 1
    click.echo(f"wrote {count} images, {skipped} skipped")
    if skipped:
        sys.exit(1)


@main.command("list-kinds")
@click.option("--severity-config", type=click.Path(exists=True), default=None,
              envvar="OMNICE_SEVERITY_CONFIG")
@click.option("--dump-config", is_flag=True,
              help="print the default severity config as TOML instead")
def list_kinds(severity_config, dump_config):
    """Print the 21 corruption identifiers and their parameter schemas."""
    if dump_config:
        click.echo(dump_default_config(), nl=False)
        return
    table = _load_table(severity_config)
    for kind in sev.KINDS:
        parts = [
            f"{name}: {rng.level1}..{rng.level5}"
            for name, rng in table.ranges[kind].items()
        ]
        parts += [f"{name}={value}" for name, value in table.fixed.get(kind, {}).items()]
        click.echo(f"{kind}  [{'; '.join(parts)}]")


@main.command()
@click.option("--predictions", required=True, type=click.Path(exists=True))
@click.option("--baseline-predictions", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--dice", "dice_csv", type=click.Path(exists=True), default=None,
              help="optional per-sample dice CSV: sample_id,kind,severity,dice")
def report(predictions, baseline_predictions, out_dir, dice_csv):
    """Compute CE/mCE/rCE (and dice) from prediction files."""
    try:
        model = metrics.load_predictions(predictions)
        baseline = metrics.load_predictions(baseline_predictions)
    except ValueError as exc:
        raise click.BadParameter(str(exc))

    dice = {}
    if dice_csv:
        import csv as _csv

        with open(dice_csv, newline="", encoding="utf-8") as fh:
            cells = {}
            for row in _csv.DictReader(fh):
                key = (row["kind"], int(row["severity"]))
                cells.setdefault(key, []).append(float(row["dice"]))
        dice = {key: sum(v) / len(v) for key, v in cells.items()}

    rep = metrics.build_report(model, baseline, dice=dice)
    csv_path, txt_path = metrics.emit_report(rep, out_dir)
    click.echo(Path(txt_path).read_text(encoding="utf-8"), nl=False)
    click.echo(f"wrote {csv_path} and {txt_path}")


if __name__ == "__main__":
    main()
