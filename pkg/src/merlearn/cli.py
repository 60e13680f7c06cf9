"""Command-line entry point: ``merlearn <command>``.

Exit codes: 0 success, 1 unexpected failure, 2 invalid config or input,
3 numeric abort, 4 a gradient check above its threshold.
"""

from __future__ import annotations

import functools
import os
import sys
from pathlib import Path

import click
import numpy as np

from merlearn import config as cfgmod
from merlearn import runner
from merlearn.errors import ConfigError, FormatError, IngestionError, MerError, NumericAbort, SplitError
from merlearn.metrics import render_curves

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_THRESHOLD = 4


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map library errors onto the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            # non-finite values are reported through NumericAbort, not numpy warnings
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(f"invalid config: {exc}", EXIT_CONFIG)
        except (IngestionError, SplitError, FormatError) as exc:
            _fail(str(exc), EXIT_CONFIG)
        except NumericAbort as exc:
            _fail(f"numeric abort: {exc}", EXIT_NUMERIC)
        except MerError as exc:
            _fail(str(exc), 1)
    return wrapper


config_option = click.option("--config", "-c", "source", default=None,
                             help="Config file or preset name (see `merlearn presets`).")
set_option = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                          help="Override one config entry; repeatable.")


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Few-shot meta-learners with mutual-exclusiveness regularization."""


@main.command()
@config_option
@set_option
@click.option("--from-manifest", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Re-run exactly the config recorded in a run manifest.")
@click.option("--out", "out_dir", default=None, help="Run directory (overrides out_dir).")
@click.option("--quiet", is_flag=True)
@_guard
def train(source, overrides, from_manifest, out_dir, quiet):
    """Train one learner and write manifest, metrics CSV and checkpoint."""
    if from_manifest:
        if source or overrides:
            raise ConfigError("--from-manifest", "cannot be combined with --config or --set")
        cfg = runner.config_from_manifest(from_manifest, out_dir)
        manifest = runner.RunManifest.read(from_manifest)
        source, overrides = manifest.notes.get("source") or None, manifest.notes.get("overrides", [])
    else:
        overrides = list(overrides) + ([f"out_dir={out_dir}"] if out_dir else [])
        cfg, overrides = cfgmod.load(source, overrides)

    def progress(r):
        if not quiet and cfg["eval_every"] and r.iteration % cfg["eval_every"] == 0:
            click.echo(f"iter {r.iteration:6d}  task {r.task_loss:.4f}  reg {r.reg_loss:.4f}  "
                       f"train {r.train_acc:.3f}  val {r.val_post_acc:.3f}")

    result = runner.run_training(cfg, overrides, source, progress)
    click.echo(f"{result.status}: {result.iterations} iterations -> {result.out_dir}")


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test")
@click.option("--episodes", "n_episodes", type=int, default=600, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--csv", "csv_path", default=None, help="Append the result row here (default: eval.csv next to the checkpoint).")
@set_option
@_guard
def eval_(checkpoint, split, n_episodes, seed, csv_path, overrides):
    """Evaluate a checkpoint; prints accuracy ± std and appends a CSV row."""
    if n_episodes < 1:
        raise ConfigError("--episodes", "must be >= 1")
    row = runner.evaluate_checkpoint(checkpoint, split, n_episodes, seed, overrides)
    runner.append_eval_row(row, csv_path or Path(checkpoint).with_name("eval.csv"))
    click.echo(runner.format_eval(row))


@main.command()
@config_option
@set_option
@click.option("--grid", "grid_items", multiple=True, required=True, metavar="KEY=V1,V2",
              help="One grid axis; repeat for a product grid.")
@click.option("--out", "out_dir", required=True, help="Sweep directory; cells go to cell-NNN/.")
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="val")
@click.option("--episodes", "n_episodes", type=int, default=None, help="Evaluation episodes (default: test_episodes).")
@_guard
def sweep(source, overrides, grid_items, out_dir, split, n_episodes):
    """Train and evaluate every grid cell; writes sweep.md and sweep.csv."""
    grid = runner.parse_grid(grid_items)
    cfgmod.load(source, overrides)  # fail fast on a bad base config
    rows, metric = runner.run_sweep(source, overrides, grid, out_dir, split, n_episodes, click.echo)
    click.echo((Path(out_dir) / "sweep.md").read_text(), nl=False)
    failed = sum(r.status != "ok" for r in rows)
    if failed:
        click.echo(f"{failed} of {len(rows)} cells failed", err=True)


@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
def gradcheck(seed):
    """Compare analytic gradients with central differences."""
    from merlearn.gradcheck import run_all

    results = run_all(seed)
    width = max(len(r.name) for r in results)
    for r in results:
        click.echo(f"{r.name:<{width}}  {r.error:.3e}  (< {r.tolerance:g})  {'ok' if r.passed else 'FAIL'}")
    bad = [r.name for r in results if not r.passed]
    if bad:
        _fail(f"above threshold: {', '.join(bad)}", EXIT_THRESHOLD)
    click.echo("all checks passed")


@main.command("fetch-omniglot")
@click.option("--root", default=None, help=f"Target directory (default: ${runner.DATA_ENV} or {runner.DEFAULT_DATA_ROOT}).")
@click.option("--url-base", default=runner.OMNIGLOT_BASE_URL, show_default=True)
@_guard
def fetch_omniglot(root, url_base):
    """Download and checksum-verify the Omniglot archives."""
    target = Path(root or os.environ.get(runner.DATA_ENV) or runner.DEFAULT_DATA_ROOT)
    runner.fetch_omniglot(target, url_base, log=click.echo)
    click.echo(f"omniglot ready under {target}")


@main.command("make-fixture")
@click.argument("root", type=click.Path(file_okay=False))
@click.option("--classes", type=int, default=100, show_default=True)
@click.option("--images", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def make_fixture(root, classes, images, seed):
    """Write synthetic glyph classes as an Omniglot-style PNG tree."""
    from merlearn.episodes import write_glyph_tree

    write_glyph_tree(root, classes, images, seed)
    click.echo(f"wrote {classes} classes x {images} images under {root}")


@main.command()
@click.argument("csv_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--columns", required=True, help="Comma-separated metric columns.")
@click.option("--out", "out_path", required=True)
@_guard
def render(csv_path, columns, out_path):
    """Plot metric columns of a metrics CSV as an SVG line chart."""
    render_curves(csv_path, [c.strip() for c in columns.split(",") if c.strip()], out_path)
    click.echo(out_path)


@main.command()
def presets():
    """List the bundled configs."""
    for name in cfgmod.preset_names():
        click.echo(name)


if __name__ == "__main__":
    main()
