"""Aggregation of finished runs across seeds."""

import glob
import os
from typing import List, NamedTuple

import pandas as pd

from eoilab.trainer import METRICS_HEADER

METRICS = METRICS_HEADER[1:]
KEYS = ("preset", "arm", "episode")


class Report(NamedTuple):
    """Curves per arm, a final-point summary and what could not be used.

    ``curves`` has one row per preset, arm and evaluation episode, with a
    ``<metric>_mean`` and a ``<metric>_std`` column per metric and the
    number of contributing seeds. ``long`` holds the same numbers with one
    row per metric.
    """

    curves: pd.DataFrame
    long: pd.DataFrame
    summary: pd.DataFrame
    warnings: List[str]


def find_runs(root, /):
    """All ``metrics.csv`` files below ``root`` as ``(preset, arm, seed, path)``."""
    root = os.path.normpath(root)
    pattern = os.path.join(root, "**", "metrics.csv")
    runs = []
    for path in sorted(glob.glob(pattern, recursive=True)):
        relative = os.path.relpath(os.path.dirname(path), root)
        parts = [] if relative == os.curdir else relative.split(os.sep)
        parts = [""] * (3 - len(parts)) + parts
        preset = os.path.join(*parts[:-2]) if any(parts[:-2]) else ""
        runs.append((preset, parts[-2], parts[-1], path))
    return runs


def read_metrics(path, /) -> pd.DataFrame:
    """Read one metrics file; raise ``ValueError`` if it is unusable."""
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as err:
        raise ValueError(str(err)) from err
    except UnicodeDecodeError as err:
        raise ValueError("not a text file") from err
    if tuple(frame.columns) != METRICS_HEADER:
        raise ValueError(f"unexpected columns {list(frame.columns)}")
    if frame.empty:
        raise ValueError("no rows")
    try:
        frame = frame.astype(float)
    except ValueError as err:
        raise ValueError(f"non-numeric entries ({err})") from err
    if not frame["episode"].is_monotonic_increasing:
        raise ValueError("episodes are not increasing")
    frame["episode"] = frame["episode"].astype(int)
    return frame


def report(root, /) -> Report:
    """Merge the metrics of every run below ``root``.

    Unreadable files and runs without metrics are named in the warnings
    and left out; runs with fewer evaluation points than the rest of
    their arm are named and kept.
    """
    frames, warnings = [], []
    pattern = os.path.join(os.path.normpath(root), "**", "manifest.json")
    for manifest in sorted(glob.glob(pattern, recursive=True)):
        run_dir = os.path.dirname(manifest)
        if not os.path.exists(os.path.join(run_dir, "metrics.csv")):
            warnings.append(f"{run_dir}: missing metrics.csv")

    for preset, arm, seed, path in find_runs(root):
        try:
            frame = read_metrics(path)
        except ValueError as err:
            warnings.append(f"{path}: {err}")
            continue
        frames.append(frame.assign(preset=preset, arm=arm, seed=seed))

    if not frames:
        empty = pd.DataFrame(columns=list(KEYS))
        return Report(curves=empty, long=empty, summary=empty, warnings=warnings)

    runs = pd.concat(frames, ignore_index=True)
    lengths = runs.groupby(["preset", "arm", "seed"]).size()
    longest = lengths.groupby(level=["preset", "arm"]).transform("max")
    for (preset, arm, seed), count in lengths[lengths < longest].items():
        warnings.append(
            f"{os.path.join(preset, arm, seed)}: partial run "
            f"({count} of {longest[(preset, arm, seed)]} evaluation points)"
        )

    grouped = runs.groupby(list(KEYS))[list(METRICS)]
    means = grouped.mean().add_suffix("_mean")
    stds = grouped.std(ddof=0).add_suffix("_std")
    counts = grouped.size().rename("n_seeds")
    curves = pd.concat([means, stds, counts], axis=1).reset_index()

    long = pd.concat(
        [
            curves[list(KEYS)].assign(
                metric=metric,
                mean=curves[f"{metric}_mean"],
                std=curves[f"{metric}_std"],
                n_seeds=curves["n_seeds"],
            )
            for metric in METRICS
        ],
        ignore_index=True,
    )
    final = curves.sort_values("episode").groupby(["preset", "arm"]).tail(1)
    summary = final[
        ["preset", "arm", "episode", "env_reward_mean_mean", "env_reward_mean_std"]
    ].reset_index(drop=True)
    return Report(curves=curves, long=long, summary=summary, warnings=warnings)


def write_report(result: Report, out_dir, /):
    """Write ``curves.csv``, ``curves_long.csv`` and ``summary.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    result.curves.to_csv(os.path.join(out_dir, "curves.csv"), index=False)
    result.long.to_csv(os.path.join(out_dir, "curves_long.csv"), index=False)
    result.summary.to_csv(os.path.join(out_dir, "summary.csv"), index=False)
