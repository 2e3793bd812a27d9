"""Experiment presets, run manifests and the seed sweep."""

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Dict, NamedTuple, Optional, Tuple

from tqdm import tqdm

import eoilab
from eoilab import trainer
from eoilab.cli._config import SEEDS, format_config, parse_config
from eoilab.errors import ConfigError

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CONFIG = "config.ini"


class Arm(NamedTuple):
    """One curve of a figure: a name and its config overrides."""

    name: str
    overrides: Tuple[str, ...] = ()


class Preset(NamedTuple):
    """A grid of arms times seeds on one task."""

    name: str
    env_kind: str
    learner_kind: str
    arms: Tuple[Arm, ...]
    seeds: int


class RunManifest(NamedTuple):
    """What a run directory holds and how it was produced.

    ``config_hash`` is the SHA-256 of the package version and the INI text,
    so equal hashes mean equal runs on one platform.
    """

    preset: str
    arm: str
    seed: int
    config: str
    config_hash: str
    version: str
    files: Dict[str, str]


BASELINE = Arm("baseline", ("intrinsic_mode=none", "alpha=0", "beta1=0", "beta2=0"))
EOI = Arm("eoi", ("beta1=0", "beta2=0"))
EOI_PD = Arm("eoi_pd", ("beta2=0",))
EOI_MI = Arm("eoi_mi", ("beta1=0",))
EOI_PD_MI = Arm("eoi_pd_mi")
ABLATIONS = (BASELINE, EOI, EOI_PD, EOI_MI, EOI_PD_MI)

ALPHA_GRID = (0.01, 0.05, 0.2, 0.5)


def _with(arm, *overrides, name=None):
    return Arm(name or arm.name, arm.overrides + overrides)


PRESETS = {
    "fig4-pacmen": Preset("fig4-pacmen", "pacmen", "qmix", ABLATIONS, SEEDS["pacmen"]),
    "fig4-windy": Preset(
        "fig4-windy", "windy_maze", "qmix", ABLATIONS, SEEDS["windy_maze"]
    ),
    "fig7-sameinit": Preset(
        "fig7-sameinit",
        "pacmen",
        "qmix",
        (
            EOI,
            EOI_PD_MI,
            _with(EOI, "shared_init=true", name="eoi_sameinit"),
            _with(EOI_PD_MI, "shared_init=true", name="eoi_pd_mi_sameinit"),
        ),
        SEEDS["pacmen"],
    ),
    "fig9-alpha-sweep": Preset(
        "fig9-alpha-sweep",
        "pacmen",
        "actor_critic",
        tuple(Arm(f"alpha_{a}", (f"alpha={a}",)) for a in ALPHA_GRID),
        SEEDS["pacmen"],
    ),
    "fig11-sparse": Preset(
        "fig11-sparse",
        "sparse_pacmen",
        "qmix",
        (
            BASELINE,
            EOI_PD_MI,
            Arm("diayn", ("intrinsic_mode=diayn", "beta1=0", "beta2=0")),
        ),
        SEEDS["sparse_pacmen"],
    ),
    "firefighters": Preset(
        "firefighters",
        "firefighters",
        "actor_critic",
        (
            BASELINE,
            EOI_PD_MI,
            _with(BASELINE, "learner_kind=qmix", name="qmix_baseline"),
            _with(EOI_PD_MI, "learner_kind=qmix", name="qmix_eoi_pd_mi"),
        ),
        SEEDS["firefighters"],
    ),
}


class PlannedRun(NamedTuple):
    """One cell of a preset grid."""

    arm: str
    seed: int
    config: trainer.TrainConfig


def preset(name, /, *, overrides=(), seeds: Optional[int] = None):
    """Every run of a preset, arm by arm and seed by seed.

    ``overrides`` apply to all runs after the arm's own overrides.
    """
    try:
        chosen = PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"preset: unknown preset {name!r}; choose from {sorted(PRESETS)}"
        ) from None
    runs = []
    for arm in chosen.arms:
        for seed in range(chosen.seeds if seeds is None else seeds):
            cfg = parse_config(
                "",
                overrides=(
                    f"env_kind={chosen.env_kind}",
                    f"learner_kind={chosen.learner_kind}",
                    *arm.overrides,
                    *overrides,
                    f"seed={seed}",
                ),
            )
            runs.append(PlannedRun(arm=arm.name, seed=seed, config=cfg))
    return runs


def run_directory(root, preset_name, arm, seed, /):
    """Where a run's files go: ``<root>/<preset>/<arm>/<seed>``."""
    return os.path.join(root, preset_name, arm, str(seed))


def make_manifest(cfg: trainer.TrainConfig, /, *, preset="", arm="") -> RunManifest:
    """Describe a run before it starts."""
    text = format_config(cfg)
    digest = hashlib.sha256(f"{eoilab.__version__}\n{text}".encode("utf-8"))
    return RunManifest(
        preset=preset,
        arm=arm,
        seed=cfg.seed,
        config=text,
        config_hash=digest.hexdigest(),
        version=eoilab.__version__,
        files={
            "config": CONFIG,
            "metrics": "metrics.csv",
            "heatmaps": "heatmaps",
            "learner": os.path.join("checkpoints", "learner.eoi"),
            "classifier": os.path.join("checkpoints", "classifier.eoi"),
            "replay": os.path.join("checkpoints", "replay.eoi"),
        },
    )


def write_manifest(run_dir, manifest: RunManifest, /):
    """Write ``manifest.json`` and ``config.ini`` into a run directory."""
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, MANIFEST), "w") as file:
        json.dump(manifest._asdict(), file, indent=2)
    with open(os.path.join(run_dir, CONFIG), "w") as file:
        file.write(manifest.config)


def read_manifest(run_dir, /) -> RunManifest:
    """Read the manifest of a run directory."""
    with open(os.path.join(run_dir, MANIFEST)) as file:
        return RunManifest(**json.load(file))


def run(cfg: trainer.TrainConfig, run_dir, /, *, preset="", arm=""):
    """Write the manifest, then train."""
    write_manifest(run_dir, make_manifest(cfg, preset=preset, arm=arm))
    return trainer.train(cfg, run_dir=run_dir)


def worker_count() -> int:
    """Size of the sweep worker pool (``EOI_THREADS`` or the CPU count)."""
    value = os.environ.get("EOI_THREADS")
    if value is None:
        return os.cpu_count() or 1
    try:
        count = int(value)
    except ValueError:
        raise ConfigError(f"EOI_THREADS: invalid value {value!r}") from None
    if count < 1:
        raise ConfigError(f"EOI_THREADS: must be at least 1, got {count}")
    return count


def sweep(name, root, /, *, overrides=(), seeds=None, workers=None, progress=True):
    """Run every cell of a preset on a bounded thread pool.

    Returns the run directories in grid order.
    """
    runs = preset(name, overrides=overrides, seeds=seeds)
    workers = worker_count() if workers is None else workers
    directories = [run_directory(root, name, r.arm, r.seed) for r in runs]
    logger.info("Sweeping %s: %d runs on %d workers.", name, len(runs), workers)

    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {
            executor.submit(run, r.config, d, preset=name, arm=r.arm): d
            for r, d in zip(runs, directories)
        }
        with tqdm(total=len(futures), desc=name, disable=not progress) as bar:
            for future in as_completed(futures):
                future.result()
                bar.update(1)
    return directories
