"""Command line, configuration files, experiment presets and reports."""

from eoilab.cli._config import default_config, format_config, parse_config
from eoilab.cli._main import EXIT_CONFIG, EXIT_OK, EXIT_STRUCTURAL, main
from eoilab.cli._presets import (
    PRESETS,
    RunManifest,
    make_manifest,
    preset,
    read_manifest,
    run,
    sweep,
    write_manifest,
)
from eoilab.cli._report import find_runs, read_metrics, report, write_report
