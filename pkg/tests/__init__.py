"""Set the backend implementation for the tests."""
import os
import warnings

import eoilab

if "BACKEND" not in os.environ:
    warnings.warn(
        "No BACKEND environment variable; testing with numpy. "
        "Run the tests with 'BACKEND=numpy pytest' or 'BACKEND=jax pytest' "
        "to choose explicitly."
    )

# Set the array backend for the tests.
eoilab.backend.select(os.environ.get("BACKEND", "numpy").lower())
