"""Exceptions raised by eoilab."""


class ConfigError(ValueError):
    """An invalid or unknown configuration value.

    Raised at startup, before any training happens.
    The command-line front end maps it to exit code 2.
    """


class StructuralError(RuntimeError):
    """A structural violation at runtime.

    Shape mismatches, non-finite gradients, unbalanced classifier batches,
    out-of-range actions and corrupt checkpoints all end up here.
    The command-line front end maps it to exit code 3.

    Parameters
    ----------
    component
        Name of the failing component, e.g. ``"nnkit.adam_step"``.
    message
        Diagnostic.
    """

    def __init__(self, component, message, /):
        self.component = component
        super().__init__(f"[{component}] {message}")
