"""Transform task constructors into variants of themselves."""

import inspect


def replace_final_reward(task_fn, /, *, final_reward, kind, short_summary=None):
    """Transform a task constructor into one that pays a different final reward.

    Everything else (layout, horizon, dynamics) is left untouched.
    """

    def task_fn_transformed(**kwargs):
        task_untransformed = task_fn(**kwargs)

        # Probe the reward on a fresh state, so unsuitable layouts
        # fail at construction and not at the last step of an episode.
        from eoilab.envs import _grid  # pylint: disable=import-outside-toplevel

        final_reward(_grid.initial_state(task_untransformed, seed=0))

        return task_untransformed._replace(kind=kind, final_reward=final_reward)

    # Update some problem-specific description.
    # This updates many of the things that functools.wraps updates,
    # but the signatures of the untransformed and the transformed functions differ,
    # which is why functools.wraps would generate the wrong docs.

    # Read the name of the current function (to be added to the disclaimer)
    this_function_name = inspect.currentframe().f_code.co_name
    disclaimer = _disclaimer(
        fun_original=task_fn.__name__,
        fun_wrapper=__name__ + f".{this_function_name}",
        reward=final_reward.__name__,
    )

    # Assign the transformed function to the same module as the
    # untransformed function (makes the transformed function appear in docs)
    task_fn_transformed.__module__ = task_fn.__module__
    task_fn_transformed.__name__ = kind
    task_fn_transformed.__qualname__ = kind

    task_fn_transformed.__doc__ = task_fn.__doc__
    task_fn_transformed = long_description(disclaimer)(task_fn_transformed)

    # If the user desires, replace the short summary in the docstring
    if short_summary is not None:
        task_fn_transformed.__doc__ = replace_short_summary(
            task_fn_transformed.__doc__, short_summary=short_summary
        )

    return task_fn_transformed


def _disclaimer(*, fun_original, fun_wrapper, reward):
    return f"""


    Warning
    -------
    This task has been generated by wrapping the function
    :func:`{fun_original}` through the function
    :func:`{fun_wrapper}`.

    Its final reward is :func:`eoilab.rewards.{reward}`;
    the description below refers to the original task.


    """


def long_description(description, /):
    """Add a long description to the docstring of a function.

    Use this function as a decorator.
    """

    def add_long_description(obj, /):
        """Add a long description to a docstring."""
        obj.__doc__ = construct_docstring(obj)
        return obj

    def construct_docstring(obj, /):
        if obj.__doc__ is None:
            return description
        n = obj.__doc__.find("\n")

        if n == -1:
            return obj.__doc__ + description
        return obj.__doc__[:n] + description + obj.__doc__[n:]

    return add_long_description


def replace_short_summary(docstring, /, *, short_summary):
    """Replace the short summary in a docstring with a new short summary."""
    if docstring is None:
        return short_summary
    n = docstring.find("\n")

    if n == -1:
        return short_summary
    return short_summary + docstring[n:]
