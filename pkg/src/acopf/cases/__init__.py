"""Bundled MATPOWER-format test systems."""

from importlib import resources

from ..grid import parse_matpower_case

AVAILABLE = ("toy2", "case9", "case14", "case39")


def case_text(name):
    """Raw .m file text of a bundled case."""
    if name not in AVAILABLE:
        raise KeyError(f"unknown case {name!r}; available: {AVAILABLE}")
    return resources.files(__package__).joinpath(f"{name}.m").read_text()


def load_case(name):
    """Parse a bundled case into a Network."""
    return parse_matpower_case(case_text(name), name=name)
