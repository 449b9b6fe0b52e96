import re
from importlib import metadata
from platform import python_version

__version__ = "0.1.0"


def show_versions() -> str:
    """Python, arwaves and runtime dependency versions, one per line."""
    lines = [f"python: {python_version()}", f"arwaves: {__version__}"]
    try:
        requirements = metadata.requires("arwaves") or []
    except metadata.PackageNotFoundError:
        return "\n".join(lines + ["(arwaves is not installed, dependencies unknown)"])

    for requirement in requirements:
        if "extra ==" in requirement:
            continue
        name = re.split(r"[<>=!~;\[ ]", requirement, maxsplit=1)[0]
        lines.append(f"{name}: {metadata.version(name)}")
    return "\n".join(lines)
