"""
Reader for flat key=value configuration files
"""

from pathlib import Path
from typing import Dict, Union

from models.exceptions import ConfigError


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """
    Parse `key=value` lines; `#` starts a comment, blank lines are ignored

    Args:
        path (Union[str, Path]): Config file

    Returns:
        Dict[str, str]: Raw string values by key

    Raises:
        ConfigError: If the file is missing, a line has no '=', or a key repeats
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")

    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"line {number}: expected key=value, got '{content}'")
        key, value = (part.strip() for part in content.split("=", 1))
        if not key:
            raise ConfigError(f"line {number}: empty key")
        if key in values:
            raise ConfigError(f"duplicate key: {key}")
        values[key] = value
    return values
