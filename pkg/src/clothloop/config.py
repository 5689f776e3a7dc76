"""Runtime config management (default, userconfig and envvars)."""

import ast
import importlib
import typing
from pathlib import Path

import platformdirs
import yaml
from dynaconf import Dynaconf

from clothloop.errors import InputError
from clothloop.util.converter.length import compact_value

# Get the package directory for default settings
package_dir = Path(__file__).parent
default_settings_file = package_dir / "default_settings.toml"

# Get the config directory following XDG standards
config_dir = Path(platformdirs.user_config_dir("clothloop"))

# Define the user config file path
user_config_file = config_dir / "settings.toml"

# Create a default settings.toml if it doesn't exist
try:
    config_dir.mkdir(parents=True, exist_ok=True)
    if not user_config_file.exists():
        user_config_file.write_text("""# Clothloop configuration
# Override defaults from the package here
""")
except OSError:
    # read-only home; package defaults and env vars still apply
    pass

settings = Dynaconf(
    envvar_prefix="CLOTHLOOP",
    settings_files=[
        str(default_settings_file),  # Load package defaults first
        str(user_config_file),  # User settings override defaults
    ],
    environments=True,
)

default_settings = Dynaconf(
    envvar_prefix="CLOTHLOOP",
    settings_files=[
        str(default_settings_file),  # Load package defaults first
    ],
    environments=True,
)


options_file = package_dir / "options.yaml"
LENGTH_CONVERTER = "clothloop.util.converter.length:convert"


def get_options() -> dict:
    """Return the contents of options.yaml."""
    with Path.open(options_file) as f:
        return yaml.safe_load(f)


def get_converter(converter_def: str) -> typing.Callable:
    """Dynamically import a converter function.

    Args:
        converter_def (str): Converter definition in format "module.path:function" or a builtin type like "float" or "int".

    Returns:
        Converter function.
    """
    # Handle built-in types
    if converter_def == "float":
        return float
    if converter_def == "int":
        return int
    if converter_def == "str":
        return str
    if converter_def == "bool":
        return ast.literal_eval

    # Split the definition into module path and function name
    module_name, func_name = converter_def.split(":")

    # Import the module
    module = importlib.import_module(module_name)

    # Get the function from the module
    return getattr(module, func_name)


def apply_options(option_list: dict[str, str | int | float | bool]) -> None:
    """Apply a dict of options to the current settings.

    Args:
        option_list (dict[str, str | int | float | bool]): Dictionary of options to apply.

    Raises:
        InputError: If an option name is unknown.
    """
    options = get_options()
    for key, value in option_list.items():
        name = key.upper()
        if name not in options:
            msg = f"Unknown option {key}; use 'clothloop listopts' to see available options."
            raise InputError(msg)
        settings.set(name, value)


def reset_options() -> None:
    """Drop invoker overrides and reload defaults, user file and env vars."""
    settings.reload()


def convert_settings(settings_dict: dict) -> dict:
    """Convert settings using their defined converters.

    Args:
        settings_dict (dict): The settings dictionary to convert.

    Returns:
        dict: The converted settings dictionary.

    Raises:
        InputError: If a value cannot be converted.
    """
    options = get_options()
    for key in options:
        option_def = options[key]
        if "converter" in option_def and key in settings_dict:
            converter = get_converter(option_def["converter"])
            try:
                settings_dict[key] = converter(settings_dict[key])
            except ValueError as err:
                msg = f"Option {key}: {err}"
                raise InputError(msg) from err
    return settings_dict


def get_settings() -> dict:
    """Get the current settings after converting them.

    Returns:
        dict: The current settings as a dictionary.
    """
    return convert_settings(settings.as_dict())


def get_default_settings() -> dict:
    """Get the default settings after converting them.

    Returns:
        dict: The default settings as a dictionary.
    """
    return convert_settings(default_settings.as_dict())


def option_keys() -> list[str]:
    """Get a list of all available option keys.

    Returns:
        list[str]: List of option keys.
    """
    options = get_options()
    return list(options.keys())


def option_groups() -> dict[str, list[str]]:
    """Option keys grouped by the section comments of the default settings file.

    Returns:
        dict[str, list[str]]: Keys per group, in file order.
    """
    groups: dict[str, list[str]] = {}
    group = "other"
    in_default_section = False
    for raw in default_settings_file.read_text().splitlines():
        line = raw.strip()
        if line == "[default]":
            in_default_section = True
        elif in_default_section and line.startswith("["):
            break
        elif in_default_section and line.startswith("#"):
            group = line.lstrip("# ")
        elif in_default_section and "=" in line:
            groups.setdefault(group, []).append(line.split("=", 1)[0].strip())
    return groups


def format_option_value(key: str, value: object) -> str:
    """Render a converted setting for display; lengths use their shortest unit."""
    if get_options()[key].get("converter") == LENGTH_CONVERTER and isinstance(value, float):
        return compact_value(value)
    if value == "":
        return "(unset)"
    return str(value)


def data_root() -> Path:
    """Directory used when a command is given no ``--out``.

    Returns:
        Path: ``CLOTHLOOP_DATA`` when set, otherwise the platform data directory.
    """
    configured = str(get_settings().get("DATA", "") or "")
    if configured:
        return Path(configured)
    return Path(platformdirs.user_data_dir("clothloop"))
