"""Flat key-value configuration files.

Syntax, one entry per line::

    # comment
    include other.cfg          # path relative to the including file; "defaults" = shipped file
    train.lr = 0.05
    experiment.strategies = greedy, cold

Values are parsed as int, float, bool (true/false) or a comma-separated list
when they contain a comma; anything else stays a string. Later entries win.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

from .errors import ConfigError, ParseError

DEFAULTS_NAME = "defaults"


def parse_value(raw: str):
    raw = raw.strip()
    if "," in raw:
        return [parse_value(part) for part in raw.split(",") if part.strip()]
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value) + ("," if len(value) == 1 else "")
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _defaults_text() -> str:
    return resources.files(__package__).joinpath("resources/defaults.cfg").read_text("utf-8")


def parse_config_text(text: str, base_dir: Path | None = None, _seen: tuple = ()) -> dict:
    cfg: dict = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            target = line[len("include "):].strip()
            if target == DEFAULTS_NAME:
                if DEFAULTS_NAME in _seen:
                    raise ParseError("recursive include of defaults", line_no)
                cfg.update(parse_config_text(_defaults_text(), None, _seen + (DEFAULTS_NAME,)))
            else:
                path = (base_dir or Path.cwd()) / target
                cfg.update(load_config(path, _seen))
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", line_no)
        key, raw = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ParseError("empty key", line_no)
        cfg[key] = parse_value(raw)
    return cfg


def load_config(path: str | Path, _seen: tuple = ()) -> dict:
    path = Path(path).resolve()
    if str(path) in _seen:
        raise ConfigError(f"recursive include of {path}")
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), path.parent, _seen + (str(path),))


def load_defaults() -> dict:
    return parse_config_text(_defaults_text(), None, (DEFAULTS_NAME,))


def resolve(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the file at `path`, then explicit overrides."""
    cfg = load_defaults()
    if path is not None:
        cfg.update(load_config(path))
    if overrides:
        cfg.update(overrides)
    return cfg


def section(cfg: dict, prefix: str) -> dict:
    """Keys under `prefix.` with the prefix stripped (nested dots kept)."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {format_value(cfg[k])}\n" for k in sorted(cfg))


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out
