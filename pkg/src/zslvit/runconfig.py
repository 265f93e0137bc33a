"""Flat key=value config files, dataclass coercion, and run manifests."""

import dataclasses
import hashlib
import json
import os
import time

from .errors import ConfigError, FormatError


def parse_kv_text(text, source="<config>"):
    out = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{ln}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv(path):
    try:
        with open(path) as fh:
            return parse_kv_text(fh.read(), source=str(path))
    except OSError as e:
        raise FormatError(f"cannot read config file {path}: {e}")


def format_kv(mapping):
    lines = []
    for key in sorted(mapping):
        value = mapping[key]
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_kv(path, mapping):
    with open(path, "w") as fh:
        fh.write(format_kv(mapping))


def _coerce(name, text, ftype):
    try:
        if ftype is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
        if ftype is str:
            return text
        if ftype is tuple:
            text = text.strip()
            if not text:
                return ()
            return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {text!r} as {ftype.__name__}")
    raise ConfigError(f"config key {name!r} has unsupported type {ftype}")


def dataclass_from_kv(cls, mapping):
    """Build a dataclass from string values; unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in mapping.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        default = fields[key].default
        ftype = type(default) if default is not dataclasses.MISSING else str
        if ftype is type(None):
            ftype = str
        kwargs[key] = _coerce(key, text, ftype)
    return cls(**kwargs)


def dataclass_to_kv(obj):
    out = {}
    for f in dataclasses.fields(obj):
        out[f.name] = getattr(obj, f.name)
    return out


def config_hash(mapping):
    """Short stable digest of a flat config mapping."""
    return hashlib.sha256(format_kv(mapping).encode()).hexdigest()[:12]


@dataclasses.dataclass
class RunManifest:
    """Provenance record written once per artifact directory."""

    command: str
    config: dict
    seed: int
    code_version: str
    inputs: list
    outputs: list
    wall_clock_s: float = 0.0

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        payload = dataclasses.asdict(self)
        payload["config"] = {
            k: list(v) if isinstance(v, tuple) else v for k, v in self.config.items()
        }
        path = os.path.join(directory, "manifest.json")
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


class StopWatch:
    def __init__(self):
        self.t0 = time.monotonic()

    def elapsed(self):
        return time.monotonic() - self.t0
