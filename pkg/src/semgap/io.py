"""JSON files validated against the schemas shipped in ``semgap/schemas``."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema
from referencing import Registry, Resource

from .errors import ConfigError


@lru_cache(maxsize=None)
def _registry():
    pairs = []
    for entry in resources.files("semgap").joinpath("schemas").iterdir():
        if entry.name.endswith(".schema.json"):
            doc = json.loads(entry.read_text())
            pairs.append((doc["$id"], Resource.from_contents(doc)))
    return Registry().with_resources(pairs)


def schema(name):
    res = _registry().get(f"{name}.schema.json")
    if res is None:
        raise KeyError(name)
    return res.contents


def validate(obj, name):
    validator = jsonschema.Draft202012Validator(schema(name), registry=_registry())
    errors = sorted(validator.iter_errors(obj), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{name}: {where}: {e.message}")
    return obj


def dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def read_json(path, name=None):
    try:
        with open(path, "rb") as fh:
            obj = json.loads(fh.read())
    except FileNotFoundError as exc:
        raise ConfigError(f"no such file: {path}") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if name is not None:
        validate(obj, name)
    return obj


def write_json(path, obj, name=None):
    if name is not None:
        validate(obj, name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))
