"""
Modules contains conversion of models and reports into JSON compatible
dictionaries and back.

Objects are stored as ``{"type": "<module>.<Class>", "data": {...}}``,
numpy arrays as ``{"shape": [...], "values": [...]}`` (row-major).
"""
from __future__ import annotations
from typing import Any, Dict, Union
from dataclasses import fields, is_dataclass
from enum import Enum
from pathlib import Path

import json
import os
import warnings

import numpy as np

from .combat import HarmonizationModel
from .errors import ModelFormatError
from .utilities import import_class
from .doc import doc_category


__all__ = (
    "FORMAT_VERSION",
    "convert_to_dict",
    "convert_from_dict",
    "export_model",
    "import_model",
    "dump_json",
)


FORMAT_VERSION = 1
# Only classes of these packages are constructed while importing
TRUSTED_PACKAGES = ("sitewiz.",)


@doc_category("Conversion")
def convert_to_dict(d: Any) -> Any:
    """
    Converts dataclass instances, enums, numpy values and containers
    into a JSON compatible representation.
    """
    if is_dataclass(d) and not isinstance(d, type):
        type_d = type(d)
        data = {f.name: convert_to_dict(getattr(d, f.name)) for f in fields(d)}
        return {"type": f"{type_d.__module__}.{type_d.__name__}", "data": data}

    if isinstance(d, Enum):
        type_d = type(d)
        return {"type": f"{type_d.__module__}.{type_d.__name__}", "value": d.value}

    if isinstance(d, np.ndarray):
        if d.dtype == object:
            return [convert_to_dict(x) for x in d.tolist()]

        return {"shape": list(d.shape), "values": d.ravel().tolist()}

    if isinstance(d, np.generic):
        return d.item()

    if isinstance(d, (list, tuple)):
        return [convert_to_dict(x) for x in d]

    if isinstance(d, dict):
        return {str(k): convert_to_dict(v) for k, v in d.items()}

    return d


@doc_category("Conversion")
def convert_from_dict(d: Any) -> Any:
    """
    Converts a previously converted representation back into objects.

    Raises
    ------------
    ModelFormatError
        Unknown or untrusted types, or malformed matrices.
    """
    if isinstance(d, list):
        return tuple(convert_from_dict(item) for item in d)

    if not isinstance(d, dict):
        return d

    if "shape" in d and "values" in d and len(d) == 2:
        try:
            return np.asarray(d["values"], dtype=float).reshape(d["shape"])
        except (TypeError, ValueError) as exc:
            raise ModelFormatError(f"Malformed matrix of shape {d['shape']}") from exc

    if "type" not in d:
        return {k: convert_from_dict(v) for k, v in d.items()}

    path = d["type"]
    if not isinstance(path, str) or not path.startswith(TRUSTED_PACKAGES):
        raise ModelFormatError(f"Refusing to construct type '{path}'")

    try:
        type_ = import_class(path)
    except (ImportError, AttributeError, ValueError) as exc:
        raise ModelFormatError(f"Unknown type '{path}'") from exc

    if "value" in d:  # Enum
        return type_(d["value"])

    if not is_dataclass(type_):
        raise ModelFormatError(f"Type '{path}' is not serializable")

    names = {f.name for f in fields(type_) if f.init}
    data = {}
    for k, v in d.get("data", {}).items():
        if k in names:
            data[k] = convert_from_dict(v)
        else:
            warnings.warn(f"Parameter {k} does not exist in {type_}, ignoring.")

    try:
        return type_(**data)
    except TypeError as exc:
        raise ModelFormatError(f"Incomplete {type_.__name__}: {exc}") from exc


@doc_category("Conversion")
def dump_json(data: Any, path: Union[str, os.PathLike]):
    """
    Converts ``data`` with :func:`convert_to_dict` and writes it as indented JSON.
    Floats keep their full precision.
    """
    with open(Path(path), "w", encoding="utf-8", newline="\n") as file:
        json.dump(convert_to_dict(data), file, indent=2)
        file.write("\n")


@doc_category("Conversion")
def export_model(model: HarmonizationModel, path: Union[str, os.PathLike]):
    """
    Writes a harmonization model to a JSON file.

    Example
    -----------
    .. code-block:: python

        export_model(fit(train, "age:spline5,sex"), "model.json")
        model = import_model("model.json")
    """
    document = {"format_version": FORMAT_VERSION, **convert_to_dict(model)}
    dump_json(document, path)


@doc_category("Conversion")
def import_model(path: Union[str, os.PathLike]) -> HarmonizationModel:
    """
    Reads a model written by :func:`export_model`.

    Raises
    ------------
    FileNotFoundError
        The file does not exist.
    ModelFormatError
        The file is truncated or corrupt, or has an unsupported ``format_version``.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as file:
            document: Dict[str, Any] = json.load(file)
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"'{path.name}' is not a valid model file: {exc}") from exc

    if not isinstance(document, dict):
        raise ModelFormatError(f"'{path.name}' does not hold a model")

    version = document.pop("format_version", None)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"Unsupported model format version {version!r}, expected {FORMAT_VERSION}")

    try:
        model = convert_from_dict(document)
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"'{path.name}' holds an invalid model: {exc}") from exc

    if not isinstance(model, HarmonizationModel):
        raise ModelFormatError(f"'{path.name}' holds a {type(model).__name__}, not a harmonization model")

    return model
