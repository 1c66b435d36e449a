"""Run reports: flat ``name = value`` text, one metric per line."""

from __future__ import annotations

import os
from typing import Dict, Mapping

from .data import parse_kv_text


def format_value(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_report(items: Mapping[str, object]) -> str:
    lines = []
    for key, value in items.items():
        text = format_value(value)
        if "\n" in text or "=" in key or "\n" in key:
            raise ValueError(f"report entry {key!r} cannot be written on one line")
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def write_report(path, items: Mapping[str, object]) -> None:
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        f.write(format_report(items))


def read_report(path) -> Dict[str, str]:
    with open(path) as f:
        return parse_kv_text(f.read())


def as_float(report: Mapping[str, str], key: str) -> float:
    return float(report[key])
