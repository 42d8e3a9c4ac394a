"""Tolerant extraction of JSON payloads from chat-model responses."""
from __future__ import annotations

import json
import re

_FENCE = re.compile(r"```(?:[A-Za-z0-9_-]+)?\s*\n?(.*?)```", re.DOTALL)


def _outermost_braces(text: str) -> str | None:
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    in_string = False
    escaped = False
    for position in range(start, len(text)):
        char = text[position]
        if in_string:
            if escaped:
                escaped = False
            elif char == "\\":
                escaped = True
            elif char == '"':
                in_string = False
            continue
        if char == '"':
            in_string = True
        elif char == "{":
            depth += 1
        elif char == "}":
            depth -= 1
            if depth == 0:
                return text[start : position + 1]
    return None


def extract_json(text: str) -> tuple[object | None, bool]:
    """Parse a response as JSON, repairing common wrapping.

    Returns (value, repaired). A clean parse reports repaired=False; a parse
    that needed fence stripping or brace extraction reports repaired=True;
    an unparseable response returns (None, True). Never raises.
    """
    try:
        return json.loads(text), False
    except (json.JSONDecodeError, TypeError):
        pass
    if not isinstance(text, str):
        return None, True
    for fenced in _FENCE.findall(text):
        try:
            return json.loads(fenced), True
        except json.JSONDecodeError:
            continue
    candidate = _outermost_braces(text)
    if candidate is not None:
        try:
            return json.loads(candidate), True
        except json.JSONDecodeError:
            pass
    return None, True


def coerce_int(value: object) -> int | None:
    """Best-effort integer coercion for ids in model output; bools refused."""
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        text = value.strip()
        if re.fullmatch(r"-?\d+", text):
            return int(text)
    return None


def coerce_number(value: object) -> float | None:
    """Best-effort finite-number coercion for scores; bools refused."""
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        number = float(value)
    elif isinstance(value, str):
        try:
            number = float(value.strip())
        except ValueError:
            return None
    else:
        return None
    if number != number or number in (float("inf"), float("-inf")):
        return None
    return number
