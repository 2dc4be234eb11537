"""INI-style run configuration files.

A train config looks like::

    [train]
    steps = 2000
    path = tagc

    [compression]
    theta = 80
    ratio = 2

    [model]
    layers = 2

Sections and keys are fixed. Every problem is reported as ``file:line: message``
so a broken config can be fixed without guessing.
"""
from __future__ import annotations

import configparser
import re
from pathlib import Path

from tagc.hook import CompressionConfig
from tagc.trainer.experiment import TrainRun
from tagc.trainer.model import TinyModelConfig


class ConfigFileError(ValueError):
    def __init__(self, path: str, line: int | None, message: str):
        self.path, self.line = path, line
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {message}")


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


SCHEMA = {
    "train": {
        "seed": int,
        "steps": int,
        "batch_size": int,
        "seq_len": int,
        "lr": float,
        "optimizer": str,
        "weight_decay": float,
        "path": str,
        "eval_every": int,
        "eval_batches": int,
    },
    "world": {"world_size": int, "mode": str},
    "compression": {
        "theta": float,
        "ratio": int,
        "index_width": int,
        "policy": str,
        "seed": int,
        "rows": int,
        "include_out_proj": _bool,
        "allow_estimation": _bool,
        "min_segment": int,
    },
    "model": {
        "layers": int,
        "d_model": int,
        "heads": int,
        "ffn_mult": int,
        "vocab": int,
        "context": int,
        "untied_head": _bool,
    },
}

_SECTION = re.compile(r"^\s*\[([^\]]+)\]")
_KEY = re.compile(r"^\s*([^=:\s#;][^=:]*?)\s*[=:]")


def _line_map(text: str) -> dict:
    """``(section, key) -> line`` plus ``(section, None) -> header line``."""
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        if raw.lstrip().startswith(("#", ";")):
            continue
        m = _SECTION.match(raw)
        if m:
            section = m.group(1).strip()
            lines.setdefault((section, None), no)
            continue
        m = _KEY.match(raw)
        if m and section is not None and not raw[:1].isspace():
            lines.setdefault((section, m.group(1).strip().lower()), no)
    return lines


def parse_config(text: str, path: str = "<config>") -> dict:
    """Parse and type-check a config; returns ``{section: {key: value}}``."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=path)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigFileError(path, exc.lineno, "key outside any [section]") from None
    except configparser.ParsingError as exc:
        line, _ = exc.errors[0]
        raise ConfigFileError(path, line, "cannot parse line") from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigFileError(path, exc.lineno, f"duplicate key {exc.option!r}") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigFileError(path, exc.lineno, f"duplicate section [{exc.section}]") from None
    except configparser.Error as exc:
        raise ConfigFileError(path, None, str(exc)) from None

    lines = _line_map(text)
    out: dict = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigFileError(path, lines.get((section, None)), f"unknown section [{section}]")
        values = {}
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            kind = SCHEMA[section].get(key)
            if kind is None:
                raise ConfigFileError(path, line, f"unknown key {key!r} in [{section}]")
            try:
                values[key] = kind(raw.strip())
            except ValueError as exc:
                raise ConfigFileError(path, line, f"bad value for {key}: {exc}") from None
        out[section] = values
    out["_lines"] = lines
    return out


def _build(cls, values: dict, path: str, lines: dict, section: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        # point at the first key of the section, or its header
        keyed = [lines[(section, k)] for k in values if (section, k) in lines]
        line = min(keyed) if keyed else lines.get((section, None))
        raise ConfigFileError(path, line, f"invalid [{section}]: {exc}") from None


def model_config(parsed: dict, path: str = "<config>") -> TinyModelConfig:
    return _build(TinyModelConfig, parsed.get("model", {}), path, parsed["_lines"], "model")


def compression_config(parsed: dict, path: str = "<config>") -> CompressionConfig | None:
    if "compression" not in parsed:
        return None
    return _build(CompressionConfig, parsed["compression"], path, parsed["_lines"], "compression")


def train_run(parsed: dict, path: str = "<config>") -> TrainRun:
    values = dict(parsed.get("train", {}))
    values.update(parsed.get("world", {}))
    values["model"] = model_config(parsed, path)
    values["compression"] = compression_config(parsed, path)
    return _build(TrainRun, values, path, parsed["_lines"], "train")


def load(path: str | Path) -> dict:
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigFileError(path, None, f"cannot read file: {exc.strerror}") from None
    return parse_config(text, path)
