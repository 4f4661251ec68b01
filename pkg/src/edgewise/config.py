"""Plain ``key=value`` experiment configuration with typed schemas and CSV helpers."""

from __future__ import annotations

import csv
import io
from pathlib import Path


class ConfigError(ValueError):
    pass


def _float_list(text):
    return tuple(float(t) for t in str(text).split(",") if t.strip())


def _int_list(text):
    return tuple(int(t) for t in str(text).split(",") if t.strip())


def _str_list(text):
    return tuple(t.strip() for t in str(text).split(",") if t.strip())


def _structures(text):
    # commas separate layers; parentheses never contain commas
    return tuple(t.strip() for t in str(text).split(",") if t.strip())


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


PARSERS = {
    "int": int, "float": float, "str": str, "bool": _bool,
    "floats": _float_list, "ints": _int_list, "strs": _str_list, "structures": _structures,
}

COMMON = {
    "seed": ("int", 0),
    "threads": ("int", 1),
    "out_dir": ("str", "out"),
    "data_dir": ("str", "/root/data/mnist"),
    "val_fraction": ("float", 0.1),
}

SCHEMAS = {
    "pretrain": {
        "sizes": ("ints", (784, 128, 128, 10)),
        "epochs": ("int", 10),
        "lr": ("float", 1e-3),
        "batch_size": ("int", 128),
        "milestones": ("floats", (0.6, 0.85)),
    },
    "sketch": {
        "model": ("str", ""),
        "structures": ("structures", ("subchannelwise(4)", "channelwise", "channelwise")),
        "i_max": ("int", 8),
        "sigma": ("float", 0.0),
    },
    "alq": {
        "model": ("str", ""),
        "structures": ("structures", ("subchannelwise(4)", "channelwise", "channelwise")),
        "i_max": ("int", 8),
        "sigma": ("float", 0.0),
        "rounds": ("int", 4),
        "prune_ratio": ("float", 0.3),
        "prune_iters": ("int", 100),
        "k_percent": ("float", 1.0),
        "bases_iters": ("int", 200),
        "coords_iters": ("int", 100),
        "init_iters": ("int", 200),
        "final_iters": ("int", 400),
        "lr": ("float", 1e-3),
        "final_lr": ("float", 1e-4),
        "l2": ("float", 0.0),
        "batch_size": ("int", 128),
        "act_bits": ("int", 0),
        "reset_moments": ("bool", True),
    },
    "dress": {
        "model": ("str", ""),
        "levels": ("floats", (0.5, 0.75, 0.875)),
        "gamma": ("float", 0.0),
        "epochs": ("int", 10),
        "lr": ("float", 1e-3),
        "batch_size": ("int", 128),
        "layerwise": ("bool", True),
    },
    "dpu": {
        "arms": ("strs", ("FULL", "DPU", "GCPU", "RPU", "PRUNE")),
        "rounds": ("int", 10),
        "d1": ("int", 1000),
        "dd": ("int", 1000),
        "k": ("float", 0.1),
        "s_w": ("int", 32),
        "epochs": ("int", 10),
        "lr": ("float", 1e-3),
        "batch_size": ("int", 64),
        "seeds": ("ints", (0,)),
        "reinit": ("bool", True),
        "sizes": ("ints", (784, 128, 128, 10)),
    },
    "report": {
        "traces": ("strs", ()),
    },
    "selftest": {},
}


def schema(command: str) -> dict:
    return {**COMMON, **SCHEMAS[command]}


def parse_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(command: str, file_values: dict, overrides: dict) -> dict:
    """Defaults, then file values, then flag overrides; unknown keys and bad values raise ConfigError."""
    keys = schema(command)
    unknown = sorted(set(file_values) - set(keys))
    if unknown:
        raise ConfigError(f"unknown keys for {command}: {', '.join(unknown)}")
    out = {key: default for key, (_, default) in keys.items()}
    for source in (file_values, overrides):
        for key, value in source.items():
            if value is None:
                continue
            kind = keys[key][0]
            try:
                out[key] = PARSERS[kind](value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
    return out


def load(command: str, path=None, overrides=None) -> dict:
    file_values = {}
    if path:
        try:
            file_values = parse_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return resolve(command, file_values, overrides or {})


def format_config(cfg: dict) -> str:
    def show(v):
        return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)

    return "\n".join(f"{k} = {show(v)}" for k, v in sorted(cfg.items())) + "\n"


def _cell(v):
    if isinstance(v, float):
        return format(v, ".9g")
    if isinstance(v, (list, tuple)):
        return ";".join(_cell(x) for x in v)
    return str(v)


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c, "")) for c in columns])
    return buf.getvalue()


def write_csv(path, rows, columns) -> None:
    Path(path).write_text(rows_to_csv(rows, columns))


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
