"""Line-oriented run configuration: ``key = value`` pairs under
``[section]`` headers. Unknown sections or keys are errors; every key
has a documented default.
"""

from dataclasses import dataclass, field, fields

# section -> key -> (type, default)
SCHEMA = {
    "model": {
        "layers": (int, 4), "dim": (int, 32), "heads": (int, 2),
        "head_dim": (int, 16), "mlp_ratio": (int, 4), "patch_size": (int, 8),
        "image_size": (int, 32), "num_classes": (int, 10),
        "channels": (int, 3), "precision": (str, "f32"),
    },
    "train": {
        "seed": (int, 0), "batch_size": (int, 32),
        "teacher_epochs": (int, 60), "teacher_lr": (float, 1e-3),
        "weight_decay": (float, 0.05), "warmup_epochs": (int, 2),
        "warmup_lr": (float, 1e-5),
    },
    "distill": {
        "lam": (float, 1.0), "lr": (float, 5e-4), "epochs": (int, 50),
        "finetune_lr": (float, 5e-5), "finetune_epochs": (int, 20),
        "cosine_flat": (bool, False),
    },
    "prune": {
        "reg_coeff": (float, 1e-4), "threshold": (float, 1e-4),
        "threshold_mode": (str, "absolute"), "extension": (bool, True),
        "penalty_reduce": (str, "sum"),
        "reg_epochs": (int, 20), "reg_lr": (float, 5e-5),
        "reg_weight_decay": (float, 0.0),
        "finetune_epochs": (int, 20), "finetune_lr": (float, 5e-5),
    },
    "bench": {
        "runs": (int, 100), "warmups": (int, 30), "threads": (int, 1),
    },
    "data": {
        "n": (int, 200), "noise": (float, 0.25),
    },
}


class ConfigError(ValueError):
    """Malformed run configuration."""


def _coerce(section, key, raw):
    typ, _ = SCHEMA[section][key]
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"[{section}] {key}: expected boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def default_config():
    return {sec: {k: dv for k, (_, dv) in keys.items()}
            for sec, keys in SCHEMA.items()}


def parse_config(text):
    """Parse config text; unknown sections/keys raise ConfigError."""
    cfg = default_config()
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        cfg[section][key] = _coerce(section, key, raw)
    return cfg


def render_config(cfg):
    lines = []
    for sec in SCHEMA:
        lines.append(f"[{sec}]")
        for key in SCHEMA[sec]:
            lines.append(f"{key} = {cfg[sec][key]}")
        lines.append("")
    return "\n".join(lines)


def load_config(path=None):
    if path is None:
        return default_config()
    with open(path) as fh:
        return parse_config(fh.read())


def model_config(cfg):
    from .vit import ModelConfig
    m = cfg["model"]
    return ModelConfig(layers=m["layers"], dim=m["dim"], heads=m["heads"],
                       head_dim=m["head_dim"], mlp_ratio=m["mlp_ratio"],
                       patch_size=m["patch_size"], image_size=m["image_size"],
                       num_classes=m["num_classes"], channels=m["channels"],
                       precision=m["precision"])
