"""Flat ``key = value`` configuration files with ``#`` comments."""
from __future__ import annotations


class ConfigError(ValueError):
    pass


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text.lower() in ("none", "off", "") else float(text)


def _opt_int(text):
    return None if text.lower() in ("none", "auto", "") else int(text)


def _int_list(text):
    return [int(v) for v in text.replace(",", " ").split()]


def _float_list(text):
    return [float(v) for v in text.replace(",", " ").split()]


# key -> (parser, default)
SCHEMA = {
    # denoising
    "band_low_hz": (float, 0.2),
    "band_high_hz": (float, 75.0),
    "notch_hz": (_opt_float, 60.0),
    "filter_order": (int, 4),
    "kurt_threshold": (float, 0.5),
    "wavelet_levels": (_opt_int, None),
    "wavelet_mode": (str, "periodic"),
    # graph and model
    "gat_heads": (int, 4),
    "gat_layers": (int, 2),
    "token_dim": (int, 16),
    "embed_dim": (int, 32),
    "k_min": (int, 2),
    "k_max": (int, 10),
    "conv_kernel": (int, 7),
    "conv_stride": (int, 2),
    "gate_hidden": (int, 16),
    "head_hidden": (int, 64),
    "expert": (str, "cnn-gru"),
    # training
    "lambda_gate": (float, 0.01),
    "focal_gamma": (float, 2.0),
    "epochs_stage1": (int, 30),
    "epochs_stage2": (int, 10),
    "epochs_stage3": (int, 5),
    "warmup_epochs": (int, 5),
    "batch": (int, 32),
    "lr": (float, 1e-3),
    "lr_stage3": (float, 1e-2),
    "stage3_loss": (str, "focal"),
    "class_weights": (str, "inverse"),
    "seed": (int, 0),
    "folds": (int, 2),
    # synthetic generator
    "n_classes": (int, 3),
    "n_channels": (int, 16),
    "n_samples": (int, 256),
    "rate": (float, 160.0),
    "n_subjects": (int, 8),
    "trials_per_subject": (int, 120),
    "groups": (_int_list, [5, 5, 6]),
    "class_freq": (_float_list, [10.0, 16.0, 23.0]),
    "amplitude": (float, 3.0),
    "noise_sigma": (float, 1.0),
    "hum": (_bool, True),
    "spikes": (_bool, False),
    "subject_jitter": (float, 0.1),
}


def defaults():
    return {k: (list(v) if isinstance(v, list) else v) for k, (_, v) in SCHEMA.items()}


def parse_config(text, source="<config>"):
    """Parse config text into a dict of typed values (only the keys present)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def load_config(path=None):
    """Defaults overlaid with the file's values."""
    cfg = defaults()
    if path is not None:
        with open(path) as fh:
            cfg.update(parse_config(fh.read(), str(path)))
    return cfg


def format_config(cfg):
    lines = []
    for key in SCHEMA:
        if key not in cfg:
            continue
        v = cfg[key]
        if isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        elif v is None:
            v = "none"
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
