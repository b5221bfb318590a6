"""Flat dotted-key configuration: defaults, file parsing and overrides."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.path": "",
    "data.t_obs": 8,
    "data.t_fut": 16,
    "data.stride": 24,
    "data.resample": 1,
    "data.count": 1000,
    "data.p_straight": 0.4,
    "data.p_left": 0.4,
    "data.p_right": 0.2,
    "data.speed_mean": 1.0,
    "data.speed_std": 0.1,
    "data.noise_std": 0.02,
    "data.dt": 0.25,
    "model.K": 2,
    "model.n_steps": 8,
    "model.transform": "nlsq",
    "model.channels": 32,
    "model.kernel": 3,
    "model.dilations": "1,2,4,8",
    "model.prior": "hba",
    "model.alpha": 0.5,
    "model.alpha_mode": "shared",
    "model.encoder_dim": 16,
    "train.batch_size": 64,
    "train.epochs": 20,
    "train.lr": 0.002,
    "train.lr_final": 0.0,
    "train.clip_norm": 5.0,
    "train.max_steps": 0,
    "train.val_fraction": 0.1,
    "train.folds": 5,
    "train.run_folds": "all",
    "train.resume": "",
    "eval.n_samples": 50,
    "eval.n_min_samples": 20,
    "eval.fraction": 0.1,
    "eval.horizons": "1,2,3,4",
    "eval.max_examples": 0,
    "eval.benchmark": False,
    "eval.plots": True,
    "sample.n": 50,
    "sample.fold": 0,
    "sample.max_examples": 5,
    "sample.svg": True,
    "inspect.values": "1,2,3,4",
    "inspect.dim": 1,
    "inspect.input": "",
    "bench.batch": 128,
    "bench.repeats": 10,
}


class ConfigKeyError(KeyError):
    def __str__(self):
        return str(self.args[0])


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected key = value, got {line!r}")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def resolve(config_path: str | None = None, overrides: Iterable[str] = (),
            seed: int | None = None) -> dict[str, object]:
    """Defaults, then the config file, then ``key=value`` overrides, then --seed."""
    raw: dict[str, str] = {}
    if config_path:
        p = Path(config_path)
        raw.update(parse_lines(p.read_text(encoding="utf-8").splitlines(), str(p)))
    raw.update(parse_lines(overrides, "--set"))
    unknown = sorted(k for k in raw if k not in DEFAULTS)
    if unknown:
        raise ConfigKeyError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = dict(DEFAULTS)
    for k, v in raw.items():
        cfg[k] = _coerce(k, v)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def render(cfg: dict[str, object]) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def int_list(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(s).split(",") if v.strip())


def float_list(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(s).split(",") if v.strip())
