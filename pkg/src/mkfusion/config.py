"""Flat ``key = value`` run configuration with typed defaults.

Keys are dotted (``train.steps``, ``data.c_max``, ``model.d_feat``); ``#``
starts a comment; unknown keys are rejected.  The resolved configuration
can be written back in the same format so every run directory records the
exact settings it used.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError
from .train import TrainConfig

__all__ = ["RunConfig", "DEFAULTS", "parse_buckets"]

DEFAULTS: dict[str, object] = {
    "run.seed": 0,
    "data.buckets": "5:2,9:3,31:3",
    "data.scale": 2,
    "data.patch": 32,
    "data.image_size": 128,
    "data.train_images": 4,
    "data.test_images": 1,
    "data.smoothness": 4.0,
    "data.c_max": 40,
    "model.d_feat": 64,
    "model.hidden": 256,
    "model.hidden_layers": 4,
    "model.enc_spe_depth": 2,
    "model.enc_spa_depth": 2,
    "train.steps": 2000,
    "train.batch_size": 4,
    "train.lr_start": 2e-4,
    "train.lr_min": 1e-5,
    "train.lam_ssim": 0.1,
    "train.weight_decay": 1e-4,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.checkpoint_every": 500,
    "train.probe_every": 50,
    "eval.scales": "2,3,3.2,4,5.7",
    "eval.patches": 8,
    "eval.peak": 1.0,
}


def parse_buckets(text: str) -> list[tuple[int, int]]:
    """``"5:2,9:3"`` -> ``[(5, 2), (9, 3)]`` (HSI bands, MSI bands)."""
    out = []
    for item in text.split(","):
        try:
            C, c = (int(v) for v in item.strip().split(":"))
        except ValueError:
            raise ConfigurationError(f"bad bucket entry {item!r}; expected C:c") from None
        out.append((C, c))
    if not out:
        raise ConfigurationError("data.buckets is empty")
    return out


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


@dataclass
class RunConfig:
    values: dict[str, object]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(dict(DEFAULTS))

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = dict(DEFAULTS)
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, raw)
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.parse(path.read_text(), str(path))

    def __getitem__(self, key: str):
        return self.values[key]

    def override(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown key {key!r}")
        self.values[key] = _coerce(key, str(value))

    def validate(self) -> None:
        c_max = self["data.c_max"]
        for C, c in self.buckets:
            if not 1 <= c <= C:
                raise ConfigurationError(f"bucket {C}:{c}: MSI band count must satisfy 1 <= c <= C")
            if C + c > c_max:
                raise ConfigurationError(f"bucket {C}:{c}: C + c = {C + c} exceeds data.c_max={c_max}")
        if self["data.patch"] % self["data.scale"]:
            raise ConfigurationError("data.patch must be divisible by data.scale")
        if self["data.image_size"] < self["data.patch"]:
            raise ConfigurationError("data.image_size must be at least data.patch")
        self.train_config()

    @property
    def buckets(self) -> list[tuple[int, int]]:
        return parse_buckets(self["data.buckets"])

    @property
    def scales(self) -> list[float]:
        try:
            return [float(s) for s in self["eval.scales"].split(",")]
        except ValueError:
            raise ConfigurationError(f"bad eval.scales {self['eval.scales']!r}") from None

    def train_config(self) -> TrainConfig:
        t = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("train.")}
        m = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("model.")}
        return TrainConfig(seed=self["run.seed"], c_max=self["data.c_max"], **t, **m)

    def dumps(self) -> str:
        return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                       for k, v in self.values.items())

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())
