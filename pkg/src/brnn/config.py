"""Flat ``section.key = value`` run configuration.

Every key has a type and a default; unknown keys and unparsable values
raise :class:`ConfigError`.  ``render()`` produces the canonical text of the
fully resolved configuration (sorted keys, one per line).
"""

from __future__ import annotations

import os
from pathlib import Path

from .errors import ConfigError

SEED_ENV = "BRNN_SEED"

# key -> (type, default)
SCHEMA: dict[str, tuple[type, object]] = {
    "model.embed_size": (int, 16),
    "model.hidden_size": (int, 32),
    "model.num_layers": (int, 1),
    "model.vocab_mode": (str, "word"),
    "model.min_count": (int, 1),
    "model.sigma_init": (float, 0.01),
    "model.init_scale": (float, 0.05),
    # 0 puts every cut of the epoch into one sequence (B = 1)
    "trainer.cuts_per_sequence": (int, 0),
    "trainer.T": (int, 10),
    "trainer.batch_size": (int, 10),
    "trainer.lr": (float, 0.5),
    "trainer.lr_decay": (float, 1.0),
    "trainer.decay_after": (int, 0),
    "trainer.clip": (float, 5.0),
    "trainer.epochs": (int, 5),
    "trainer.seed": (int, 0),
    "trainer.max_skips": (int, 10),
    "trainer.kl_enabled": (bool, True),
    "trainer.deterministic": (bool, False),
    "prior.pi": (float, 0.25),
    "prior.log_sigma1": (float, -1.0),
    "prior.log_sigma2": (float, -7.0),
    "sharpening.enabled": (bool, False),
    "sharpening.sigma0": (float, 0.02),
    "sharpening.eta_init": (float, 0.001),
    "sharpening.eta_lr_scale": (float, 0.001),
    "sharpening.second_order": (bool, True),
    # "phi" evaluates q(phi) like plain BBB; "sharpened" reports the bound
    "sharpening.inference": (str, "phi"),
    "sharpening.kl_divisor": (str, "C"),
    "eval.mode": (str, "map"),
    "eval.samples": (int, 1),
    "eval.T": (int, 35),
    "data.source": (str, "grammar"),
    "data.path": (str, ""),
    "data.grammar_tokens": (int, 20000),
    "data.grammar_seed": (int, 0),
    "data.valid_frac": (float, 0.05),
    "data.test_frac": (float, 0.05),
    "paths.checkpoint": (str, "run.ckpt"),
    "paths.metrics": (str, "metrics.jsonl"),
    "paths.vocab": (str, "vocab.txt"),
    "run.wall_time": (bool, False),
}

CHOICES = {
    "model.vocab_mode": ("word", "char"),
    "sharpening.inference": ("phi", "sharpened"),
    "sharpening.kl_divisor": ("C", "BC"),
    "eval.mode": ("map", "mc", "sharpened"),
    "data.source": ("grammar", "bundled", "text", "ptb"),
}

_TRUE = {"true", "on", "yes", "1"}
_FALSE = {"false", "off", "no", "0"}


def _convert(key: str, raw) -> object:
    kind, _ = SCHEMA[key]
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        value = raw
    elif kind is bool:
        text = str(raw).strip().lower()
        if text not in _TRUE | _FALSE:
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        value = text in _TRUE
    else:
        try:
            value = kind(str(raw).strip())
        except ValueError:
            raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key}: must be one of {', '.join(CHOICES[key])}, got {value!r}")
    return value


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        self.values[key] = _convert(key, value)

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self.values[key]

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def render(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def as_strings(self) -> dict[str, str]:
        return {k: _format(v) for k, v in self.values.items()}

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values


def parse_config(text: str) -> RunConfig:
    """Parse config text; blank lines and ``#`` comments are ignored."""
    cfg = RunConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key = key.strip()
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            cfg.set(key, value.strip())
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return cfg


def load_config(path=None, environ=None) -> RunConfig:
    """Read ``path`` (defaults when None) and apply the ``BRNN_SEED`` override."""
    if path is None:
        cfg = RunConfig()
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        cfg = parse_config(text)
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV):
        cfg.set("trainer.seed", env[SEED_ENV])
    return cfg
