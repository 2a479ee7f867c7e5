"""JSON run configuration: strict parsing into :class:`RunConfig`."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .engine import LambdaSchedule, OptimizerConfig, RunConfig
from .presets import expand_biased

SPEC_VERSION = 1

_TOP_KEYS = {
    "spec_version", "name", "data", "base", "biased", "scheme", "lambda",
    "optimizer", "batch_size", "epochs", "seed", "hard_window",
}
_LAMBDA_KEYS = {"kind", "value", "granularity"}
_OPT_KEYS = {"name", "lr", "beta1", "beta2", "eps"}
_DATA_KEYS = {"train", "eval"}


class ConfigError(ValueError):
    pass


@dataclass
class RunSpec:
    run: RunConfig
    train_path: Path
    eval_paths: dict[str, Path] = field(default_factory=dict)


def _reject_unknown(obj: dict, allowed: set, where: str) -> None:
    extra = sorted(set(obj) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(extra)}")


def parse_config(text: str, base_dir: Path | str = ".", source: str = "<config>") -> RunSpec:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be an object")
    _reject_unknown(raw, _TOP_KEYS, source)
    if raw.get("spec_version") != SPEC_VERSION:
        raise ConfigError(f"{source}: spec_version must be {SPEC_VERSION}, got {raw.get('spec_version')!r}")
    for key in ("data", "base"):
        if key not in raw:
            raise ConfigError(f"{source}: missing required key {key!r}")

    data = raw["data"]
    _reject_unknown(data, _DATA_KEYS, f"{source}: data")
    if "train" not in data:
        raise ConfigError(f"{source}: data.train is required")
    base_dir = Path(base_dir)
    train_path = base_dir / data["train"]
    eval_paths = {str(k): base_dir / v for k, v in data.get("eval", {}).items()}

    lam = raw.get("lambda", {})
    _reject_unknown(lam, _LAMBDA_KEYS, f"{source}: lambda")
    opt = raw.get("optimizer", {})
    _reject_unknown(opt, _OPT_KEYS, f"{source}: optimizer")
    try:
        run = RunConfig(
            base=dict(raw["base"]),
            biased=expand_biased(raw.get("biased", [])),
            scheme=raw.get("scheme", "cr"),
            schedule=LambdaSchedule(
                kind=lam.get("kind", "sin"),
                value=float(lam.get("value", 1.0)),
                granularity=lam.get("granularity", "epoch"),
            ),
            optimizer=OptimizerConfig(**opt),
            batch_size=int(raw.get("batch_size", 256)),
            epochs=int(raw.get("epochs", 10)),
            seed=int(raw.get("seed", 0)),
            hard_window=int(raw.get("hard_window", 100)),
            name=str(raw.get("name", "run")),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return RunSpec(run, train_path, eval_paths)


def load_config(path) -> RunSpec:
    path = Path(path)
    return parse_config(path.read_text(), path.parent, str(path))
