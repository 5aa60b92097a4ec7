from __future__ import annotations

import hashlib
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field, fields, replace
from typing import Any

logger = logging.getLogger(__name__)

VIEW_NAMES = ("road", "risk", "poi")
CLUSTERING_MODES = ("rs", "uniform")
# Run length only; a checkpoint trained for 5 epochs may be resumed up to 10.
UNHASHED_KEYS = frozenset({"epochs", "ae_epochs"})


class ConfigError(ValueError):
    """Invalid hyper-parameters or config file contents."""


@dataclass(frozen=True)
class HyperParams:
    # Window
    p: int = 3
    q: int = 4
    interval_hours: int = 1

    # Hierarchy / graphs
    n_levels: int = 4
    part_numbers: tuple[int, ...] = field(default_factory=tuple)
    # Accepted and ignored: the clustering loop never consumes a graph-size list.
    graph_sizes: tuple[int, ...] = field(default_factory=tuple)
    top_k: int = 8
    views: tuple[str, ...] = VIEW_NAMES
    partition_tolerance: int = 1
    clustering: str = "rs"

    # Network
    model_width: int = 32
    conv_layers: int = 2
    conv_kernel: int = 3
    attention_blocks: int = 2
    ff_width: int = 256

    # Remote sensing
    use_rs: bool = True
    rs_channels: int = 8
    rs_tile: int = 32
    rs_conv_channels: tuple[int, ...] = (8, 16)
    ae_channels: tuple[int, ...] = (8, 16)
    ae_epochs: int = 20
    ae_learning_rate: float = 0.1

    # Loss
    risk_level_weights: tuple[float, ...] = (0.05, 0.2, 0.25, 0.5)
    risk_level_thresholds: tuple[float, ...] = (0.0, 2.0, 4.0)
    lambda_f: float = 0.8
    lambda_c: float = 0.2
    loss_w: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    loss_b: tuple[float, ...] = (3e-4, 3e-4, 1e-5, 1e-5)
    lambda_hc: float = 1.0

    # Optimisation
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 70
    seed: int = 0

    # Ablation switches
    use_graph_views: bool = True
    use_embedding_fusion: bool = True
    use_hierarchy: bool = True
    use_temporal_attention: bool = True

    def __post_init__(self) -> None:
        for name in ("p", "q", "n_levels", "top_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.interval_hours < 1 or 24 % self.interval_hours != 0:
            raise ConfigError("interval_hours must be a positive divisor of 24")
        for name in ("model_width", "conv_layers", "attention_blocks", "ff_width", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.model_width % 2 != 0:
            raise ConfigError("model_width must be even (positional encoding)")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be a positive odd number")
        if self.epochs < 0 or self.ae_epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.rs_channels < 1 or self.rs_tile < 4:
            raise ConfigError("rs_channels must be >= 1 and rs_tile >= 4")
        if not self.rs_conv_channels or not self.ae_channels:
            raise ConfigError("rs_conv_channels and ae_channels must be non-empty")
        if self.rs_tile % (2 ** len(self.ae_channels)) != 0:
            raise ConfigError("rs_tile must be divisible by 2**len(ae_channels)")
        if self.partition_tolerance < 0:
            raise ConfigError("partition_tolerance must be >= 0")
        if self.clustering not in CLUSTERING_MODES:
            raise ConfigError(f"clustering must be one of {', '.join(CLUSTERING_MODES)}")
        if not self.views or any(v not in VIEW_NAMES for v in self.views):
            raise ConfigError(f"views must be a non-empty subset of {', '.join(VIEW_NAMES)}")
        if len(set(self.views)) != len(self.views):
            raise ConfigError("views must not repeat")
        if len(self.risk_level_weights) != 4:
            raise ConfigError("risk_level_weights needs 4 values")
        if len(self.risk_level_thresholds) != 3:
            raise ConfigError("risk_level_thresholds needs 3 values")
        if any(b <= a for a, b in zip(self.risk_level_thresholds, self.risk_level_thresholds[1:])):
            raise ConfigError("risk_level_thresholds must be strictly increasing")
        if len(self.loss_w) != self.n_levels or len(self.loss_b) != self.n_levels:
            raise ConfigError("loss_w and loss_b need one value per level (n_levels)")
        weights = (
            *self.risk_level_weights,
            *self.loss_w,
            *self.loss_b,
            self.lambda_f,
            self.lambda_c,
            self.lambda_hc,
        )
        if any(w < 0 for w in weights):
            raise ConfigError("all loss and fusion weights must be >= 0")
        if self.learning_rate <= 0 or self.ae_learning_rate <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.part_numbers:
            if len(self.part_numbers) != self.n_levels - 1:
                raise ConfigError("part_numbers needs n_levels - 1 values")
            if any(b >= a for a, b in zip(self.part_numbers, self.part_numbers[1:])):
                raise ConfigError("part_numbers must be strictly decreasing")
            if self.part_numbers[-1] < 1:
                raise ConfigError("part_numbers must be >= 1")

    @property
    def window_length(self) -> int:
        return self.p + self.q

    @property
    def active_levels(self) -> int:
        return self.n_levels if self.use_hierarchy else 1

    @property
    def effective_lambdas(self) -> tuple[float, float]:
        if not self.use_embedding_fusion:
            return 0.0, 0.0
        return self.lambda_f, self.lambda_c

    def level_sizes(self, n_regions: int) -> tuple[int, ...]:
        """Node count per level, finest first."""
        if self.part_numbers:
            coarse = self.part_numbers
        else:
            sizes: list[int] = []
            current = n_regions
            for _ in range(self.n_levels - 1):
                current = max(1, current // 4)
                sizes.append(current)
            coarse = tuple(sizes)
        result = (n_regions, *coarse)
        if any(b >= a for a, b in zip(result, result[1:])):
            raise ConfigError(
                f"level sizes {result} must strictly decrease from {n_regions} regions"
            )
        return result


PRESETS: dict[str, dict[str, Any]] = {
    "default": {},
    "nyc": {
        "rs_channels": 8,
        "conv_layers": 2,
        "attention_blocks": 2,
        "ff_width": 256,
        "loss_w": (1.0, 1.0, 1.0, 1.0),
        "loss_b": (3e-4, 3e-4, 1e-5, 1e-5),
        "lambda_hc": 1.0,
    },
    "chicago": {
        "rs_channels": 32,
        "conv_layers": 2,
        "attention_blocks": 4,
        "ff_width": 256,
        "loss_w": (1.0, 3e-4, 1e-4, 3e-5),
        "loss_b": (1e-3, 1e-3, 1e-5, 1e-5),
        "lambda_hc": 3e-4,
        "views": ("road", "risk"),
    },
}


def validate_config(values: Mapping[str, Any] | HyperParams | None = None) -> HyperParams:
    """
    Normalize a raw mapping (strings allowed) into HyperParams.

    Absent keys take the defaults; unknown keys and bad values raise
    ConfigError naming the offending key.
    """
    if isinstance(values, HyperParams):
        return replace(values)
    known = {f.name: f for f in fields(HyperParams)}
    defaults = HyperParams()
    kwargs: dict[str, Any] = {}
    for key, raw in (values or {}).items():
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
        kwargs[key] = _coerce(key, raw, getattr(defaults, key))
    n_levels = kwargs.get("n_levels", defaults.n_levels)
    if isinstance(n_levels, int) and n_levels >= 1:
        for key in ("loss_w", "loss_b"):
            if key not in kwargs:
                kwargs[key] = _fit_length(getattr(defaults, key), n_levels)
    try:
        return HyperParams(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def apply_preset(name: str, overrides: Mapping[str, Any] | None = None) -> HyperParams:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}' (expected one of {', '.join(PRESETS)})")
    merged: dict[str, Any] = dict(PRESETS[name])
    merged.update(overrides or {})
    return validate_config(merged)


def parse_config_line(text: str, *, line_no: int | None = None) -> tuple[str, str]:
    try:
        if "=" not in text:
            raise ConfigError(f"invalid config line '{text}', expected key=value")
        key, value = text.split("=", 1)
        key = key.strip().lower()
        if not key:
            raise ConfigError("config line is missing a key")
        return key, value.strip()
    except ConfigError as exc:
        if line_no is None:
            raise
        raise ConfigError(f"line {line_no}: {exc}") from exc


def read_config_file(path: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    try:
        with open(path, encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, 1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                try:
                    key, value = parse_config_line(stripped, line_no=line_no)
                except ConfigError as exc:
                    message = str(exc)
                    prefix = f"line {line_no}: "
                    if message.startswith(prefix):
                        message = message[len(prefix) :]
                    raise ConfigError(f"{path}:{line_no} {message}") from exc
                raw[key] = value
    except OSError as exc:
        reason = exc.strerror or "unable to read file"
        raise ConfigError(f"{path}: cannot open file ({reason})") from exc
    return raw


def load_config_file(path: str, overrides: Mapping[str, Any] | None = None) -> HyperParams:
    raw: dict[str, Any] = dict(read_config_file(path))
    preset = str(raw.pop("preset", "default"))
    raw.update(overrides or {})
    return apply_preset(preset, raw)


def format_config(h: HyperParams) -> str:
    lines = []
    for f in fields(HyperParams):
        lines.append(f"{f.name}={_render(getattr(h, f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(h: HyperParams) -> str:
    """SHA-256 of the rendering, ignoring how many epochs are run."""
    lines = [
        line
        for line in format_config(h).splitlines()
        if line.split("=", 1)[0] not in UNHASHED_KEYS
    ]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def _fit_length(values: tuple[float, ...], n: int) -> tuple[float, ...]:
    if len(values) >= n:
        return values[:n]
    return values + (values[-1],) * (n - len(values))


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        if isinstance(default, tuple) and not isinstance(raw, tuple):
            return tuple(raw)
        return raw
    text = raw.strip()
    if isinstance(default, bool):
        return _parse_bool(text, key)
    if isinstance(default, int):
        return _parse_int(text, key)
    if isinstance(default, float):
        return _parse_float(text, key)
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if key in {"views"}:
            return tuple(t.lower() for t in items)
        if key in {"part_numbers", "graph_sizes", "rs_conv_channels", "ae_channels"}:
            return tuple(_parse_int(t, key) for t in items)
        return tuple(_parse_float(t, key) for t in items)
    return text


def _parse_int(value: str, label: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"invalid int for '{label}': '{value}'") from exc


def _parse_float(value: str, label: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"invalid number for '{label}': '{value}'") from exc


def _parse_bool(value: str, label: str) -> bool:
    lowered = value.lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise ConfigError(f"invalid boolean for '{label}': '{value}'")
