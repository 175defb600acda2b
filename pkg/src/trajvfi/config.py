"""Key-value configuration files.

One ``key = value`` per line, ``#`` starts a comment. Recognised keys:

======================  =======================================================
``H``                   attention heads (default 4)
``S``                   window size in pixels (default 8)
``N``                   attention layers per scale (default 2)
``scales``              comma-separated subset of 1,2,4 (default ``1,2,4``)
``d``                   token embedding dimension (default 64)
``tau``                 inconsistency-map temperature (default 1.0)
``context``             context feature channels (default 32)
``grid``                grid-encoder row channels, e.g. ``32,64,96``
``pyramid``             flow pyramid channels, e.g. ``16,32,32``
``radius``              correlation radius (default 3)
``use_cml``             consistent-motion refinement on/off
``use_tac``, ``use_tab``  consistent / boundary attention branches on/off
``lr_motion``           motion learning rate (default 5e-5)
``lr_rest``             synthesis learning rate, stage two (default 5e-4)
``batch``               batch size (default 4)
``epochs``              epochs for the stage being run
``epochs_stage1``       overrides ``epochs`` for stage one (default 20)
``epochs_stage2``       overrides ``epochs`` for stage two (default 70)
``patience``            plateau patience in epochs (default 4)
``decay``               learning-rate decay factor (default 0.2)
``augment``             random flips / temporal reversal on/off (default on)
======================  =======================================================
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidArgument, NotFound
from .model import ModelConfig


@dataclass
class ScheduleConfig:
    lr_motion: float = 5e-5
    lr_rest: float = 5e-4
    batch: int = 4
    epochs_stage1: int = 20
    epochs_stage2: int = 70
    patience: int = 4
    decay: float = 0.2
    betas: tuple = (0.9, 0.999)
    augment: bool = True

    def __post_init__(self):
        if self.lr_motion <= 0 or self.lr_rest <= 0:
            raise InvalidArgument("learning rates must be positive")
        if self.patience < 1:
            raise InvalidArgument("patience must be >= 1")
        if self.batch < 1:
            raise InvalidArgument("batch must be >= 1")
        if not 0 < self.decay < 1:
            raise InvalidArgument("decay must lie in (0, 1)")

    def epochs(self, stage: int) -> int:
        return self.epochs_stage1 if stage == 1 else self.epochs_stage2


_MODEL_KEYS = {"H": "heads", "S": "window", "N": "layers", "d": "dim", "tau": "tau", "scales": "scales",
               "context": "context", "grid": "grid", "pyramid": "pyramid", "radius": "radius",
               "use_cml": "use_cml", "use_tac": "use_tac", "use_tab": "use_tab"}
_SCHEDULE_KEYS = {"lr_motion", "lr_rest", "batch", "patience", "decay", "epochs_stage1", "epochs_stage2",
                  "augment"}
_INT_TUPLES = {"scales", "grid", "pyramid"}
_BOOLS = {"use_cml", "use_tac", "use_tab", "augment"}
_INTS = {"heads", "window", "layers", "dim", "context", "radius", "batch", "patience", "epochs_stage1",
         "epochs_stage2"}


def _convert(name, raw):
    try:
        if name in _INT_TUPLES:
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        if name in _BOOLS:
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if name in _INTS:
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise InvalidArgument(f"bad value for {name}: {raw!r}") from exc


def parse_config(text: str):
    """Return ``(ModelConfig, ScheduleConfig)`` from key-value text."""
    model_kw, sched_kw = {}, {}
    epochs = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _MODEL_KEYS:
            name = _MODEL_KEYS[key]
            model_kw[name] = _convert(name, raw)
        elif key in _SCHEDULE_KEYS:
            sched_kw[key] = _convert(key, raw)
        elif key == "epochs":
            epochs = _convert("batch", raw)
        else:
            raise InvalidArgument(f"line {lineno}: unknown key {key!r}")
    if epochs is not None:
        sched_kw.setdefault("epochs_stage1", epochs)
        sched_kw.setdefault("epochs_stage2", epochs)
    return ModelConfig(**model_kw), ScheduleConfig(**sched_kw)


def load_config(path):
    if path is None:
        return ModelConfig(), ScheduleConfig()
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"config file not found: {path}")
    return parse_config(path.read_text())
