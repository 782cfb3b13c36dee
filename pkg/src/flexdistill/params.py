"""Named parameter storage and the JSON checkpoint format.

Checkpoints store every float as a C99 hex-float string (``float.hex``), which
round-trips float64 values bit-exactly::

    {"format": "flexdistill-checkpoint/1",
     "params": {"block1.linear.weight": {"shape": [4, 2], "trainable": true,
                                          "values": ["0x1.8p-1", ...]}, ...}}
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError, ValidationError

CHECKPOINT_FORMAT = "flexdistill-checkpoint/1"


@dataclass(eq=False)
class Param:
    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)


class ParamStore:
    """Ordered ``name -> Param`` map.

    Holds trainable tensors and non-trainable state (batch-norm running
    moments) side by side. Gradients accumulate into ``Param.grad`` and must be
    cleared with :meth:`zero_grad` between optimizer steps.
    """

    def __init__(self):
        self._params: "OrderedDict[str, Param]" = OrderedDict()

    def add(self, name: str, value, trainable: bool = True) -> Param:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        p = Param(name, value, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def trainable(self):
        return [p for p in self._params.values() if p.trainable]

    def buffers(self):
        return [p for p in self._params.values() if not p.trainable]

    def num_trainable(self) -> int:
        return sum(p.size for p in self.trainable())

    def zero_grad(self):
        for p in self._params.values():
            p.grad.fill(0.0)

    def state(self) -> dict:
        """Deep copy of all values, keyed by name."""
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_state(self, state: dict, strict: bool = True):
        if strict:
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            if missing or extra:
                name = sorted(missing | extra)[0]
                raise DimensionError(f"checkpoint/model mismatch at parameter {name!r}")
        for name, value in state.items():
            p = self._params[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != p.value.shape:
                raise DimensionError(
                    f"parameter {name!r}: checkpoint shape {value.shape} != model shape {p.value.shape}"
                )
            p.value[...] = value


def save_checkpoint(store_or_state, path, trainable=None):
    """Write a store (or a ``state()`` dict plus ``trainable`` flags) as JSON."""
    if isinstance(store_or_state, ParamStore):
        state = store_or_state.state()
        trainable = {p.name: p.trainable for p in store_or_state}
    else:
        state = store_or_state
        trainable = trainable or {}
    doc = {
        "format": CHECKPOINT_FORMAT,
        "params": {
            name: {
                "shape": list(value.shape),
                "trainable": bool(trainable.get(name, True)),
                "values": [float(v).hex() for v in value.ravel()],
            }
            for name, value in state.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> dict:
    """Read a checkpoint file into a ``name -> ndarray`` dict."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON: {e.msg}", offset=e.pos) from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    out = {}
    for name, entry in doc["params"].items():
        shape = tuple(entry["shape"])
        values = np.array([float.fromhex(v) for v in entry["values"]], dtype=np.float64)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{path}: parameter {name!r} has {values.size} values for shape {shape}")
        out[name] = values.reshape(shape)
    return out
