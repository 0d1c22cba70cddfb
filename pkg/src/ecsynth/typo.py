"""Seeded mobile-typing noise: transposition, omission, repetition, spatial errors.

Each character position draws at most one event from the configured
per-position probabilities. Spatial errors replace a letter with a uniformly
chosen neighbor on the keyboard layout, preserving case; characters missing
from the layout are never spatially substituted. Only sources are ever
corrupted; targets pass through untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .records import ECExample
from .util import derive_seed

# rows staggered as on a phone keyboard; diagonal neighbors included
_QWERTY_ROWS = ("qwertyuiop", "asdfghjkl", "zxcvbnm")


def _qwerty_adjacency() -> dict[str, frozenset[str]]:
    adj: dict[str, set[str]] = {ch: set() for row in _QWERTY_ROWS for ch in row}

    def link(a: str, b: str) -> None:
        adj[a].add(b)
        adj[b].add(a)

    for r, row in enumerate(_QWERTY_ROWS):
        for i, ch in enumerate(row):
            if i + 1 < len(row):
                link(ch, row[i + 1])
            if r + 1 < len(_QWERTY_ROWS):
                below = _QWERTY_ROWS[r + 1]
                for j in (i - 1, i):  # lower row sits half a key to the right
                    if 0 <= j < len(below):
                        link(ch, below[j])
    return {ch: frozenset(near) for ch, near in adj.items()}


@dataclass(frozen=True)
class KeyboardModel:
    """Symmetric key adjacency for one layout; no key neighbors itself."""

    layout_name: str
    adjacency: dict[str, frozenset[str]]

    def __post_init__(self) -> None:
        for ch, near in self.adjacency.items():
            if ch in near:
                raise ValueError(f"layout {self.layout_name!r}: {ch!r} adjacent to itself")
            for other in near:
                if ch not in self.adjacency.get(other, frozenset()):
                    raise ValueError(
                        f"layout {self.layout_name!r}: adjacency not symmetric for {ch!r}/{other!r}"
                    )

    def neighbors(self, ch: str) -> tuple[str, ...]:
        """Sorted neighbors of the lowercased key; empty if the key is unknown."""
        return tuple(sorted(self.adjacency.get(ch.lower(), frozenset())))


QWERTY = KeyboardModel(layout_name="qwerty", adjacency=_qwerty_adjacency())


def load_keyboard(path: str | Path, layout_name: str | None = None) -> KeyboardModel:
    """Layout file: one JSON record {char, neighbors[]} per line."""
    adj: dict[str, frozenset[str]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            adj[obj["char"]] = frozenset(obj["neighbors"])
    name = layout_name if layout_name is not None else str(path)
    return KeyboardModel(layout_name=name, adjacency=adj)


@dataclass(frozen=True)
class TypoConfig:
    # defaults tuned for visibly corrupted but still recoverable text
    p_transpose: float = 0.01
    p_omit: float = 0.015
    p_repeat: float = 0.01
    p_spatial: float = 0.02
    max_errors_per_example: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        rates = (self.p_transpose, self.p_omit, self.p_repeat, self.p_spatial)
        if any(not 0.0 <= p <= 1.0 for p in rates):
            raise ValueError(f"rates must be in [0, 1], got {rates}")
        if sum(rates) > 1.0:
            raise ValueError(f"per-position rates sum to {sum(rates)} > 1")
        if self.max_errors_per_example < 1:
            raise ValueError("max_errors_per_example must be positive")


@dataclass(frozen=True)
class TypoEvent:
    position: int
    kind: str  # transpose | omit | repeat | spatial


def _match_case(template: str, ch: str) -> str:
    return ch.upper() if template.isupper() else ch


def corrupt(
    text: str,
    cfg: TypoConfig,
    keyboard: KeyboardModel = QWERTY,
    seed: int | None = None,
) -> tuple[str, list[TypoEvent]]:
    """Corrupt one string; returns (corrupted text, event log).

    Per event, length changes by -1 (omit), +1 (repeat), 0 (transpose,
    spatial). Transposition is skipped at the final character.
    """
    if not text:
        raise ValueError("corrupt: empty text")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    thresholds = np.cumsum([cfg.p_transpose, cfg.p_omit, cfg.p_repeat, cfg.p_spatial])
    out: list[str] = []
    events: list[TypoEvent] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if len(events) >= cfg.max_errors_per_example:
            out.append(ch)
            i += 1
            continue
        u = rng.random()
        kind = None
        if u < thresholds[0]:
            kind = "transpose"
        elif u < thresholds[1]:
            kind = "omit"
        elif u < thresholds[2]:
            kind = "repeat"
        elif u < thresholds[3]:
            kind = "spatial"

        if kind == "transpose" and i + 1 < len(text):
            out.append(text[i + 1])
            out.append(ch)
            events.append(TypoEvent(position=i, kind="transpose"))
            i += 2
        elif kind == "omit":
            events.append(TypoEvent(position=i, kind="omit"))
            i += 1
        elif kind == "repeat":
            out.append(ch)
            out.append(ch)
            events.append(TypoEvent(position=i, kind="repeat"))
            i += 1
        elif kind == "spatial" and keyboard.neighbors(ch):
            near = keyboard.neighbors(ch)
            pick = near[int(rng.integers(len(near)))]
            out.append(_match_case(ch, pick))
            events.append(TypoEvent(position=i, kind="spatial"))
            i += 1
        else:
            # no event, or the drawn kind does not apply at this position
            out.append(ch)
            i += 1
    return "".join(out), events


def corrupt_dataset(
    examples: Sequence[ECExample],
    cfg: TypoConfig,
    keyboard: KeyboardModel = QWERTY,
) -> list[ECExample]:
    """Corrupt every source; targets unchanged.

    Per-example seeds derive from (cfg.seed, example id), so outputs do not
    depend on dataset order or worker scheduling.
    """
    out = []
    for ex in examples:
        corrupted, _ = corrupt(ex.source, cfg, keyboard, seed=derive_seed(cfg.seed, ex.id))
        out.append(replace(ex, source=corrupted))
    return out
