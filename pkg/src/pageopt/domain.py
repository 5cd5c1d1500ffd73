"""Core value types shared by every stage.

Slots are 1-based everywhere. All types are frozen dataclasses; vectors are
stored as tuples of floats so instances hash, compare and serialize exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

POLICY_TAGS = ("thompson", "uniform_random", "production", "model")
EVENT_TYPES = ("click", "watch", "add_to_cart", "purchase")
INTENT_EVENTS = ("watch", "add_to_cart")


def _floats(v) -> tuple:
    return tuple(float(x) for x in v)


@dataclass(frozen=True)
class ModuleFamily:
    family_id: int
    theme_features: tuple = ()

    def to_dict(self) -> dict:
        return {"family_id": self.family_id, "theme_features": list(self.theme_features)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModuleFamily":
        return cls(int(d["family_id"]), _floats(d["theme_features"]))


@dataclass(frozen=True)
class ModuleCandidate:
    module_id: int
    family_id: int
    features: tuple = ()

    def to_dict(self) -> dict:
        return {"module_id": self.module_id, "family_id": self.family_id, "features": list(self.features)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModuleCandidate":
        return cls(int(d["module_id"]), int(d["family_id"]), _floats(d["features"]))


@dataclass(frozen=True)
class Catalog:
    """Families plus modules. Module ids must be ``0..n-1`` in order."""

    families: tuple
    modules: tuple

    def __post_init__(self):
        ids = [m.module_id for m in self.modules]
        if ids != list(range(len(ids))):
            raise ValueError("module ids must be contiguous 0..n-1 in catalog order")
        fids = [f.family_id for f in self.families]
        if len(set(fids)) != len(fids):
            raise ValueError("duplicate family_id")
        if len({len(f.theme_features) for f in self.families}) > 1:
            raise ValueError("theme_features length differs across families")
        if len({len(m.features) for m in self.modules}) > 1:
            raise ValueError("module features length differs across modules")
        known = set(fids)
        for m in self.modules:
            if m.family_id not in known:
                raise ValueError(f"module {m.module_id} references unknown family {m.family_id}")

    @property
    def n_modules(self) -> int:
        return len(self.modules)

    @property
    def n_families(self) -> int:
        return len(self.families)

    @property
    def family_of(self) -> np.ndarray:
        return np.array([m.family_id for m in self.modules], dtype=np.int64)

    def module_features(self) -> np.ndarray:
        return np.array([m.features for m in self.modules], dtype=np.float64).reshape(self.n_modules, -1)

    def theme_features(self) -> np.ndarray:
        by_id = {f.family_id: f.theme_features for f in self.families}
        return np.array([by_id[m.family_id] for m in self.modules], dtype=np.float64).reshape(self.n_modules, -1)

    def to_dict(self) -> dict:
        return {
            "families": [f.to_dict() for f in self.families],
            "modules": [m.to_dict() for m in self.modules],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Catalog":
        return cls(
            tuple(ModuleFamily.from_dict(f) for f in d["families"]),
            tuple(ModuleCandidate.from_dict(m) for m in d["modules"]),
        )


@dataclass(frozen=True)
class PageContext:
    context_id: int
    bucket: int
    user_features: tuple
    hero_features: tuple
    platform: int
    # not in the minimal schema; sessionization and event timing need them
    user_id: int = 0
    timestamp: float = 0.0

    def to_dict(self) -> dict:
        return {
            "context_id": self.context_id,
            "bucket": self.bucket,
            "user_features": list(self.user_features),
            "hero_features": list(self.hero_features),
            "platform": self.platform,
            "user_id": self.user_id,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PageContext":
        return cls(
            int(d["context_id"]),
            int(d["bucket"]),
            _floats(d["user_features"]),
            _floats(d["hero_features"]),
            int(d["platform"]),
            int(d.get("user_id", 0)),
            float(d.get("timestamp", 0.0)),
        )


@dataclass(frozen=True)
class PagePresentation:
    page_id: int
    context: PageContext
    slots: tuple
    policy_tag: str
    slot_propensities: tuple

    @property
    def K(self) -> int:
        return len(self.slots)

    def to_dict(self) -> dict:
        return {
            "page_id": self.page_id,
            "context": self.context.to_dict(),
            "slots": list(self.slots),
            "policy_tag": self.policy_tag,
            "slot_propensities": list(self.slot_propensities),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PagePresentation":
        return cls(
            int(d["page_id"]),
            PageContext.from_dict(d["context"]),
            tuple(int(m) for m in d["slots"]),
            str(d["policy_tag"]),
            _floats(d["slot_propensities"]),
        )


@dataclass(frozen=True)
class EngagementEvent:
    page_id: int
    slot: int
    module_id: int
    event_type: str
    timestamp: float

    def to_dict(self) -> dict:
        return {
            "page_id": self.page_id,
            "slot": self.slot,
            "module_id": self.module_id,
            "event_type": self.event_type,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EngagementEvent":
        return cls(int(d["page_id"]), int(d["slot"]), int(d["module_id"]), str(d["event_type"]), float(d["timestamp"]))


@dataclass(frozen=True)
class LabeledSlot:
    module_id: int
    slot: int
    y_click: int
    y_intent: int
    y_attributed_purchase: float
    ips_click: float
    ips_purchase: float
    y_purchase: int = 0

    def to_dict(self) -> dict:
        return {
            "module_id": self.module_id,
            "slot": self.slot,
            "y_click": self.y_click,
            "y_intent": self.y_intent,
            "y_attributed_purchase": self.y_attributed_purchase,
            "ips_click": self.ips_click,
            "ips_purchase": self.ips_purchase,
            "y_purchase": self.y_purchase,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledSlot":
        return cls(
            int(d["module_id"]),
            int(d["slot"]),
            int(d["y_click"]),
            int(d["y_intent"]),
            float(d["y_attributed_purchase"]),
            float(d["ips_click"]),
            float(d["ips_purchase"]),
            int(d.get("y_purchase", 0)),
        )


@dataclass(frozen=True)
class Violation:
    kind: str  # duplicate_module | unknown_module | consecutive_family | bad_propensity | length
    slot: int
    detail: str = ""


def validate_presentation(
    p: PagePresentation,
    catalog: Catalog,
    require_diversity: bool = False,
    K: Optional[int] = None,
) -> List[Violation]:
    """Return every invariant violation of ``p``; an empty list means valid."""
    if catalog.n_modules == 0:
        raise ValueError("catalog is empty")
    out: List[Violation] = []
    if K is not None and len(p.slots) != K:
        out.append(Violation("length", 0, f"expected {K} slots, got {len(p.slots)}"))
    if len(p.slot_propensities) != len(p.slots):
        out.append(Violation("length", 0, "slot_propensities length differs from slots"))
    seen = set()
    fam = catalog.family_of
    prev_family = None
    for s, m in enumerate(p.slots, start=1):
        if m in seen:
            out.append(Violation("duplicate_module", s, f"module {m} repeated"))
        seen.add(m)
        if not 0 <= m < catalog.n_modules:
            out.append(Violation("unknown_module", s, f"module {m} not in catalog"))
            prev_family = None
            continue
        f = int(fam[m])
        if require_diversity and prev_family is not None and f == prev_family:
            out.append(Violation("consecutive_family", s, f"family {f} repeats at slots {s - 1},{s}"))
        prev_family = f
    for s, q in enumerate(p.slot_propensities, start=1):
        if not 0.0 < q <= 1.0:
            out.append(Violation("bad_propensity", s, f"propensity {q} outside (0,1]"))
    return out


def consecutive_family_violations(slates: np.ndarray, family_of: np.ndarray) -> int:
    """Count adjacent same-family pairs over a (pages, K) array of module ids."""
    fam = family_of[slates]
    return int(np.sum(fam[:, 1:] == fam[:, :-1]))


@dataclass
class PageLog:
    """Presentations with their engagement events, in page order."""

    pages: List[PagePresentation] = field(default_factory=list)
    events: List[EngagementEvent] = field(default_factory=list)

    def events_by_page(self) -> Dict[int, List[EngagementEvent]]:
        out: Dict[int, List[EngagementEvent]] = {p.page_id: [] for p in self.pages}
        for e in self.events:
            out.setdefault(e.page_id, []).append(e)
        return out

    def extend(self, other: "PageLog") -> None:
        self.pages.extend(other.pages)
        self.events.extend(other.events)


def slates_array(pages: Sequence[PagePresentation]) -> np.ndarray:
    return np.array([p.slots for p in pages], dtype=np.int64).reshape(len(pages), -1)
