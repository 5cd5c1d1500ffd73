"""Columnar page/event logs and their JSON Lines form.

``pages.jsonl`` holds one presentation per line, ``events.jsonl`` one
engagement event per line. Readers validate every line and raise
:class:`SchemaViolation` naming the file and 1-based line number.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Sequence

import numpy as np

from .domain import EVENT_TYPES, POLICY_TAGS, EngagementEvent, PagePresentation
from .simulator import EVENT_CODES, ContextBatch, EventArrays

POLICY_CODES = {t: i for i, t in enumerate(POLICY_TAGS)}


class SchemaViolation(ValueError):
    def __init__(self, path, line: int, msg: str):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {msg}")


def dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps(row))
            fh.write("\n")


def iter_jsonl(path) -> Iterator[tuple]:
    """Yield (line_number, parsed object); blank lines are skipped."""
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(path, i, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise SchemaViolation(path, i, "expected a JSON object")
            yield i, obj


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


_PAGE_KEYS = {"page_id", "context", "slots", "policy_tag", "slot_propensities"}
_CTX_KEYS = {"context_id", "bucket", "user_features", "hero_features", "platform"}
_EVENT_KEYS = {"page_id", "slot", "module_id", "event_type", "timestamp"}


def _check_page(path, i, d):
    missing = _PAGE_KEYS - d.keys()
    if missing:
        raise SchemaViolation(path, i, f"missing keys {sorted(missing)}")
    ctx = d["context"]
    if not isinstance(ctx, dict) or _CTX_KEYS - ctx.keys():
        raise SchemaViolation(path, i, f"context must contain {sorted(_CTX_KEYS)}")
    if d["policy_tag"] not in POLICY_TAGS:
        raise SchemaViolation(path, i, f"unknown policy_tag {d['policy_tag']!r}")
    if not isinstance(d["slots"], list) or len(d["slots"]) != len(d["slot_propensities"]):
        raise SchemaViolation(path, i, "slots and slot_propensities must be equal-length lists")
    if any(not isinstance(m, int) for m in d["slots"]):
        raise SchemaViolation(path, i, "slots must be integers")


def _check_event(path, i, d):
    missing = _EVENT_KEYS - d.keys()
    if missing:
        raise SchemaViolation(path, i, f"missing keys {sorted(missing)}")
    if d["event_type"] not in EVENT_TYPES:
        raise SchemaViolation(path, i, f"unknown event_type {d['event_type']!r}")
    if not isinstance(d["slot"], int) or d["slot"] < 1:
        raise SchemaViolation(path, i, "slot must be a positive integer")


@dataclass
class Log:
    page_id: np.ndarray
    contexts: ContextBatch
    slates: np.ndarray  # (n, K) module ids
    policy: np.ndarray  # policy codes, see POLICY_CODES
    propensities: np.ndarray  # (n, K)
    events: EventArrays

    def __len__(self) -> int:
        return len(self.page_id)

    @property
    def K(self) -> int:
        return self.slates.shape[1]

    def subset(self, mask_or_index) -> "Log":
        idx = np.arange(len(self))[mask_or_index]
        keep = np.isin(self.events.page_id, self.page_id[idx])
        c = self.contexts
        ev = self.events
        return Log(
            self.page_id[idx],
            ContextBatch(*(getattr(c, f)[idx] for f in ("context_id", "bucket", "user_features",
                                                        "hero_features", "platform", "user_id", "timestamp"))),
            self.slates[idx],
            self.policy[idx],
            self.propensities[idx],
            EventArrays(ev.page_id[keep], ev.slot[keep], ev.module_id[keep], ev.event_code[keep],
                        ev.timestamp[keep]),
        )

    def with_policy(self, tag: str) -> "Log":
        return self.subset(self.policy == POLICY_CODES[tag])

    @classmethod
    def concat(cls, logs: Sequence["Log"]) -> "Log":
        logs = [g for g in logs if len(g)]
        c = [g.contexts for g in logs]
        return cls(
            np.concatenate([g.page_id for g in logs]),
            ContextBatch(*(np.concatenate([getattr(x, f) for x in c])
                           for f in ("context_id", "bucket", "user_features", "hero_features",
                                     "platform", "user_id", "timestamp"))),
            np.concatenate([g.slates for g in logs]),
            np.concatenate([g.policy for g in logs]),
            np.concatenate([g.propensities for g in logs]),
            EventArrays.concat([g.events for g in logs]),
        )

    def slot_labels(self) -> dict:
        """Binary (n, K) matrices of click / intent / purchase per logged slot."""
        pos = {int(p): i for i, p in enumerate(self.page_id)}
        rows = np.array([pos[int(p)] for p in self.events.page_id], dtype=np.int64)
        cols = self.events.slot - 1
        out = {}
        for name, codes in (("click", [EVENT_CODES["click"]]),
                            ("intent", [EVENT_CODES["watch"], EVENT_CODES["add_to_cart"]]),
                            ("purchase", [EVENT_CODES["purchase"]])):
            m = np.zeros(self.slates.shape, dtype=np.int64)
            sel = np.isin(self.events.event_code, codes)
            m[rows[sel], cols[sel]] = 1
            out[name] = m
        return out

    # ------------------------------------------------------------ objects

    def presentations(self) -> List[PagePresentation]:
        ctxs = self.contexts.contexts()
        return [
            PagePresentation(int(self.page_id[i]), ctxs[i], tuple(int(m) for m in self.slates[i]),
                             POLICY_TAGS[int(self.policy[i])],
                             tuple(float(q) for q in self.propensities[i]))
            for i in range(len(self))
        ]

    def event_list(self) -> List[EngagementEvent]:
        return self.events.to_events()

    @classmethod
    def from_objects(cls, pages: Sequence[PagePresentation], events: Sequence[EngagementEvent]) -> "Log":
        K = len(pages[0].slots) if pages else 0
        return cls(
            np.array([p.page_id for p in pages], dtype=np.int64),
            ContextBatch.from_contexts([p.context for p in pages]),
            np.array([p.slots for p in pages], dtype=np.int64).reshape(len(pages), K),
            np.array([POLICY_CODES[p.policy_tag] for p in pages], dtype=np.int64),
            np.array([p.slot_propensities for p in pages], dtype=np.float64).reshape(len(pages), K),
            EventArrays.from_events(events),
        )

    # ------------------------------------------------------------ files

    def write(self, pages_path, events_path) -> None:
        write_jsonl(pages_path, (p.to_dict() for p in self.presentations()))
        write_jsonl(events_path, (e.to_dict() for e in self.event_list()))

    @classmethod
    def read(cls, pages_path, events_path) -> "Log":
        pages, events = [], []
        K = None
        for i, d in iter_jsonl(pages_path):
            _check_page(pages_path, i, d)
            try:
                p = PagePresentation.from_dict(d)
            except (TypeError, ValueError, KeyError) as exc:
                raise SchemaViolation(pages_path, i, str(exc)) from None
            if K is None:
                K = p.K
            elif p.K != K:
                raise SchemaViolation(pages_path, i, f"expected {K} slots, got {p.K}")
            pages.append(p)
        known = {p.page_id for p in pages}
        for i, d in iter_jsonl(events_path):
            _check_event(events_path, i, d)
            try:
                e = EngagementEvent.from_dict(d)
            except (TypeError, ValueError, KeyError) as exc:
                raise SchemaViolation(events_path, i, str(exc)) from None
            if e.page_id not in known:
                raise SchemaViolation(events_path, i, f"event references unknown page {e.page_id}")
            events.append(e)
        return cls.from_objects(pages, events)


def build_log(page_id, contexts: ContextBatch, slates, policy_tag: str, propensities,
              events: EventArrays) -> Log:
    n = len(page_id)
    return Log(np.asarray(page_id, dtype=np.int64), contexts, np.asarray(slates, dtype=np.int64),
               np.full(n, POLICY_CODES[policy_tag], dtype=np.int64),
               np.asarray(propensities, dtype=np.float64), events)
