"""Class frequency statistics, head/body/tail partitioning and peer specs.

A peer spec is a string such as ``"HBT_B_T"``: one ``_``-separated token per
peer, each token naming the frequency groups (H=head, B=body, T=tail) whose
classes that peer is trained on.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, InputError, ParseError

MAX_PEERS = 4


class Group(str, enum.Enum):
    HEAD = "H"
    BODY = "B"
    TAIL = "T"

    @property
    def label(self) -> str:
        return self.name.lower()


# canonical serialization order
GROUP_ORDER = (Group.HEAD, Group.BODY, Group.TAIL)


@dataclass(frozen=True)
class FrequencyTable:
    counts: tuple
    num_classes: int

    def __post_init__(self):
        if len(self.counts) != self.num_classes:
            raise InputError(
                f"expected {self.num_classes} counts, got {len(self.counts)}")
        if any(c < 0 for c in self.counts):
            raise InputError("class counts must be nonnegative")

    @classmethod
    def from_counts(cls, counts) -> "FrequencyTable":
        if isinstance(counts, Mapping):
            n = max(counts) + 1 if counts else 0
            counts = [int(counts.get(c, 0)) for c in range(n)]
        counts = tuple(int(c) for c in counts)
        return cls(counts, len(counts))

    def __getitem__(self, class_id: int) -> int:
        return self.counts[class_id]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)

    def as_dict(self) -> dict:
        return dict(enumerate(self.counts))


@dataclass(frozen=True)
class GroupPartition:
    group_of: Mapping
    thresholds: tuple

    def __post_init__(self):
        object.__setattr__(self, "group_of",
                           {int(c): Group(g) for c, g in self.group_of.items()})
        n = len(self.group_of)
        if sorted(self.group_of) != list(range(n)):
            raise InputError("partition must cover class ids 0..n-1 exactly once")

    @property
    def num_classes(self) -> int:
        return len(self.group_of)

    @property
    def t_head(self) -> int:
        return self.thresholds[0]

    @property
    def t_body(self) -> int:
        return self.thresholds[1]

    def members(self, group) -> list:
        group = Group(group)
        return [c for c in range(self.num_classes) if self.group_of[c] is group]

    def sizes(self) -> dict:
        return {g: len(self.members(g)) for g in GROUP_ORDER}

    def to_dict(self) -> dict:
        return {
            "t_head": self.t_head,
            "t_body": self.t_body,
            "groups": "".join(self.group_of[c].value for c in range(self.num_classes)),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroupPartition":
        try:
            groups = {c: Group(g) for c, g in enumerate(d["groups"])}
        except (KeyError, ValueError) as exc:
            raise InputError(f"malformed partition record: {exc}") from exc
        return cls(groups, (int(d["t_head"]), int(d["t_body"])))


def compute_frequencies(labels: Iterable[int], num_classes: int) -> FrequencyTable:
    """Count instances per class.

    ``labels`` may be any iterable of integer labels, or a dataset object with
    a ``y`` attribute.
    """
    if hasattr(labels, "y"):
        labels = labels.y
    labels = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels)
    if labels.size == 0:
        raise InputError("cannot compute frequencies of an empty dataset")
    if num_classes < 1:
        raise InputError("num_classes must be at least 1")
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        i = int(bad[0])
        raise InputError(
            f"instance {i} has label {labels[i]} outside [0, {num_classes})")
    counts = np.bincount(labels.astype(np.int64), minlength=num_classes)
    return FrequencyTable(tuple(int(c) for c in counts), num_classes)


def partition_classes(freq: FrequencyTable, t_head: int, t_body: int) -> GroupPartition:
    """Split classes by count: ``>= t_head`` head, ``>= t_body`` body, else tail."""
    if not t_head > t_body >= 0:
        raise ConfigError(
            f"thresholds must satisfy t_head > t_body >= 0, got t_head={t_head}, t_body={t_body}")
    group_of = {}
    for c, n in enumerate(freq.counts):
        if n >= t_head:
            group_of[c] = Group.HEAD
        elif n >= t_body:
            group_of[c] = Group.BODY
        else:
            group_of[c] = Group.TAIL
    return GroupPartition(group_of, (int(t_head), int(t_body)))


def tertile_thresholds(freq: FrequencyTable) -> tuple:
    """Derive ``(t_head, t_body)`` giving the three groups near-equal class counts.

    Classes are ranked by count; the first third (rounded up) are head, the
    next third body. Thresholds are the smallest count in each of those two
    slices, so classes tied with a boundary join the more frequent group.
    ``t_head`` is at least 1 and ``t_body`` is kept strictly below it.
    """
    k = freq.num_classes
    if k < 3:
        raise ConfigError("tertile partitioning needs at least 3 classes")
    ranked = sorted(freq.counts, reverse=True)
    n_head = -(-k // 3)
    n_body = -(-(k - n_head) // 2)
    t_head = max(ranked[n_head - 1], 1)
    t_body = min(ranked[n_head + n_body - 1], t_head - 1)
    return t_head, t_body


def parse_peer_config(spec: str) -> list:
    """Parse ``"HBT_B_T"`` into ``[{H, B, T}, {B}, {T}]`` (as frozensets of Group)."""
    if not isinstance(spec, str) or not spec:
        raise ParseError("peer spec is empty", 0)
    tokens = spec.split("_")
    if len(tokens) > MAX_PEERS:
        raise ParseError(
            f"peer spec {spec!r} has {len(tokens)} peers, at most {MAX_PEERS} allowed",
            len(spec))
    groups, pos = [], 0
    for token in tokens:
        if not token:
            raise ParseError(f"empty peer token at position {pos} in {spec!r}", pos)
        seen = set()
        for offset, letter in enumerate(token):
            try:
                g = Group(letter)
            except ValueError:
                raise ParseError(
                    f"unknown group letter {letter!r} at position {pos + offset} in {spec!r}",
                    pos + offset) from None
            if g in seen:
                raise ParseError(
                    f"repeated group letter {letter!r} at position {pos + offset} in {spec!r}",
                    pos + offset)
            seen.add(g)
        groups.append(frozenset(seen))
        pos += len(token) + 1
    return groups


def format_peer_config(group_sets: Sequence) -> str:
    """Inverse of :func:`parse_peer_config`, letters in canonical H, B, T order."""
    tokens = []
    for gs in group_sets:
        gs = {Group(g) for g in gs}
        if not gs:
            raise ConfigError("a peer needs at least one group")
        tokens.append("".join(g.value for g in GROUP_ORDER if g in gs))
    return "_".join(tokens)


def peer_class_subset(partition: GroupPartition, group_set) -> list:
    """Ascending class ids whose group is in ``group_set``."""
    wanted = {Group(g) for g in group_set}
    return [c for c in range(partition.num_classes) if partition.group_of[c] in wanted]


class FrequencyPartitioner(TransformerMixin, BaseEstimator):
    """Learn a head/body/tail partition from training labels.

    Parameters
    ----------
    t_head, t_body : int or None
        Count cutoffs. When both are None the cutoffs come from
        :func:`tertile_thresholds`.
    num_classes : int or None
        Number of classes; defaults to ``max(y) + 1``.

    ``transform`` maps labels to their group letters.
    """

    def __init__(self, t_head=None, t_body=None, num_classes=None):
        self.t_head = t_head
        self.t_body = t_body
        self.num_classes = num_classes

    def fit(self, y, _unused=None):
        y = np.asarray(y)
        if y.ndim != 1:
            raise InputError("labels must be one-dimensional")
        k = self.num_classes if self.num_classes is not None else int(y.max()) + 1
        self.frequencies_ = compute_frequencies(y, k)
        if (self.t_head is None) != (self.t_body is None):
            raise ConfigError("give both t_head and t_body, or neither for tertile mode")
        if self.t_head is None:
            t_head, t_body = tertile_thresholds(self.frequencies_)
        else:
            t_head, t_body = self.t_head, self.t_body
        self.partition_ = partition_classes(self.frequencies_, t_head, t_body)
        return self

    def transform(self, y):
        check_is_fitted(self, "partition_")
        y = np.asarray(y)
        return np.array([self.partition_.group_of[int(c)].value for c in y])
