"""Consensus voting over per-peer (label, confidence) opinions.

:func:`consensus_vote` follows the published voting procedure step by step:

* a label every peer agrees on wins immediately with the highest confidence;
* a label backed by several peers competes with the best confidence among
  its own voters;
* a label backed by a single peer competes with that peer's confidence;
* candidates are visited in first-occurrence order and a later candidate
  replaces the running best only with a strictly larger score.

Note that a lone but very confident peer can therefore beat a majority whose
best voter is less confident. ``minority_penalty`` (default 1.0, i.e. off)
multiplies singleton scores for ablations.

:func:`vote_oracle` computes the same contract in a structurally different
way and exists for equivalence testing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from .exceptions import ConfigError, InputError


class PeerPrediction(NamedTuple):
    label: int
    confidence: float


@dataclass(frozen=True)
class VoteResult:
    score: float
    label: int

    def as_tuple(self):
        return self.score, self.label


def _validate(labels, scores):
    if len(labels) == 0:
        raise InputError("cannot vote with zero peers")
    if len(labels) != len(scores):
        raise InputError(f"{len(labels)} labels but {len(scores)} scores")
    for i, s in enumerate(scores):
        if not (math.isfinite(s) and 0.0 < s <= 1.0):
            raise InputError(f"peer {i} confidence {s!r} is outside (0, 1]")


def _split(votes):
    try:
        return [int(v[0]) for v in votes], [float(v[1]) for v in votes]
    except (TypeError, IndexError):
        raise InputError("expected a sequence of (label, confidence) pairs") from None


def tally(labels: Sequence[int]) -> dict:
    """Vote count per label, keyed in order of first occurrence."""
    if len(labels) == 0:
        raise InputError("cannot tally zero votes")
    counts = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    return counts


def consensus_vote(labels, scores, minority_penalty=1.0) -> VoteResult:
    _validate(labels, scores)
    if minority_penalty <= 0:
        raise ConfigError("minority_penalty must be > 0")
    max_score, max_label = 0.0, 0
    for label, n_votes in tally(labels).items():
        if n_votes == len(labels):
            return VoteResult(max(scores), label)
        if n_votes > 1:
            for i in range(len(labels)):
                if labels[i] == label:
                    v_s = scores[i]
                    if v_s > max_score:
                        max_score, max_label = v_s, labels[i]
        elif n_votes == 1:
            v_s = scores[list(labels).index(label)] * minority_penalty
            if v_s > max_score:
                max_score, max_label = v_s, label
    return VoteResult(max_score, max_label)


def vote_oracle(labels, scores, minority_penalty=1.0) -> VoteResult:
    """Reference for :func:`consensus_vote` built from candidate triples.

    Every distinct label becomes ``(candidate score, -first index, label)``
    and the lexicographic maximum wins.
    """
    _validate(labels, scores)
    first, voters = {}, {}
    for i, label in enumerate(labels):
        first.setdefault(label, i)
        voters.setdefault(label, []).append(scores[i])
    if len(voters) == 1:
        (label,) = voters
        return VoteResult(max(scores), label)
    triples = []
    for label, vs in voters.items():
        score = max(vs) if len(vs) > 1 else vs[0] * minority_penalty
        triples.append((score, -first[label], label))
    score, _, label = max(triples)
    return VoteResult(score, label)


def batch_vote(predictions, minority_penalty=1.0) -> list:
    """Vote each instance's list of :class:`PeerPrediction`; order preserved."""
    out = []
    for i, votes in enumerate(predictions):
        if len(votes) == 0:
            raise InputError(f"instance {i} has no peer predictions")
        labels, scores = _split(list(votes))
        out.append(consensus_vote(labels, scores, minority_penalty))
    return out
