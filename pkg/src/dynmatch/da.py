"""One-period deferred acceptance plus a brute-force stable-matching oracle.

Both sides are addressed by integer index into the utility arrays.  An agent's
strict order is by descending utility with ties going to the lower index; a
pair is admissible only when it is acceptable to both sides.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, Mapping

import numpy as np

from dynmatch.core import _descending_order, _ranks

MAX_ENUMERATION_SIDE = 7


@dataclass(frozen=True, eq=False)
class ConstructedPreferences:
    """Utilities that one run of deferred acceptance treats as preferences.

    ``proposer_utility[p, r]`` and ``receiver_utility[r, p]``; the ``*_ok``
    masks default to ``utility >= 0``.  Precomputed orders may be passed in to
    avoid re-sorting on every call when only the masks change.
    """

    proposer_utility: np.ndarray
    receiver_utility: np.ndarray
    proposer_ok: np.ndarray | None = None
    receiver_ok: np.ndarray | None = None
    proposer_order: np.ndarray | None = None
    receiver_rank: np.ndarray | None = None

    def __post_init__(self) -> None:
        n_p, n_r = self.proposer_utility.shape
        if self.receiver_utility.shape != (n_r, n_p):
            raise ValueError("receiver_utility must have shape (n_receivers, n_proposers)")
        if self.proposer_ok is None:
            object.__setattr__(self, "proposer_ok", self.proposer_utility >= 0)
        if self.receiver_ok is None:
            object.__setattr__(self, "receiver_ok", self.receiver_utility >= 0)
        if self.proposer_order is None:
            object.__setattr__(self, "proposer_order", _descending_order(self.proposer_utility))
        if self.receiver_rank is None:
            object.__setattr__(
                self, "receiver_rank", _ranks(_descending_order(self.receiver_utility))
            )

    @classmethod
    def from_dicts(
        cls,
        proposer_utility: Mapping[int, Mapping[int, float]],
        receiver_utility: Mapping[int, Mapping[int, float]],
        n_proposers: int | None = None,
        n_receivers: int | None = None,
    ) -> ConstructedPreferences:
        """Build from nested dicts; missing entries are unacceptable (-1)."""
        n_p = n_proposers if n_proposers is not None else 1 + max(proposer_utility, default=-1)
        n_r = n_receivers if n_receivers is not None else 1 + max(receiver_utility, default=-1)
        pu = np.full((n_p, n_r), -1.0)
        ru = np.full((n_r, n_p), -1.0)
        for p, row in proposer_utility.items():
            for r, u in row.items():
                pu[p, r] = u
        for r, row in receiver_utility.items():
            for p, u in row.items():
                ru[r, p] = u
        return cls(pu, ru)

    @property
    def n_proposers(self) -> int:
        return self.proposer_utility.shape[0]

    @property
    def n_receivers(self) -> int:
        return self.proposer_utility.shape[1]

    @cached_property
    def proposer_rank(self) -> np.ndarray:
        return _ranks(self.proposer_order)

    @cached_property
    def mutual_ok(self) -> np.ndarray:
        return self.proposer_ok & self.receiver_ok.T

    def swapped(self) -> ConstructedPreferences:
        """The same market with the receiving side proposing."""
        return ConstructedPreferences(
            self.receiver_utility,
            self.proposer_utility,
            self.receiver_ok,
            self.proposer_ok,
        )


def run_da(
    proposers: Iterable[int],
    receivers: Iterable[int],
    prefs: ConstructedPreferences,
) -> dict[int, int]:
    """Proposer-optimal stable matching between the given agents.

    Rounds are simultaneous: every proposer not currently held proposes to its
    next admissible receiver, each receiver keeps its best proposal so far.
    Returns a dict proposer -> receiver.
    """
    proposers = [int(p) for p in proposers]
    if not proposers:
        return {}
    recv_active = np.zeros(prefs.n_receivers, dtype=bool)
    recv_idx = np.fromiter((int(r) for r in receivers), dtype=np.int64)
    if recv_idx.size == 0:
        return {}
    recv_active[recv_idx] = True

    candidates: dict[int, list[int]] = {}
    for p in proposers:
        order = prefs.proposer_order[p]
        keep = recv_active[order] & prefs.proposer_ok[p, order] & prefs.receiver_ok[order, p]
        lst = order[keep].tolist()
        if lst:
            candidates[p] = lst

    rank = prefs.receiver_rank
    pointer = dict.fromkeys(candidates, 0)
    held: dict[int, int] = {}  # receiver -> proposer
    free = sorted(candidates)
    while free:
        offers: dict[int, list[int]] = {}
        for p in free:
            i = pointer[p]
            if i < len(candidates[p]):
                pointer[p] = i + 1
                offers.setdefault(candidates[p][i], []).append(p)
        if not offers:
            break
        free = []
        for r, ps in offers.items():
            current = held.get(r)
            pool = ps if current is None else ps + [current]
            best = min(pool, key=lambda q: rank[r, q])
            held[r] = best
            free.extend(q for q in pool if q != best)
        free = [p for p in free if pointer[p] < len(candidates[p])]
    return {p: r for r, p in held.items()}


def blocking_pairs(
    matching: Mapping[int, int],
    prefs: ConstructedPreferences,
    proposers: Iterable[int],
    receivers: Iterable[int],
) -> list[tuple[int, int]]:
    """All admissible (p, r) pairs that strictly prefer each other to their partners."""
    partner_of_r = {r: p for p, r in matching.items()}
    out = []
    receivers = list(receivers)
    for p in proposers:
        mine = matching.get(p)
        for r in receivers:
            if mine == r or not prefs.mutual_ok[p, r]:
                continue
            if mine is not None and prefs.proposer_rank[p, r] > prefs.proposer_rank[p, mine]:
                continue
            theirs = partner_of_r.get(r)
            if theirs is not None and prefs.receiver_rank[r, p] > prefs.receiver_rank[r, theirs]:
                continue
            out.append((p, r))
    return out


def is_stable(
    matching: Mapping[int, int],
    prefs: ConstructedPreferences,
    proposers: Iterable[int] | None = None,
    receivers: Iterable[int] | None = None,
) -> tuple[bool, tuple[int, int] | None]:
    """Stability check returning ``(stable, witness)``.

    The witness is a blocking pair, or a matched pair that is not mutually
    acceptable.  Proposers and receivers default to every agent.
    """
    proposers = list(range(prefs.n_proposers)) if proposers is None else list(proposers)
    receivers = list(range(prefs.n_receivers)) if receivers is None else list(receivers)
    for p, r in matching.items():
        if not prefs.mutual_ok[p, r]:
            return False, (p, r)
    blocks = blocking_pairs(matching, prefs, proposers, receivers)
    if blocks:
        return False, blocks[0]
    return True, None


def _partial_injections(
    proposers: list[int], receivers: list[int], ok: np.ndarray
) -> Iterator[dict[int, int]]:
    used: set[int] = set()
    current: dict[int, int] = {}

    def rec(i: int) -> Iterator[dict[int, int]]:
        if i == len(proposers):
            yield dict(current)
            return
        p = proposers[i]
        yield from rec(i + 1)
        for r in receivers:
            if r not in used and ok[p, r]:
                used.add(r)
                current[p] = r
                yield from rec(i + 1)
                del current[p]
                used.discard(r)

    yield from rec(0)


def enumerate_stable(
    prefs: ConstructedPreferences,
    proposers: Iterable[int] | None = None,
    receivers: Iterable[int] | None = None,
) -> list[dict[int, int]]:
    """Every stable matching, by exhaustive search over partial injections."""
    proposers = list(range(prefs.n_proposers)) if proposers is None else list(proposers)
    receivers = list(range(prefs.n_receivers)) if receivers is None else list(receivers)
    if len(proposers) > MAX_ENUMERATION_SIDE or len(receivers) > MAX_ENUMERATION_SIDE:
        raise ValueError(
            f"enumeration limited to {MAX_ENUMERATION_SIDE} agents per side "
            f"(got {len(proposers)}x{len(receivers)})"
        )
    ok = prefs.mutual_ok
    return [
        m
        for m in _partial_injections(proposers, receivers, ok)
        if not blocking_pairs(m, prefs, proposers, receivers)
    ]


def is_proposer_optimal(
    matching: Mapping[int, int],
    stable: list[dict[int, int]],
    prefs: ConstructedPreferences,
) -> bool:
    """True iff every proposer weakly prefers ``matching`` to each stable matching."""
    n_r = prefs.n_receivers

    def rank(p: int, m: Mapping[int, int]) -> int:
        r = m.get(p)
        return n_r if r is None else int(prefs.proposer_rank[p, r])

    return all(rank(p, matching) <= rank(p, other) for other in stable for p in range(prefs.n_proposers))
