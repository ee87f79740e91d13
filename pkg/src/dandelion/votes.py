"""Shared vote board: per-(round, step) votes with per-receiver arrival times.

A flooded vote reaches every node at a known time (send time plus flood
distance), so instead of one delivery event per receiver the board keeps one
row of arrival times per vote. A node counting a step asks the board when its
own tally first exceeds the threshold; the board answers with vectorised
cumulative sums over arrival order and wakes the node at that instant. A node
counts each voter once, using whichever of that voter's messages reached it
first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .consensus import VoteMessage, coin_digest

INF = np.inf


@dataclass
class StepBoard:
    round: int
    step: int
    need: int  # smallest integer weight strictly above the threshold
    votes: list[VoteMessage] = field(default_factory=list)
    value_of: list[int] = field(default_factory=list)
    weight: list[int] = field(default_factory=list)
    values: list = field(default_factory=list)
    value_index: dict = field(default_factory=dict)
    cast_weight: list[int] = field(default_factory=list)
    by_voter: dict[int, list[int]] = field(default_factory=dict)
    valid: dict[int, list[bool]] = field(default_factory=dict)
    _rows: np.ndarray | None = None  # arrival times, one row per vote, grown by doubling

    def add(self, vote: VoteMessage, arrivals: np.ndarray) -> int:
        row = np.array(arrivals, dtype=float)
        vi = self.value_index.get(vote.value)
        if vi is None:
            vi = self.value_index[vote.value] = len(self.values)
            self.values.append(vote.value)
            self.cast_weight.append(0)
        k = len(self.votes)
        if self._rows is None:
            self._rows = np.empty((16, len(row)))
        elif k == len(self._rows):
            self._rows = np.concatenate([self._rows, np.empty_like(self._rows)])
        prior = self.by_voter.get(vote.voter_id)
        if prior:
            # Equivocation: each receiver keeps the first message it got.
            first = self._rows[prior].min(axis=0)
            later = row >= first
            row[later] = INF
            for i in prior:
                self._rows[i, ~later] = INF
            if vi not in {self.value_of[i] for i in prior}:
                self.cast_weight[vi] += vote.j
            prior.append(k)
        else:
            self.by_voter[vote.voter_id] = [k]
            self.cast_weight[vi] += vote.j
        self._rows[k] = row
        self.votes.append(vote)
        self.value_of.append(vi)
        self.weight.append(vote.j)
        return vi

    def matrix(self) -> np.ndarray:
        if self._rows is None:
            return np.empty((0, 0))
        return self._rows[:len(self.votes)]

    def validity(self, seed_id: int, check: Callable[[VoteMessage], bool]) -> np.ndarray:
        got = self.valid.setdefault(seed_id, [])
        for v in self.votes[len(got):]:
            got.append(check(v))
        return np.array(got, dtype=bool)

    def crossing(self, receivers: np.ndarray, valid_masks: list[tuple[np.ndarray, np.ndarray]],
                 value_ids: list[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Earliest time each receiver's tally exceeds the threshold, and for which value.

        ``valid_masks`` pairs a boolean selector over ``receivers`` with the
        validity vector of votes for the seed those receivers hold.
        """
        m = len(receivers)
        best_t = np.full(m, INF)
        best_v = np.full(m, -1, dtype=np.int64)
        if m == 0 or not self.votes:
            return best_t, best_v
        A = self.matrix()[:, receivers]
        for sel, ok in valid_masks:
            if not ok.all():
                bad = np.nonzero(~ok)[0]
                cols = np.nonzero(sel)[0]
                A[np.ix_(bad, cols)] = INF
        vals = np.array(self.value_of)
        w = np.array(self.weight, dtype=np.int64)
        cand = range(len(self.values)) if value_ids is None else value_ids
        for vi in cand:
            if self.cast_weight[vi] < self.need:
                continue
            idx = np.nonzero(vals == vi)[0]
            S = A[idx]
            order = np.argsort(S, axis=0, kind="stable")
            St = np.take_along_axis(S, order, axis=0)
            C = np.cumsum(w[idx][order], axis=0)
            hit = C >= self.need
            first = hit.argmax(axis=0)
            cols = np.arange(m)
            t = St[first, cols]
            t[~hit[first, cols]] = INF
            better = t < best_t
            best_t[better] = t[better]
            best_v[better] = vi
        return best_t, best_v

    def coin_min(self, receiver: int, now: int, ok: np.ndarray):
        """Lowest coin digest among votes counted by ``receiver`` up to ``now``."""
        best = None
        for i, v in enumerate(self.votes):
            if ok[i] and self._rows[i, receiver] <= now:
                d = coin_digest(v)
                if best is None or d < best:
                    best = d
        return best

    def weight_seen(self, receiver: int, now: int, ok: np.ndarray) -> int:
        return sum(self.weight[i] for i in range(len(self.votes)) if ok[i] and self._rows[i, receiver] <= now)


class VoteBoard:
    """All step boards of one simulation plus the nodes waiting on them.

    ``verify(vote, seed)`` checks a vote against the sortition seed a receiver
    holds; ``wake(node_id, round, step, value)`` is called when a watched
    node's tally crosses.
    """

    def __init__(self, sim, n: int, thresholds: tuple[int, int], final_step: int,
                 verify: Callable[[VoteMessage, bytes], bool]):
        self.sim = sim
        self.n = n
        self.need = thresholds
        self.final_step = final_step
        self.verify = verify
        self.boards: dict[tuple[int, int], StepBoard] = {}
        self.seed_ids: dict[bytes, int] = {}
        self.seeds: list[bytes] = []
        self.node_seed = np.zeros(n, dtype=np.int64)
        self.watch: dict[tuple[int, int], dict[int, list]] = {}
        self.early: dict[int, dict[int, list]] = {}
        self.wake: Callable | None = None
        self.early_wake: Callable | None = None
        self.early_pool: Callable[[int], set[int]] | None = None
        self.pending: dict[tuple[int, int], tuple[int, list]] = {}

    def set_seed(self, node_id: int, seed: bytes) -> None:
        sid = self.seed_ids.get(seed)
        if sid is None:
            sid = self.seed_ids[seed] = len(self.seeds)
            self.seeds.append(seed)
        self.node_seed[node_id] = sid

    def board(self, round_: int, step: int) -> StepBoard:
        key = (round_, step)
        b = self.boards.get(key)
        if b is None:
            b = self.boards[key] = StepBoard(round_, step, self.need[step == self.final_step])
        return b

    def forget_before(self, round_: int) -> None:
        for key in [k for k in self.boards if k[0] < round_]:
            del self.boards[key]
            for cur in self.watch.pop(key, {}).values():
                self.sim.cancel(cur[2])
            pend = self.pending.pop(key, None)
            if pend is not None:
                self.sim.cancel(pend[1])
        for r in [r for r in self.early if r < round_]:
            for cur in self.early.pop(r).values():
                self.sim.cancel(cur[2])

    def _masks(self, b: StepBoard, receivers: np.ndarray):
        seeds = self.node_seed[receivers]
        out = []
        for sid in np.unique(seeds).tolist():
            seed = self.seeds[sid]
            ok = b.validity(sid, lambda v, seed=seed: self.verify(v, seed))
            out.append((seeds == sid, ok))
        return out

    def _reschedule(self, table: dict[int, list], node_id: int, t: float, vi: int, fire, *args) -> None:
        cur = table.get(node_id)
        t = int(t)
        if cur is not None and cur[0] <= t:
            return
        if cur is not None:
            self.sim.cancel(cur[2])
        entry = [t, vi, None]
        entry[2] = self.sim.at(max(t, self.sim.now), fire, *args, node_id)
        table[node_id] = entry

    def cast(self, vote: VoteMessage, arrivals: np.ndarray) -> None:
        """Store a flooded vote; crossings are recomputed lazily.

        A receiver's crossing time can only move when a new vote reaches it,
        so recomputation is deferred to the earliest pending arrival at any
        other node and batches every vote cast before then.
        """
        b = self.board(vote.round, vote.step)
        row = np.ceil(arrivals)
        b.add(vote, row)
        others = row.copy()
        others[vote.voter_id] = INF
        t = float(others.min())
        key = (vote.round, vote.step)
        cur = self.pending.get(key)
        if t == INF or (cur is not None and cur[0] <= t):
            return
        if cur is not None:
            self.sim.cancel(cur[1])
        t = int(max(t, self.sim.now))
        self.pending[key] = (t, self.sim.at(t, self._flush, key))

    def _flush(self, key) -> None:
        self.pending.pop(key, None)
        b = self.boards.get(key)
        if b is None or max(b.cast_weight, default=0) < b.need:
            return
        watchers = self.watch.get(key)
        if watchers:
            ids = np.array(sorted(watchers), dtype=np.int64)
            t, v = b.crossing(ids, self._masks(b, ids))
            for nid, tt, vi in zip(ids.tolist(), t.tolist(), v.tolist()):
                if tt < INF:
                    self._reschedule(watchers, nid, tt, vi, self._fire, key)
        step = key[1]
        if step >= 2 and step != self.final_step and self.early_pool is not None:
            pool = self.early_pool(key[0])
            if pool:
                table = self.early.setdefault(key[0], {})
                ids = np.array(sorted(pool), dtype=np.int64)
                t, v = b.crossing(ids, self._masks(b, ids))
                for nid, tt, vi in zip(ids.tolist(), t.tolist(), v.tolist()):
                    if tt < INF:
                        self._reschedule(table, nid, tt, vi, self._fire_early, key[0])

    def count(self, node_id: int, round_: int, step: int):
        """Winning value if the node's tally already crossed; otherwise start watching."""
        b = self.board(round_, step)
        ids = np.array([node_id], dtype=np.int64)
        t, v = b.crossing(ids, self._masks(b, ids))
        key = (round_, step)
        watchers = self.watch.setdefault(key, {})
        if t[0] <= self.sim.now:
            return b.values[int(v[0])]
        if t[0] < INF:
            self._reschedule(watchers, node_id, t[0], int(v[0]), self._fire, key)
        else:
            watchers.setdefault(node_id, [INF, -1, None])
        return None

    def unwatch(self, node_id: int, round_: int, step: int) -> None:
        watchers = self.watch.get((round_, step))
        if watchers:
            cur = watchers.pop(node_id, None)
            if cur is not None:
                self.sim.cancel(cur[2])

    def _fire(self, key, node_id: int) -> None:
        cur = self.watch[key].pop(node_id)
        self.wake(node_id, key[0], key[1], self.boards[key].values[cur[1]])

    def watch_early(self, node_id: int, round_: int) -> bool:
        """Check whether some post-proposal step already crossed for this node."""
        ids = np.array([node_id], dtype=np.int64)
        best = INF
        for (r, s), b in self.boards.items():
            if r != round_ or s < 2 or s == self.final_step:
                continue
            t, v = b.crossing(ids, self._masks(b, ids))
            if t[0] < best:
                best = t[0]
        if best <= self.sim.now:
            return True
        if best < INF:
            self._reschedule(self.early.setdefault(round_, {}), node_id, best, -1, self._fire_early, round_)
        return False

    def cancel_early(self, node_id: int, round_: int) -> None:
        table = self.early.get(round_)
        if table:
            cur = table.pop(node_id, None)
            if cur is not None:
                self.sim.cancel(cur[2])

    def _fire_early(self, round_: int, node_id: int) -> None:
        self.early[round_].pop(node_id, None)
        self.early_wake(node_id, round_)

    def coin(self, node_id: int, round_: int, step: int) -> int:
        b = self.board(round_, step)
        ok = b.validity(int(self.node_seed[node_id]),
                        lambda v, seed=self.seeds[int(self.node_seed[node_id])]: self.verify(v, seed))
        d = b.coin_min(node_id, self.sim.now, ok)
        return 0 if d is None else d[-1] & 1

    def weight_seen(self, node_id: int, round_: int, step: int) -> int:
        b = self.boards.get((round_, step))
        if b is None:
            return 0
        sid = int(self.node_seed[node_id])
        ok = b.validity(sid, lambda v, seed=self.seeds[sid]: self.verify(v, seed))
        return b.weight_seen(node_id, self.sim.now, ok)
