"""Laplace noise, the per-frame budget ledger, releases and privacy-degradation calculators."""

from __future__ import annotations

import fcntl
import math
import os
import random
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .chunking import ChunkSpec, max_chunk_span
from .relational import ReleaseValue
from .sensitivity import ReleaseSensitivity

_EPS_TOL = 1e-12


class UniformSource(Protocol):
    def uniform(self, low: float, high: float) -> float: ...


def deployment_rng() -> random.SystemRandom:
    """Noise source backed by the operating system's entropy pool."""
    return random.SystemRandom()


def laplace_sample(b: float, rng: UniformSource) -> float:
    """One Laplace(0, b) draw by inverse CDF."""
    if b < 0:
        raise ValueError("scale must be nonnegative")
    if b == 0:
        return 0.0
    while True:
        u = float(rng.uniform(-0.5, 0.5))
        tail = 1.0 - 2.0 * abs(u)
        if tail > 0.0:
            return -b * math.copysign(1.0, u) * math.log(tail)


def laplace_samples(b: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorised inverse-CDF draws, same transform as :func:`laplace_sample`."""
    if b == 0:
        return np.zeros(n)
    u = rng.uniform(-0.5, 0.5, size=n)
    tail = 1.0 - 2.0 * np.abs(u)
    bad = tail <= 0.0
    while bad.any():
        u[bad] = rng.uniform(-0.5, 0.5, size=int(bad.sum()))
        tail = 1.0 - 2.0 * np.abs(u)
        bad = tail <= 0.0
    return -b * np.sign(u) * np.log(tail)


# ---------------------------------------------------------------- ledger

class Decision(Enum):
    ACCEPT = "accept"
    DENY = "deny"


@dataclass(frozen=True)
class Reservation:
    camera_id: str
    first_frame: int
    last_frame: int
    rho_frames: int


class BudgetLedger:
    """Remaining budget per frame for one camera; frames never charged hold the full epsilon."""

    def __init__(self, camera_id: str, epsilon: float):
        if not epsilon > 0:
            raise ValueError("epsilon must be positive")
        self.camera_id = camera_id
        self.epsilon = float(epsilon)
        self._spent = np.zeros(0)

    def _grow(self, n: int) -> None:
        if n > len(self._spent):
            self._spent = np.concatenate([self._spent, np.zeros(max(n, 2 * len(self._spent)) - len(self._spent))])

    def remaining(self, first: int, last: int) -> np.ndarray:
        first = max(first, 0)
        if last < first:
            return np.zeros(0)
        self._grow(last + 1)
        return self.epsilon - self._spent[first:last + 1]

    def min_remaining(self, first: int, last: int) -> float:
        rem = self.remaining(first, last)
        return float(rem.min()) if len(rem) else self.epsilon

    def can_admit(self, first: int, last: int, rho_frames: int, eps_q: float) -> bool:
        return self.min_remaining(first - rho_frames, last + rho_frames) >= eps_q - _EPS_TOL

    def charge(self, first: int, last: int, eps_q: float) -> None:
        first = max(first, 0)
        self._grow(last + 1)
        self._spent[first:last + 1] += eps_q

    def check_and_reserve(self, first: int, last: int, rho_frames: int, eps_q: float) -> Decision:
        """Single-camera admission without a journal; see :class:`LedgerStore` for the persistent form."""
        if not eps_q > 0:
            raise ValueError("eps_q must be positive")
        if not self.can_admit(first, last, rho_frames, eps_q):
            return Decision.DENY
        self.charge(first, last, eps_q)
        return Decision.ACCEPT

    def state(self) -> np.ndarray:
        used = np.flatnonzero(self._spent)
        end = int(used[-1]) + 1 if len(used) else 0
        return self.epsilon - self._spent[:end]


class LedgerStore:
    """Ledgers for every camera, persisted as an append-only journal and replayed on open.

    Admission is serialised by a thread lock and, across processes, an exclusive file lock on the
    journal.  Entries appended by other processes are replayed before each decision.
    """

    JOURNAL = "journal.tsv"

    def __init__(self, directory: str | Path | None, epsilons: dict[str, float]):
        self.epsilons = dict(epsilons)
        self.ledgers: dict[str, BudgetLedger] = {}
        self.path = Path(directory) / self.JOURNAL if directory is not None else None
        self._offset = 0
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch(exist_ok=True)
            self._replay_new()

    def ledger(self, camera_id: str) -> BudgetLedger:
        if camera_id not in self.ledgers:
            if camera_id not in self.epsilons:
                raise KeyError(f"no budget policy for camera {camera_id!r}")
            self.ledgers[camera_id] = BudgetLedger(camera_id, self.epsilons[camera_id])
        return self.ledgers[camera_id]

    def _replay_new(self) -> None:
        with open(self.path, "rb") as fh:
            fh.seek(self._offset)
            data = fh.read()
        complete = data[:data.rfind(b"\n") + 1]
        for line in complete.decode("utf-8").splitlines():
            if not line.strip():
                continue
            _qid, cam, a, b, eps = line.split("\t")
            self.ledger(cam).charge(int(a), int(b), float(eps))
        self._offset += len(complete)

    def check_and_reserve(self, query_id: str, reservations: Sequence[Reservation], eps_q: float) -> Decision:
        """Admit a query on every interval at once, or on none of them."""
        if not eps_q > 0:
            raise ValueError("eps_q must be positive")
        if "\t" in query_id or "\n" in query_id:
            raise ValueError("query id may not contain tabs or newlines")
        with self._lock:
            fh = open(self.path, "ab") if self.path is not None else None
            try:
                if fh is not None:
                    fcntl.flock(fh, fcntl.LOCK_EX)
                    self._replay_new()
                ok = all(self.ledger(r.camera_id).can_admit(r.first_frame, r.last_frame, r.rho_frames, eps_q)
                         for r in reservations)
                if not ok:
                    return Decision.DENY
                if fh is not None:
                    text = "".join(f"{query_id}\t{r.camera_id}\t{r.first_frame}\t{r.last_frame}\t{eps_q!r}\n"
                                   for r in reservations)
                    fh.write(text.encode("utf-8"))
                    fh.flush()
                    os.fsync(fh.fileno())
                    self._offset += len(text.encode("utf-8"))
                for r in reservations:
                    self.ledger(r.camera_id).charge(r.first_frame, r.last_frame, eps_q)
                return Decision.ACCEPT
            finally:
                if fh is not None:
                    fcntl.flock(fh, fcntl.LOCK_UN)
                    fh.close()


def replay_journal(path: str | Path, epsilons: dict[str, float]) -> dict[str, np.ndarray]:
    """Ledger state rebuilt from a journal file alone."""
    store = LedgerStore(Path(path).parent, epsilons)
    return {cam: led.state() for cam, led in store.ledgers.items()}


# ---------------------------------------------------------------- releases

@dataclass(frozen=True)
class NoisyRelease:
    release_id: str
    key: tuple | None
    value: float | object  # number, or the winning key for ARGMAX
    noise_scale: float
    epsilon: float
    raw: float | None = None  # kept for owner-side experiments; never printed in private mode


def noise_scale(agg: str, delta_q: float, epsilon: float) -> float:
    """Laplace scale for one release.  Noisy-max pays twice, since edits can move rows between keys."""
    if delta_q == 0:
        return 0.0
    return (2.0 if agg == "ARGMAX" else 1.0) * delta_q / epsilon


def release(values: Sequence[ReleaseValue], sens: Sequence[ReleaseSensitivity], epsilons: Sequence[float],
            decision: Decision, rng: UniformSource) -> list[NoisyRelease]:
    """Independent Laplace noise per release; ARGMAX reveals only the winning key."""
    if decision is not Decision.ACCEPT:
        raise RuntimeError("release called without an admitted budget")
    if not (len(values) == len(sens) == len(epsilons)):
        raise RuntimeError(f"mismatched release lists ({len(values)}, {len(sens)}, {len(epsilons)})")
    out = []
    for v, s, eps in zip(values, sens, epsilons):
        if v.release_id != s.release_id:
            raise RuntimeError(f"release id mismatch {v.release_id!r} vs {s.release_id!r}")
        b = noise_scale(s.agg, s.delta_q, eps)
        if s.agg == "ARGMAX":
            noised = [(k, score + laplace_sample(b, rng)) for k, score in v.scores]
            winner = max(range(len(noised)), key=lambda i: (noised[i][1], -i))
            out.append(NoisyRelease(v.release_id, v.key, noised[winner][0], b, eps, v.raw))
        else:
            out.append(NoisyRelease(v.release_id, v.key, v.raw + laplace_sample(b, rng), b, eps, v.raw))
    return out


def noisy_argmax(scores: Sequence[float]) -> int:
    """Index of the largest already-noised score; ties go to the earliest key."""
    return max(range(len(scores)), key=lambda i: (scores[i], -i))


# ---------------------------------------------------------------- degradation

def effective_epsilon(epsilon: float, rho: float, k: int, event_rho: float, event_k: int,
                      spec: ChunkSpec) -> float:
    """Privacy actually enjoyed by a (event_rho, event_k) event when noise was set for (rho, k)."""
    base = k * max_chunk_span(rho, spec)
    if base == 0:
        return math.inf if event_k > 0 else 0.0
    return epsilon * event_k * max_chunk_span(event_rho, spec) / base


def detection_bound(eps_eff: float, alpha: float) -> float:
    """Highest true-positive rate any test can reach at false-positive rate ``alpha``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    if eps_eff < 0:
        raise ValueError("eps_eff must be nonnegative")
    if math.isinf(eps_eff):
        return 1.0
    grow = math.exp(eps_eff)
    bound = min(grow * alpha, (alpha - (1.0 - grow)) / grow)
    return min(max(bound, 0.0), 1.0)


def threshold_error_rates(b: float, shift: float, thresholds: Iterable[float]) -> list[tuple[float, float]]:
    """Exact (P_FP, P_FN) of 'say present iff output > t' between Laplace(0,b) and Laplace(shift,b)."""
    def upper_tail(x: float) -> float:
        return 0.5 * math.exp(-x / b) if x >= 0 else 1.0 - 0.5 * math.exp(x / b)
    return [(upper_tail(t), 1.0 - upper_tail(t - shift)) for t in thresholds]
