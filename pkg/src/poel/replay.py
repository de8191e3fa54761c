"""Replay buffer over preallocated numpy ring storage, plus binary
snapshot persistence.

Transitions hold flattened feature vectors (layout defined by the
learner), the step outcome in compact form, and the per-episode object
rest heights that the lifting predicate needs.

Snapshot format "POELRB1": magic, version byte, little-endian header
(state_dim u4, action_dim u4, n_objects u4, capacity u8, size u8,
next_write u8, inserted u8), then `size` fixed-width records in
physical ring-slot order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SNAPSHOT_MAGIC = b"POELRB1"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<7sBIIIQQQQ")

DEFAULT_CAPACITY = 200_000


class SnapshotFormatError(ValueError):
    """Wrong magic bytes or unsupported snapshot version."""


class SnapshotCorruptionError(ValueError):
    """Snapshot header and payload disagree (truncated or padded file)."""


@dataclass(frozen=True)
class Transition:
    state: np.ndarray  # (state_dim,) float64 feature vector
    action: np.ndarray  # (action_dim,) float64
    next_state: np.ndarray  # (state_dim,)
    episode: int
    grasped: int  # object index, -1 for none
    released: int  # object index, -1 for none
    pushed_mask: int  # bit i set iff object i was pushed this step
    displacements: np.ndarray  # (n_objects,) per-object displacement norm
    initial_heights: np.ndarray  # (n_objects,) rest heights at episode start


def _record_dtype(state_dim: int, action_dim: int, n_objects: int) -> np.dtype:
    return np.dtype(
        [
            ("state", "<f8", (state_dim,)),
            ("action", "<f8", (action_dim,)),
            ("next_state", "<f8", (state_dim,)),
            ("episode", "<i8"),
            ("grasped", "i1"),
            ("released", "i1"),
            ("pushed", "u1"),
            ("displacements", "<f8", (n_objects,)),
            ("initial_heights", "<f8", (n_objects,)),
        ]
    )


class ReplayBuffer:
    """Ring buffer; eviction is strictly oldest-first once full."""

    def __init__(
        self,
        capacity: int = DEFAULT_CAPACITY,
        state_dim: int = 17,
        action_dim: int = 4,
        n_objects: int = 3,
    ):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.n_objects = n_objects
        self._records = np.zeros(capacity, dtype=_record_dtype(state_dim, action_dim, n_objects))
        self._next_write = 0
        self._size = 0
        self._inserted = 0

    # ---- state -------------------------------------------------------------

    @property
    def size(self) -> int:
        return self._size

    @property
    def inserted(self) -> int:
        """Total pushes ever, including evicted transitions."""
        return self._inserted

    def __len__(self) -> int:
        return self._size

    # ---- writes ------------------------------------------------------------

    def push(self, t: Transition) -> None:
        if t.state.shape != (self.state_dim,) or t.next_state.shape != (self.state_dim,):
            raise ValueError("state shape mismatch")
        if t.action.shape != (self.action_dim,):
            raise ValueError("action shape mismatch")
        if t.displacements.shape != (self.n_objects,) or t.initial_heights.shape != (self.n_objects,):
            raise ValueError("per-object field shape mismatch")
        rec = self._records[self._next_write]
        rec["state"] = t.state
        rec["action"] = t.action
        rec["next_state"] = t.next_state
        rec["episode"] = t.episode
        rec["grasped"] = t.grasped
        rec["released"] = t.released
        rec["pushed"] = t.pushed_mask
        rec["displacements"] = t.displacements
        rec["initial_heights"] = t.initial_heights
        self._next_write = (self._next_write + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self._inserted += 1

    # ---- reads -------------------------------------------------------------

    def _slot_of(self, age_order_index: int) -> int:
        """Physical slot of the i-th oldest stored transition."""
        if self._size < self.capacity:
            return age_order_index
        return (self._next_write + age_order_index) % self.capacity

    def transition_at(self, i: int) -> Transition:
        """i-th oldest transition (0 = oldest currently stored)."""
        if not 0 <= i < self._size:
            raise IndexError(f"index {i} out of range for size {self._size}")
        rec = self._records[self._slot_of(i)]
        return Transition(
            state=rec["state"].copy(),
            action=rec["action"].copy(),
            next_state=rec["next_state"].copy(),
            episode=int(rec["episode"]),
            grasped=int(rec["grasped"]),
            released=int(rec["released"]),
            pushed_mask=int(rec["pushed"]),
            displacements=rec["displacements"].copy(),
            initial_heights=rec["initial_heights"].copy(),
        )

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform with replacement over physical slots holding data."""
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        # Valid data always occupies slots [0, size): the ring fills from
        # slot 0 and only wraps once full, so slot order need not matter
        # for uniform sampling.
        return rng.integers(0, self._size, size=n)

    def sample_batch(self, n: int, rng: np.random.Generator) -> list[Transition]:
        slots = self.sample_indices(n, rng)
        out = []
        for slot in slots:
            rec = self._records[slot]
            out.append(
                Transition(
                    state=rec["state"].copy(),
                    action=rec["action"].copy(),
                    next_state=rec["next_state"].copy(),
                    episode=int(rec["episode"]),
                    grasped=int(rec["grasped"]),
                    released=int(rec["released"]),
                    pushed_mask=int(rec["pushed"]),
                    displacements=rec["displacements"].copy(),
                    initial_heights=rec["initial_heights"].copy(),
                )
            )
        return out

    def sample_arrays(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Batched view of sample_batch for training loops; consumes the
        rng stream identically."""
        slots = self.sample_indices(n, rng)
        recs = self._records[slots]
        return {
            "state": recs["state"],
            "action": recs["action"],
            "next_state": recs["next_state"],
            "displacements": recs["displacements"],
            "initial_heights": recs["initial_heights"],
        }

    # ---- persistence ---------------------------------------------------------

    def snapshot_save(self, path) -> None:
        header = _HEADER.pack(
            SNAPSHOT_MAGIC,
            SNAPSHOT_VERSION,
            self.state_dim,
            self.action_dim,
            self.n_objects,
            self.capacity,
            self._size,
            self._next_write,
            self._inserted,
        )
        payload = self._records[: self._size].tobytes()
        Path(path).write_bytes(header + payload)


def snapshot_load(path) -> ReplayBuffer:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise SnapshotCorruptionError("file shorter than snapshot header")
    magic, version, state_dim, action_dim, n_objects, capacity, size, next_write, inserted = (
        _HEADER.unpack_from(data)
    )
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotFormatError(f"bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise SnapshotFormatError(f"unsupported snapshot version {version}")
    if size > capacity or next_write >= max(capacity, 1) or inserted < size:
        raise SnapshotCorruptionError("inconsistent snapshot header")
    if size < capacity and next_write != size:
        # A partially filled ring always occupies slots [0, size).
        raise SnapshotCorruptionError("inconsistent snapshot header")
    dtype = _record_dtype(state_dim, action_dim, n_objects)
    expected = _HEADER.size + size * dtype.itemsize
    if len(data) != expected:
        raise SnapshotCorruptionError(
            f"payload length {len(data) - _HEADER.size} != {size} records"
        )
    buffer = ReplayBuffer(capacity, state_dim, action_dim, n_objects)
    buffer._records[:size] = np.frombuffer(data, dtype=dtype, count=size, offset=_HEADER.size)
    buffer._size = size
    buffer._next_write = next_write
    buffer._inserted = inserted
    return buffer


def buffers_equal(a: ReplayBuffer, b: ReplayBuffer) -> bool:
    """Bit-exact equality on configuration, counters, and stored records."""
    meta_equal = (
        a.capacity == b.capacity
        and a.state_dim == b.state_dim
        and a.action_dim == b.action_dim
        and a.n_objects == b.n_objects
        and a._size == b._size
        and a._next_write == b._next_write
        and a._inserted == b._inserted
    )
    if not meta_equal:
        return False
    return a._records[: a._size].tobytes() == b._records[: b._size].tobytes()
