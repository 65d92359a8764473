"""FIFO step replay with uniform sequence sampling and chunked persistence.

Steps are appended per stream (one stream per environment instance) into
fixed-capacity rings. Sequences of any requested length are sampled uniformly
over all valid start offsets within a stream — crossing episode boundaries is
allowed and expected; `is_first` flags tell the consumer where to reset
state. A bounded side store keeps recurrent states keyed by (stream, step
index) so training can continue sequences where they left off.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arrayio import FORMAT_VERSION, FormatError, read_arrays, write_arrays

CHUNK_STEPS = 1024


class InsufficientData(Exception):
    """Raised when the buffer cannot yet serve a request; never padded over."""


class ChunkFormatError(Exception):
    """Raised when an on-disk chunk file is corrupt or incompatible."""


@dataclass
class StepRecord:
    image: np.ndarray          # (H, W, 3) uint8
    action: int
    reward: float
    is_first: bool
    is_terminal: bool

    def __post_init__(self):
        if self.image.dtype != np.uint8 or self.image.ndim != 3 \
                or self.image.shape[-1] != 3:
            raise ValueError("StepRecord: image must be (H, W, 3) uint8")
        if not np.isfinite(self.reward):
            raise ValueError("StepRecord: reward must be finite")

    @property
    def cont(self) -> float:
        # continuation flag: 0 exactly when the episode ended for real;
        # truncation keeps it 1
        return 0.0 if self.is_terminal else 1.0


@dataclass
class ReplayChunk:
    image: np.ndarray        # (B, T, H, W, 3) uint8
    action: np.ndarray       # (B, T) int32
    reward: np.ndarray       # (B, T) float32
    is_first: np.ndarray     # (B, T) bool
    is_terminal: np.ndarray  # (B, T) bool
    cont: np.ndarray         # (B, T) float32
    keys: list[tuple[int, int]]  # per sequence: (stream, global start index)

    @property
    def batch(self) -> int:
        return self.image.shape[0]

    @property
    def length(self) -> int:
        return self.image.shape[1]


class _Stream:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.total = 0  # steps ever appended; oldest retained = total - size
        self.arrays: dict[str, np.ndarray] | None = None
        self.last_terminal = False

    @property
    def size(self) -> int:
        return min(self.total, self.capacity)

    @property
    def oldest(self) -> int:
        return self.total - self.size

    def _allocate(self, image_shape: tuple[int, ...]) -> None:
        cap = self.capacity
        self.arrays = {
            "image": np.zeros((cap, *image_shape), np.uint8),
            "action": np.zeros(cap, np.int32),
            "reward": np.zeros(cap, np.float32),
            "is_first": np.zeros(cap, bool),
            "is_terminal": np.zeros(cap, bool),
            "cont": np.zeros(cap, np.float32),
        }

    def append(self, rec: StepRecord) -> int:
        if self.arrays is None:
            self._allocate(rec.image.shape)
        is_first = rec.is_first or self.last_terminal
        slot = self.total % self.capacity
        self.arrays["image"][slot] = rec.image
        self.arrays["action"][slot] = rec.action
        self.arrays["reward"][slot] = rec.reward
        self.arrays["is_first"][slot] = is_first
        self.arrays["is_terminal"][slot] = rec.is_terminal
        self.arrays["cont"][slot] = rec.cont
        self.last_terminal = rec.is_terminal
        index = self.total
        self.total += 1
        return index

    def read(self, start: int, length: int) -> dict[str, np.ndarray]:
        if start < self.oldest or start + length > self.total:
            raise InsufficientData(
                f"window [{start}, {start + length}) outside retained "
                f"[{self.oldest}, {self.total})"
            )
        idx = np.arange(start, start + length) % self.capacity
        return {k: v[idx] for k, v in self.arrays.items()}


class ReplayBuffer:
    def __init__(self, capacity: int, streams: int = 1):
        if capacity < streams or streams < 1:
            raise ValueError("capacity must cover at least one step per stream")
        self.capacity = capacity
        self.streams = [_Stream(capacity // streams) for _ in range(streams)]
        self._states: dict[tuple[int, int], object] = {}
        self._state_cap = 8192

    def __len__(self) -> int:
        return sum(s.size for s in self.streams)

    @property
    def total_appended(self) -> int:
        return sum(s.total for s in self.streams)

    def append(self, rec: StepRecord, stream: int = 0) -> int:
        """Add one step; returns its global index within the stream."""
        index = self.streams[stream].append(rec)
        self._evict_states()
        return index

    # ---------------------------------------------------------------- sample

    def sample(self, batch: int, length: int,
               rng: np.random.Generator) -> ReplayChunk:
        """Uniformly sample `batch` sequences of `length` steps."""
        if batch < 1 or length < 1:
            raise ValueError("batch and length must be positive")
        counts = [max(0, s.size - length + 1) for s in self.streams]
        total = sum(counts)
        if total == 0:
            raise InsufficientData(
                f"no stream holds {length} contiguous steps yet "
                f"(sizes: {[s.size for s in self.streams]})"
            )
        fields: dict[str, list[np.ndarray]] = {
            k: [] for k in ("image", "action", "reward", "is_first",
                            "is_terminal", "cont")}
        keys: list[tuple[int, int]] = []
        for _ in range(batch):
            flat = int(rng.integers(0, total))
            for si, c in enumerate(counts):
                if flat < c:
                    break
                flat -= c
            stream = self.streams[si]
            start = stream.oldest + flat
            window = stream.read(start, length)
            for k in fields:
                fields[k].append(window[k])
            keys.append((si, start))
        return ReplayChunk(
            **{k: np.stack(v) for k, v in fields.items()}, keys=keys
        )

    # ---------------------------------------------------- carried state store

    def store_state(self, key: tuple[int, int], state: object) -> None:
        """Remember a recurrent state reached after processing up to `key`."""
        self._states[key] = state
        while len(self._states) > self._state_cap:
            self._states.pop(next(iter(self._states)))

    def fetch_state(self, key: tuple[int, int]) -> object | None:
        """State stored for this continuation point, or None for a cold start."""
        return self._states.get(key)

    def _evict_states(self) -> None:
        dead = [k for k in self._states
                if k[1] < self.streams[k[0]].oldest]
        for k in dead:
            del self._states[k]

    # ------------------------------------------------------------ persistence

    def save(self, directory: str | Path) -> list[Path]:
        """Write retained steps as fixed-size chunk files; returns the paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for stale in directory.glob("*.bin"):
            stale.unlink()
        paths = []
        file_index = 0
        for si, stream in enumerate(self.streams):
            if stream.arrays is None:
                continue
            for off in range(0, stream.size, CHUNK_STEPS):
                n = min(CHUNK_STEPS, stream.size - off)
                base = stream.oldest + off
                window = stream.read(base, n)
                window = {k: (v.astype(np.uint8) if v.dtype == bool else v)
                          for k, v in window.items()}
                path = directory / f"{file_index:06d}.bin"
                write_arrays(path, window, meta={
                    "kind": "replay-chunk", "stream": si,
                    "base_index": base, "steps": n,
                })
                paths.append(path)
                file_index += 1
        return paths

    @classmethod
    def load(cls, directory: str | Path, capacity: int,
             streams: int = 1) -> "ReplayBuffer":
        directory = Path(directory)
        buf = cls(capacity, streams)
        files = sorted(directory.glob("*.bin"))
        parts: dict[int, list[tuple[int, dict[str, np.ndarray]]]] = {}
        for path in files:
            try:
                arrays, meta = read_arrays(path)
            except FormatError as e:
                raise ChunkFormatError(str(e)) from None
            if meta.get("kind") != "replay-chunk":
                raise ChunkFormatError(f"{path}: not a replay chunk")
            if int(meta.get("steps", -1)) != len(arrays["image"]):
                raise ChunkFormatError(f"{path}: step count mismatch")
            parts.setdefault(int(meta["stream"]), []).append(
                (int(meta["base_index"]), arrays))
        for si, chunks in parts.items():
            if si >= streams:
                raise ChunkFormatError(
                    f"chunk for stream {si} but buffer has {streams} streams")
            stream = buf.streams[si]
            chunks.sort()
            for base, arrays in chunks:
                n = len(arrays["image"])
                if stream.arrays is None:
                    stream._allocate(arrays["image"].shape[1:])
                slots = np.arange(base, base + n) % stream.capacity
                for k in stream.arrays:
                    v = arrays[k]
                    if stream.arrays[k].dtype == bool:
                        v = v.astype(bool)
                    stream.arrays[k][slots] = v
                stream.total = max(stream.total, base + n)
            if stream.size:
                last_slot = (stream.total - 1) % stream.capacity
                stream.last_terminal = bool(
                    stream.arrays["is_terminal"][last_slot])
        return buf


def inspect_chunk(path: str | Path) -> dict:
    """Summarize one chunk file; raises ChunkFormatError when corrupt."""
    try:
        arrays, meta = read_arrays(path)
    except FormatError as e:
        raise ChunkFormatError(str(e)) from None
    if meta.get("kind") != "replay-chunk":
        raise ChunkFormatError(f"{path}: not a replay chunk")
    steps = int(meta.get("steps", -1))
    if steps != len(arrays["image"]):
        raise ChunkFormatError(f"{path}: header says {steps} steps, "
                               f"payload has {len(arrays['image'])}")
    return {
        "path": str(path),
        "format_version": FORMAT_VERSION,
        "stream": int(meta.get("stream", 0)),
        "base_index": int(meta.get("base_index", 0)),
        "steps": steps,
        "episodes_started": int(arrays["is_first"].astype(bool).sum()),
        "terminals": int(arrays["is_terminal"].astype(bool).sum()),
        "reward_sum": float(arrays["reward"].sum()),
        "image_shape": list(arrays["image"].shape[1:]),
    }
