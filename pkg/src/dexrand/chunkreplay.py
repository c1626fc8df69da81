"""Truncated episodic replay: fixed-length chunks with stored initial hidden states.

An episode (or the part of it collected in one batch) is cut into chunks of
``T`` transitions. Each chunk carries the recurrent state recorded at its
start during generation; during optimization the state handed to a chunk's
successor is overwritten with the final state of the chunk's own forward pass.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from dexrand.tinynet import HiddenState

NETS = ("policy", "value")
_generation_counter = itertools.count(1)


class IntegrityError(ValueError):
    pass


class StalenessError(RuntimeError):
    pass


@dataclass
class EpisodeChunk:
    episode_id: int
    index: int
    data: dict[str, np.ndarray]  # each (T, ...), zero-padded past ``length``
    mask: np.ndarray  # (T,) bool
    h0: dict[str, HiddenState]  # per network, vectors of size R
    has_successor: bool

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def chunk_episode(episode_id: int, transitions: dict[str, np.ndarray], hidden: dict[str, HiddenState],
                  T: int = 10) -> list[EpisodeChunk]:
    """Split one episode into ``ceil(len / T)`` linked chunks.

    ``hidden[net]`` holds the states recorded every ``T`` steps of generation
    (arrays of shape (n, R)); entry ``k`` is the state before step ``k * T``.
    """
    if T < 1:
        raise ValueError("chunk length must be >= 1")
    lengths = {len(v) for v in transitions.values()}
    if len(lengths) != 1:
        raise IntegrityError("transition fields have different lengths")
    L = lengths.pop()
    if L == 0:
        return []
    n = -(-L // T)
    for net in NETS:
        if net not in hidden or len(hidden[net].h) < n or len(hidden[net].c) < n:
            raise IntegrityError(f"missing recorded hidden state for {net} network")
    chunks = []
    for k in range(n):
        lo, hi = k * T, min((k + 1) * T, L)
        data = {}
        for name, arr in transitions.items():
            arr = np.asarray(arr)
            pad = np.zeros((T,) + arr.shape[1:], dtype=arr.dtype)
            pad[: hi - lo] = arr[lo:hi]
            data[name] = pad
        mask = np.zeros(T, dtype=bool)
        mask[: hi - lo] = True
        h0 = {net: HiddenState(np.array(hidden[net].c[k]), np.array(hidden[net].h[k])) for net in NETS}
        chunks.append(EpisodeChunk(episode_id, k, data, mask, h0, k + 1 < n))
    return chunks


@dataclass
class ChunkBuffer:
    """Sealed batch of chunks stored as stacked arrays (chunk axis first)."""

    data: dict[str, np.ndarray]
    mask: np.ndarray  # (N, T)
    h0: dict[str, HiddenState]  # (N, R) per network
    episode: np.ndarray  # (N,)
    level: np.ndarray  # chunk index within its episode
    successor: np.ndarray  # index of the next chunk, -1 if none
    generation: np.ndarray  # (N,) buffer generation each chunk was created in
    refresh: bool = True
    current_generation: int = 0
    h0_generated: dict[str, HiddenState] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.episode)

    @property
    def T(self) -> int:
        return self.mask.shape[1]

    def valid_transitions(self) -> int:
        return int(self.mask.sum())


def seal(chunks: list[EpisodeChunk], refresh: bool = True) -> ChunkBuffer:
    """Stack chunks into a buffer and link successors."""
    if not chunks:
        raise ValueError("cannot seal an empty buffer")
    gen = next(_generation_counter)
    names = list(chunks[0].data)
    data = {n: np.stack([c.data[n] for c in chunks]) for n in names}
    where = {(c.episode_id, c.index): i for i, c in enumerate(chunks)}
    if len(where) != len(chunks):
        raise IntegrityError("duplicate (episode, chunk index) pair")
    succ = np.full(len(chunks), -1, dtype=np.int64)
    for i, c in enumerate(chunks):
        if c.index > 0 and (c.episode_id, c.index - 1) not in where:
            raise IntegrityError(f"episode {c.episode_id} chunk {c.index} has no predecessor")
        if c.has_successor:
            j = where.get((c.episode_id, c.index + 1))
            if j is None:
                raise IntegrityError(f"episode {c.episode_id} chunk {c.index} lost its successor")
            succ[i] = j
    h0 = {net: HiddenState(np.stack([c.h0[net].c for c in chunks]), np.stack([c.h0[net].h for c in chunks]))
          for net in NETS}
    return ChunkBuffer(
        data=data,
        mask=np.stack([c.mask for c in chunks]),
        h0=h0,
        episode=np.array([c.episode_id for c in chunks], dtype=np.int64),
        level=np.array([c.index for c in chunks], dtype=np.int64),
        successor=succ,
        generation=np.full(len(chunks), gen, dtype=np.int64),
        refresh=refresh,
        current_generation=gen,
        h0_generated={net: h.copy() for net, h in h0.items()},
    )


def iterate_minibatches(buffer: ChunkBuffer, minibatch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Partition chunk indices so chunk k of an episode precedes chunk k+1.

    Chunks are grouped by their index within the episode, shuffled within
    each group, and the groups are concatenated in increasing order before
    slicing into minibatches. Each minibatch comes back sorted by level.
    """
    if minibatch_size < 1:
        raise ValueError("minibatch size must be >= 1")
    if minibatch_size > buffer.size:
        raise ValueError(f"minibatch size {minibatch_size} exceeds buffer size {buffer.size}")
    order = []
    for lvl in np.unique(buffer.level):
        idx = np.flatnonzero(buffer.level == lvl)
        order.append(idx[rng.permutation(len(idx))])
    flat = np.concatenate(order)
    return [flat[i:i + minibatch_size] for i in range(0, len(flat), minibatch_size)]


def waves(buffer: ChunkBuffer, minibatch: np.ndarray) -> list[np.ndarray]:
    """Split a minibatch into groups of equal level, in increasing level order."""
    lv = buffer.level[minibatch]
    return [minibatch[lv == v] for v in np.unique(lv)]


def refresh_hidden(buffer: ChunkBuffer, chunk: int | np.ndarray, final: dict[str, HiddenState]) -> ChunkBuffer:
    """Overwrite successors' initial states with the processed chunks' final states.

    ``chunk`` may be a single index or an array; ``final[net]`` is then
    (R,) or (len(chunk), R). Chunks without a successor are skipped.
    """
    if not buffer.refresh:
        return buffer
    idx = np.atleast_1d(np.asarray(chunk, dtype=np.int64))
    succ = buffer.successor[idx]
    keep = succ >= 0
    if not np.any(keep):
        return buffer
    stale = buffer.generation[succ[keep]] != buffer.generation[idx[keep]]
    if np.any(stale) or np.any(buffer.generation[succ[keep]] != buffer.current_generation):
        raise StalenessError("successor chunk belongs to a different buffer generation")
    for net in NETS:
        c = np.asarray(final[net].c).reshape(len(idx), -1)
        h = np.asarray(final[net].h).reshape(len(idx), -1)
        buffer.h0[net].c[succ[keep]] = c[keep]
        buffer.h0[net].h[succ[keep]] = h[keep]
    return buffer


def last_valid(states: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Pick, per sequence, the hidden state after its last valid step.

    ``states`` is (T+1, B, R) with index 0 the initial state; ``mask`` (B, T).
    """
    lengths = mask.sum(axis=1)
    return states[lengths, np.arange(states.shape[1])]
