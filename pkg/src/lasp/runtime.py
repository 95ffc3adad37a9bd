"""In-process simulation of sequence-parallel linear attention.

A world of ``W`` workers is split into ``G = W / T`` groups of ``T``
consecutive ranks. Each group owns one sequence at a time; the rank with
local index ``t`` holds chunk ``t`` (0-based). Forward states travel up the
ring (``i -> i + 1``) and backward states travel down it (``i + 1 -> i``),
through per-rank mailboxes. Nothing ever crosses a group boundary.

Two schedulers are provided:

``lockstep``
    Ranks are stepped one at a time in dependency order inside the calling
    thread. A receive that finds no message is a protocol error.
``concurrent``
    One thread per rank; receives block until the message shows up.
"""

from __future__ import annotations

import enum
import json
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import HeadSplitError, PartitionError, ProtocolError, ShapeError, StateError
from .kernels import ChunkInputs, DecayStructures
from .linalg import Matrix, as_matrix, matmul

LOCKSTEP = "lockstep"
CONCURRENT = "concurrent"
MODES = (LOCKSTEP, CONCURRENT)

BYTES_PER_ELEMENT = 8


# ---------------------------------------------------------------------------
# topology and data placement


@dataclass(frozen=True)
class Topology:
    world_size: int
    sp_size: int

    def __post_init__(self):
        if self.world_size < 1 or self.sp_size < 1:
            raise PartitionError(f"world size and sp size must be positive ({self.world_size}, {self.sp_size})")
        if self.world_size % self.sp_size:
            raise PartitionError(
                f"sp size T={self.sp_size} does not divide world size W={self.world_size}"
            )

    @property
    def group_count(self) -> int:
        return self.world_size // self.sp_size

    def group_of(self, rank: int) -> int:
        return rank // self.sp_size

    def local_index(self, rank: int) -> int:
        return rank % self.sp_size

    def src_rank(self, rank: int) -> int:
        return (rank // self.sp_size) * self.sp_size

    @property
    def src_ranks(self) -> list[int]:
        return [g * self.sp_size for g in range(self.group_count)]

    def group_ranks(self, group: int) -> list[int]:
        base = group * self.sp_size
        return list(range(base, base + self.sp_size))


@dataclass(frozen=True)
class DistributionPlan:
    topology: Topology
    seq_len: int
    batch_count: int
    # (batch, 1-based chunk index) -> global rank
    assignment: Mapping[tuple[int, int], int]

    @property
    def chunk_size(self) -> int:
        return self.seq_len // self.topology.sp_size

    def group_of_batch(self, batch: int) -> int:
        return batch % self.topology.group_count

    def round_of_batch(self, batch: int) -> int:
        return batch // self.topology.group_count

    @property
    def round_count(self) -> int:
        return -(-self.batch_count // self.topology.group_count)

    def batches_in_round(self, rnd: int) -> list[int]:
        g = self.topology.group_count
        return [b for b in range(rnd * g, min((rnd + 1) * g, self.batch_count))]

    def ranks_of_batch(self, batch: int) -> list[int]:
        return [self.assignment[(batch, t)] for t in range(1, self.topology.sp_size + 1)]

    def placement_table(self) -> list[dict]:
        return [
            {
                "batch": b,
                "group": self.group_of_batch(b),
                "round": self.round_of_batch(b),
                "src_rank": self.topology.src_ranks[self.group_of_batch(b)],
                "ranks": self.ranks_of_batch(b),
            }
            for b in range(self.batch_count)
        ]


def plan_distribution(seq_len: int, world_size: int, sp_size: int, batch_count: int | None = None) -> DistributionPlan:
    """Place every chunk of every batch on a global rank.

    Batches are dealt round-robin to groups: batch ``b`` goes to group
    ``b mod G``, and its chunk ``t`` (1-based) lands on ``src + t - 1``.
    """
    topo = Topology(world_size, sp_size)
    if seq_len < 1 or seq_len % sp_size:
        raise PartitionError(f"sp size T={sp_size} does not divide sequence length N={seq_len}")
    if batch_count is None:
        batch_count = topo.group_count
    if batch_count < topo.group_count:
        raise PartitionError(
            f"batch count {batch_count} is smaller than group count G={topo.group_count}"
        )
    assignment = {}
    for b in range(batch_count):
        src = topo.src_ranks[b % topo.group_count]
        for t in range(1, sp_size + 1):
            assignment[(b, t)] = src + t - 1
    return DistributionPlan(topo, seq_len, batch_count, assignment)


def scatter_sequence(x, plan: DistributionPlan, batch: int = 0) -> dict[int, Matrix]:
    """Split one batch's ``N x d`` input by rows and hand each rank its chunk."""
    x = as_matrix(x, name="sequence")
    if x.shape[0] != plan.seq_len:
        raise ShapeError(f"sequence has {x.shape[0]} rows, plan expects N={plan.seq_len}")
    chunks = kernels.split_rows(x, plan.chunk_size)
    return {plan.assignment[(batch, t + 1)]: c for t, c in enumerate(chunks)}


def gather_sequence(per_rank: Mapping[int, Matrix], plan: DistributionPlan, batch: int = 0) -> Matrix:
    try:
        return np.concatenate([per_rank[r] for r in plan.ranks_of_batch(batch)], axis=0)
    except KeyError as exc:
        raise StateError(f"rank {exc.args[0]} holds no chunk for batch {batch}") from None


@dataclass(frozen=True)
class ProjectionWeights:
    w_q: Matrix
    w_k: Matrix
    w_v: Matrix

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v"):
            m = as_matrix(getattr(self, name), name=name)
            if m.shape[0] != m.shape[1]:
                raise ShapeError(f"{name} must be square, got {m.shape}")
            object.__setattr__(self, name, m)
        if not (self.w_q.shape == self.w_k.shape == self.w_v.shape):
            raise ShapeError("projection weights differ in shape")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


def split_heads(x: Matrix, heads: int) -> list[Matrix]:
    """Column blocks ``[h * dh, (h + 1) * dh)`` as contiguous copies."""
    width = x.shape[1]
    if heads < 1 or width % heads:
        raise HeadSplitError(f"head count {heads} does not divide model dimension {width}")
    dh = width // heads
    return [np.ascontiguousarray(x[:, h * dh : (h + 1) * dh]) for h in range(heads)]


def merge_heads(parts: Sequence[Matrix]) -> Matrix:
    return np.concatenate(list(parts), axis=1)


def head_chunks(q, k, v, heads: int, index: int = 1) -> list[ChunkInputs]:
    return [
        ChunkInputs(qh, kh, vh, index)
        for qh, kh, vh in zip(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads))
    ]


def project_qkv(x_t, w: ProjectionWeights, heads: int = 1, index: int = 1) -> list[ChunkInputs]:
    """Project one chunk of embeddings and split the result into heads."""
    x_t = as_matrix(x_t, name="X_t")
    if x_t.shape[1] != w.dim:
        raise ShapeError(f"X_t width {x_t.shape[1]} does not match weights {w.dim}")
    return head_chunks(matmul(x_t, w.w_q), matmul(x_t, w.w_k), matmul(x_t, w.w_v), heads, index)


# ---------------------------------------------------------------------------
# messages and traces


class Tag(str, enum.Enum):
    KV_FWD = "KV_FWD"
    DKV_BWD = "DKV_BWD"


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    tag: Tag
    layer: int
    head: int
    payload: Matrix

    @property
    def key(self) -> tuple:
        return (self.src, self.tag, self.layer, self.head)

    @property
    def elements(self) -> int:
        return int(self.payload.size)


@dataclass(frozen=True)
class TraceRecord:
    step: int
    src: int
    dst: int
    tag: str
    layer: int
    head: int
    elements: int
    bytes: int

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "src": self.src,
            "dst": self.dst,
            "tag": self.tag,
            "layer": self.layer,
            "head": self.head,
            "elements": self.elements,
            "bytes": self.bytes,
        }


class CommTrace:
    """Ordered log of every simulated message.

    Messages sent during one pass are buffered and committed in a canonical
    order (group, head, hop) once the pass finishes, so both schedulers
    produce the same trace.
    """

    def __init__(self, records: Iterable[TraceRecord] = ()):
        self.records: list[TraceRecord] = list(records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def commit(self, messages: Iterable[Message], topology: Topology) -> None:
        def order(m: Message):
            hop = topology.local_index(m.src)
            if m.tag is Tag.DKV_BWD:
                hop = topology.sp_size - 1 - hop
            return (topology.group_of(m.src), m.head, hop)

        for m in sorted(messages, key=order):
            self.records.append(
                TraceRecord(
                    step=len(self.records),
                    src=m.src,
                    dst=m.dst,
                    tag=m.tag.value,
                    layer=m.layer,
                    head=m.head,
                    elements=m.elements,
                    bytes=m.elements * BYTES_PER_ELEMENT,
                )
            )

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "CommTrace":
        records = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(TraceRecord(**{k: obj[k] for k in TraceRecord.__dataclass_fields__}))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ProtocolError(f"malformed trace record on line {lineno}: {exc}") from None
        return cls(records)

    @classmethod
    def read(cls, path) -> "CommTrace":
        return cls.from_jsonl(Path(path).read_text())


# ---------------------------------------------------------------------------
# workers


class Mailbox:
    def __init__(self, rank: int):
        self.rank = rank
        self._queues: dict[tuple, deque] = defaultdict(deque)
        self._cond = threading.Condition()

    def put(self, msg: Message) -> None:
        with self._cond:
            self._queues[msg.key].append(msg)
            self._cond.notify_all()

    def take(self, key: tuple, *, block: bool, timeout: float, abort: threading.Event | None = None) -> Message:
        with self._cond:
            if not block:
                q = self._queues.get(key)
                if not q:
                    raise ProtocolError(
                        f"rank {self.rank}: no {key[1].value} message from rank {key[0]} "
                        f"(layer {key[2]}, head {key[3]})",
                        rank=self.rank,
                        tag=key[1].value,
                    )
                return q.popleft()
            ok = self._cond.wait_for(
                lambda: bool(self._queues.get(key)) or (abort is not None and abort.is_set()),
                timeout=timeout,
            )
            if not ok or not self._queues.get(key):
                raise ProtocolError(
                    f"rank {self.rank}: timed out waiting for {key[1].value} from rank {key[0]} "
                    f"(layer {key[2]}, head {key[3]})",
                    rank=self.rank,
                    tag=key[1].value,
                )
            return self._queues[key].popleft()

    def pending(self) -> int:
        with self._cond:
            return sum(len(q) for q in self._queues.values())


@dataclass
class WorkerState:
    rank: int
    chunks: dict[tuple[int, int], ChunkInputs] = field(default_factory=dict)
    kv_cache: dict[tuple[int, int], Matrix] = field(default_factory=dict)
    outputs: dict[tuple[int, int], Matrix] = field(default_factory=dict)
    grads: dict[tuple[int, int], tuple[Matrix, Matrix, Matrix]] = field(default_factory=dict)
    events: list[tuple] = field(default_factory=list)

    def load(self, chunks: Sequence[ChunkInputs], layer: int = 0) -> None:
        for h, ci in enumerate(chunks):
            self.chunks[(layer, h)] = ci
            self.kv_cache.pop((layer, h), None)

    def heads(self, layer: int) -> list[int]:
        return sorted(h for (lay, h) in self.chunks if lay == layer)


class World:
    def __init__(self, topology: Topology, mode: str = LOCKSTEP, trace: CommTrace | None = None, recv_timeout: float = 30.0):
        if mode not in MODES:
            raise ValueError(f"unknown scheduling mode {mode!r}; expected one of {MODES}")
        self.topology = topology
        self.mode = mode
        self.trace = trace if trace is not None else CommTrace()
        self.recv_timeout = recv_timeout
        self.workers = [WorkerState(r) for r in range(topology.world_size)]
        self.mailboxes = [Mailbox(r) for r in range(topology.world_size)]
        self._sent: list[Message] = []
        self._sent_lock = threading.Lock()
        self._abort = threading.Event()

    def __getitem__(self, rank: int) -> WorkerState:
        return self.workers[rank]

    def send(self, msg: Message) -> None:
        topo = self.topology
        if topo.group_of(msg.src) != topo.group_of(msg.dst):
            raise ProtocolError(f"message {msg.src}->{msg.dst} crosses a group boundary", rank=msg.src, tag=msg.tag.value)
        msg = Message(msg.src, msg.dst, msg.tag, msg.layer, msg.head, msg.payload.copy())
        with self._sent_lock:
            self._sent.append(msg)
        self.workers[msg.src].events.append(("send", msg.tag.value, msg.layer, msg.head, msg.dst))
        self.mailboxes[msg.dst].put(msg)

    def recv(self, rank: int, src: int, tag: Tag, layer: int, head: int) -> Matrix:
        msg = self.mailboxes[rank].take(
            (src, tag, layer, head),
            block=self.mode == CONCURRENT,
            timeout=self.recv_timeout,
            abort=self._abort,
        )
        self.workers[rank].events.append(("recv", tag.value, layer, head, src))
        return msg.payload

    def active_ranks(self, layer: int) -> list[int]:
        """Ranks holding chunks for ``layer``; whole groups only."""
        topo = self.topology
        active = []
        for g in range(topo.group_count):
            ranks = topo.group_ranks(g)
            loaded = [bool(self.workers[r].heads(layer)) for r in ranks]
            if any(loaded) and not all(loaded):
                raise StateError(f"group {g} is only partially loaded for layer {layer}")
            if all(loaded):
                heads = {tuple(self.workers[r].heads(layer)) for r in ranks}
                if len(heads) != 1:
                    raise StateError(f"group {g} ranks disagree on head count for layer {layer}")
                active.extend(ranks)
        return active

    def _run(self, ranks: list[int], step, reverse: bool = False) -> None:
        self._abort.clear()
        if self.mode == LOCKSTEP:
            for r in sorted(ranks, reverse=reverse):
                step(r)
            return
        errors: list[BaseException] = []

        def target(r):
            try:
                step(r)
            except BaseException as exc:  # noqa: BLE001 - re-raised in caller
                errors.append(exc)
                self._abort.set()

        threads = [threading.Thread(target=target, args=(r,), name=f"lasp-rank-{r}") for r in ranks]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            # a timeout caused by another rank's failure is secondary
            primary = [e for e in errors if not isinstance(e, ProtocolError)]
            raise (primary or errors)[0]

    def _flush_trace(self) -> None:
        with self._sent_lock:
            sent, self._sent = self._sent, []
        self.trace.commit(sent, self.topology)
        leftovers = sum(mb.pending() for mb in self.mailboxes)
        if leftovers:
            raise ProtocolError(f"{leftovers} message(s) were sent but never received")


def _decays(lams, heads: int, chunk_size: int) -> list[DecayStructures]:
    if np.ndim(lams) == 0:
        lams = [float(lams)] * heads
    lams = list(lams)
    if len(lams) != heads:
        raise ShapeError(f"{len(lams)} decay rates given for {heads} heads")
    cache: dict[float, DecayStructures] = {}
    out = []
    for lam in lams:
        if lam not in cache:
            cache[lam] = kernels.build_decay(chunk_size, lam)
        out.append(cache[lam])
    return out


def _layout(world: World, layer: int) -> tuple[list[int], list[int], int]:
    ranks = world.active_ranks(layer)
    if not ranks:
        raise StateError(f"no rank holds data for layer {layer}")
    heads = world.workers[ranks[0]].heads(layer)
    rows = {world.workers[r].chunks[(layer, h)].rows for r in ranks for h in heads}
    if len(rows) != 1:
        raise ShapeError(f"chunks disagree on chunk size: {sorted(rows)}")
    return ranks, heads, rows.pop()


def run_forward(world: World, lams, layer: int = 0) -> dict[int, dict[int, Matrix]]:
    """Forward pass over every loaded group; returns ``{rank: {head: O_t}}``.

    Intra-chunk outputs are computed for every rank first, then the ring
    pass carries ``KV`` from each rank to its successor.
    """
    ranks, heads, chunk_size = _layout(world, layer)
    decays = _decays(lams, len(heads), chunk_size)
    topo = world.topology
    last = topo.sp_size - 1
    intra: dict[tuple[int, int], Matrix] = {}

    for r in ranks:
        w = world.workers[r]
        for h in heads:
            w.kv_cache.pop((layer, h), None)
            w.outputs.pop((layer, h), None)

    def intra_step(r):
        w = world.workers[r]
        for h in heads:
            intra[(r, h)] = kernels.intra_forward(w.chunks[(layer, h)], decays[h])

    def ring_step(r):
        w = world.workers[r]
        local = topo.local_index(r)
        for h in heads:
            ci = w.chunks[(layer, h)]
            if local == 0:
                kv_prev = np.zeros((ci.q.shape[1],) * 2)
            else:
                kv_prev = world.recv(r, r - 1, Tag.KV_FWD, layer, h)
            w.kv_cache[(layer, h)] = kv_prev
            w.outputs[(layer, h)] = intra[(r, h)] + kernels.inter_forward(ci.q, kv_prev, decays[h])
            kv = kernels.kv_update(kv_prev, ci.k, ci.v, decays[h])
            if local < last:
                world.send(Message(r, r + 1, Tag.KV_FWD, layer, h, kv))

    world._run(ranks, intra_step)
    world._run(ranks, ring_step)
    world._flush_trace()
    return {r: {h: world.workers[r].outputs[(layer, h)] for h in heads} for r in ranks}


def run_backward(world: World, d_out: Mapping[int, Sequence[Matrix]], lams, layer: int = 0) -> dict[int, dict[int, tuple[Matrix, Matrix, Matrix]]]:
    """Backward pass; ``d_out[rank][head]`` is the upstream gradient for that chunk.

    Returns ``{rank: {head: (dQ_t, dK_t, dV_t)}}``.
    """
    ranks, heads, chunk_size = _layout(world, layer)
    decays = _decays(lams, len(heads), chunk_size)
    topo = world.topology
    last = topo.sp_size - 1
    partial: dict[tuple[int, int], tuple[Matrix, Matrix, Matrix]] = {}

    for r in ranks:
        w = world.workers[r]
        for h in heads:
            if (layer, h) not in w.kv_cache:
                raise StateError(f"rank {r}: backward for layer {layer} head {h} before forward")
        if r not in d_out or len(d_out[r]) != len(heads):
            raise ShapeError(f"rank {r}: expected upstream gradients for {len(heads)} heads")

    def local_step(r):
        w = world.workers[r]
        for h in heads:
            ci = w.chunks[(layer, h)]
            do = as_matrix(d_out[r][h], name="dO_t")
            dq_i, dk_i, dv_i = kernels.intra_backward(ci, do, decays[h])
            dq = dq_i + kernels.inter_backward_q(do, w.kv_cache[(layer, h)], decays[h])
            partial[(r, h)] = (dq, dk_i, dv_i)

    def ring_step(r):
        w = world.workers[r]
        local = topo.local_index(r)
        for h in heads:
            ci = w.chunks[(layer, h)]
            do = as_matrix(d_out[r][h], name="dO_t")
            if local == last:
                dkv_next = np.zeros((ci.q.shape[1],) * 2)
            else:
                dkv_next = world.recv(r, r + 1, Tag.DKV_BWD, layer, h)
            dq, dk_i, dv_i = partial[(r, h)]
            dk = dk_i + kernels.inter_backward_k(ci.v, dkv_next, decays[h])
            dv = dv_i + kernels.inter_backward_v(ci.k, dkv_next, decays[h])
            w.grads[(layer, h)] = (dq, dk, dv)
            dkv = kernels.dkv_update(dkv_next, ci.q, do, decays[h])
            if local > 0:
                world.send(Message(r, r - 1, Tag.DKV_BWD, layer, h, dkv))

    world._run(ranks, local_step)
    world._run(ranks, ring_step, reverse=True)
    world._flush_trace()
    return {r: {h: world.workers[r].grads[(layer, h)] for h in heads} for r in ranks}


# ---------------------------------------------------------------------------
# multi-head orchestration and gradient sync


@dataclass
class MultiheadResult:
    out: Matrix
    grads: tuple[Matrix, Matrix, Matrix] | None
    trace: CommTrace
    world: World


def multihead_run(q, k, v, heads: int, sp_size: int, lams, d_out=None, mode: str = LOCKSTEP, trace: CommTrace | None = None) -> MultiheadResult:
    """Run one sequence through a single SP group of ``sp_size`` ranks.

    ``q, k, v`` are ``N x d``; each of the ``heads`` column blocks is an
    independent problem. Backward runs when ``d_out`` is given.
    """
    q, k, v = (as_matrix(m) for m in (q, k, v))
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"Q, K, V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    plan = plan_distribution(q.shape[0], sp_size, sp_size, 1)
    world = World(plan.topology, mode=mode, trace=trace)
    load_qkv(world, plan, 0, q, k, v, heads)
    outs = run_forward(world, lams)
    out = gather_heads(outs, plan, 0, heads)
    grads = None
    if d_out is not None:
        do = scatter_heads(d_out, plan, 0, heads)
        g = run_backward(world, do, lams)
        grads = tuple(
            gather_heads({r: {h: g[r][h][i] for h in range(heads)} for r in g}, plan, 0, heads)
            for i in range(3)
        )
    return MultiheadResult(out, grads, world.trace, world)


def load_qkv(world: World, plan: DistributionPlan, batch: int, q, k, v, heads: int, layer: int = 0) -> None:
    parts = [scatter_sequence(m, plan, batch) for m in (q, k, v)]
    for t, r in enumerate(plan.ranks_of_batch(batch), start=1):
        world.workers[r].load(head_chunks(parts[0][r], parts[1][r], parts[2][r], heads, t), layer)


def scatter_heads(x, plan: DistributionPlan, batch: int, heads: int) -> dict[int, list[Matrix]]:
    return {r: split_heads(c, heads) for r, c in scatter_sequence(x, plan, batch).items()}


def gather_heads(per_rank: Mapping[int, Mapping[int, Matrix]], plan: DistributionPlan, batch: int, heads: int) -> Matrix:
    merged = {r: merge_heads([per_rank[r][h] for h in range(heads)]) for r in plan.ranks_of_batch(batch)}
    return gather_sequence(merged, plan, batch)


def allreduce_mean_gradients(gradient_sets: Sequence[Mapping[str, Matrix]]) -> list[dict[str, Matrix]]:
    """Elementwise mean across groups, broadcast back to every group."""
    if not gradient_sets:
        raise ShapeError("no gradient sets to reduce")
    names = set(gradient_sets[0])
    for i, gs in enumerate(gradient_sets[1:], start=1):
        if set(gs) != names:
            raise ShapeError(f"group {i} carries gradients {sorted(gs)}, group 0 carries {sorted(names)}")
        for n in names:
            if np.shape(gs[n]) != np.shape(gradient_sets[0][n]):
                raise ShapeError(f"gradient {n!r}: group {i} shape {np.shape(gs[n])} differs from group 0")
    if len(gradient_sets) == 1:
        return [{n: np.array(gradient_sets[0][n], dtype=np.float64) for n in names}]
    mean = {n: np.mean(np.stack([np.asarray(gs[n], dtype=np.float64) for gs in gradient_sets]), axis=0) for n in names}
    return [{n: m.copy() for n, m in mean.items()} for _ in gradient_sets]
