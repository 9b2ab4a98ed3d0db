"""Server stub: session management, dispatch, and device memory service.

One session per connected client.  A session's message pump never blocks:
file operations run on worker tasks (serialized per descriptor, except
polls), coherence traffic is applied in arrival order, and heartbeats are
acknowledged immediately even while a blocking poll is parked.

During a file operation the driver's memory operations are served from
the request's prefetched buffers; a miss costs one copy round trip back
to the client.  Driver writes to process memory are accumulated into a
copy batch that rides home on the response (with overlapping prefetched
ranges updated in place so a later copy_from_user never sees stale
bytes).  With optimization off, each copy_to_user is flushed as its own
round trip instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from . import dsm as dsmmod
from .devices import Descriptor, Device, MemoryContext, RegionRef
from .errors import OpAborted, SessionClosed
from .kernel import Cancelled, Future, Kernel, Lock
from .memory import PAGE_SIZE
from .wire import (
    Channel,
    CopyDir,
    CopyRequest,
    Endpoint,
    FileOp,
    FileOpRequest,
    FileOpResponse,
    HeartbeatAck,
    Kind,
    Message,
    OpenAck,
    OpenRequest,
    PollMode,
    ProtocolError,
    decode_body,
)

log = logging.getLogger("rio.server")

# errno mirrors (kept local to avoid importing the device table)
_EBADF = 9
_EINVAL = 22
_ENODEV = 19
_EIO = 5

GBUF_REGION_BASE = 1 << 32  # global buffers use client-chosen ids in this namespace

CAUSE_HEARTBEAT_TIMEOUT = "HeartbeatTimeout"
CAUSE_LINK_DOWN = "LinkDown"
CAUSE_CLIENT_CLOSE = "ClientClose"
_CAUSE_BY_CODE = {0: CAUSE_LINK_DOWN, 1: CAUSE_HEARTBEAT_TIMEOUT, 2: CAUSE_CLIENT_CLOSE}


@dataclass
class ServerConfig:
    heartbeat_interval_ms: float = 500.0
    heartbeat_miss_limit: int = 3
    optimize: bool = True
    dma_policy: dsmmod.Policy = dsmmod.Policy.UPDATE_PUSH  # framesource maps + global buffers
    copy_round_limit: int = 16  # per-op guard against pathological devices

    @property
    def timeout_ms(self) -> float:
        return self.heartbeat_interval_ms * self.heartbeat_miss_limit


@dataclass
class ServerStats:
    cache_hits: int = 0
    cache_misses: int = 0
    batch_bytes: int = 0
    ops: int = 0
    cleanups: list = field(default_factory=list)


class Server:
    """Hosts devices and serves any number of client sessions."""

    def __init__(self, kernel: Kernel, devices: dict[str, Device],
                 config: Optional[ServerConfig] = None) -> None:
        self.kernel = kernel
        self.devices = devices
        self.config = config or ServerConfig()
        self.sessions: dict[int, ServerSession] = {}
        self.stats = ServerStats()

    def attach(self, endpoint: Endpoint) -> None:
        endpoint.on_message = lambda msg, ep=endpoint: self._route(ep, msg)

    def _route(self, endpoint: Endpoint, msg: Message) -> None:
        session = self.sessions.get(msg.session_id)
        if session is None:
            session = ServerSession(self, msg.session_id, endpoint)
            self.sessions[msg.session_id] = session
        session.on_message(msg)

    def census(self) -> dict[str, int]:
        """Residual bookkeeping, for leak audits."""
        counts = {"sessions": len(self.sessions), "descriptors": 0, "regions": 0,
                  "cache_entries": 0, "batch_entries": 0, "pending_copies": 0,
                  "workers": 0}
        for session in self.sessions.values():
            counts["descriptors"] += len(session.descs)
            counts["regions"] += len(session.regions)
            counts["pending_copies"] += len(session.pending_copies)
            counts["workers"] += len(session.workers)
            for ctx in session.live_ops.values():
                counts["cache_entries"] += len(ctx.cache)
                counts["batch_entries"] += len(ctx.batch)
        return counts


@dataclass
class _DescEntry:
    device: Device
    desc: Descriptor
    lock: Lock


@dataclass
class _RegionRec:
    region_id: int
    desc_id: int
    ref: RegionRef


class _OpContext:
    __slots__ = ("op_id", "desc_id", "cache", "batch", "rounds", "mapped")

    def __init__(self, op_id: int, desc_id: int,
                 prefetch: list[tuple[int, bytes]]) -> None:
        self.op_id = op_id
        self.desc_id = desc_id
        self.cache: list[list] = [[addr, bytearray(data)] for addr, data in prefetch]
        self.batch: list[tuple[int, bytes]] = []
        self.rounds = 0
        self.mapped: list[tuple[bytearray, int, int]] = []  # (buf, buf_off, client_addr)


class _MappedPagesStore(dsmmod.PageStore):
    """Region pages backed by the buffers a device handed to map_page."""

    def __init__(self, sources: list[tuple[bytearray, int]]) -> None:
        self.sources = sources  # per page: (buffer, offset)

    def read_page(self, index: int) -> bytes:
        buf, off = self.sources[index]
        return bytes(buf[off : off + PAGE_SIZE])

    def write_page(self, index: int, data: bytes) -> None:
        buf, off = self.sources[index]
        buf[off : off + PAGE_SIZE] = data


class ServerSession:
    def __init__(self, server: Server, session_id: int, endpoint: Endpoint) -> None:
        self.server = server
        self.kernel = server.kernel
        self.config = server.config
        self.session_id = session_id
        self.endpoint = endpoint
        self.descs: dict[int, _DescEntry] = {}
        self.regions: dict[int, _RegionRec] = {}
        self.live_ops: dict[int, _OpContext] = {}
        self.pending_copies: dict[int, Future] = {}
        self.workers: dict = {}  # insertion-ordered set of live worker tasks
        self.dsm = dsmmod.DsmNode(dsmmod.DsmNode.SERVER, self._send_coherence)
        self.last_heartbeat = self.kernel.now()
        self.cleaned = False
        self._out_seq = {ch: 0 for ch in Channel}
        self._in_seq = {ch: 0 for ch in Channel}
        self._copy_id = 1 << 62
        self._region_id = 1
        self._watchdog = self.kernel.spawn(self._watch_liveness(), "hb-watchdog")

    # -- wiring ------------------------------------------------------------

    def _send(self, kind: Kind, body) -> float:
        channel = {Kind.FILE_OP_RESPONSE: Channel.FILE_OP,
                   Kind.COPY_REQUEST: Channel.FILE_OP,
                   Kind.HEARTBEAT_ACK: Channel.HEARTBEAT,
                   Kind.OPEN_ACK: Channel.CONTROL}.get(kind, Channel.COHERENCE)
        seq = self._out_seq[channel]
        self._out_seq[channel] += 1
        return self.endpoint.send(Message(self.session_id, seq, channel, kind,
                                          body.pack() if body is not None else b""))

    def _send_coherence(self, body) -> None:
        self._send(body.kind, body)

    def on_message(self, msg: Message) -> None:
        if self.cleaned:
            return
        expected = self._in_seq[msg.channel]
        if msg.seq != expected:
            log.error("session %d: seq gap on %s (%d != %d)",
                      self.session_id, msg.channel.name, msg.seq, expected)
            self.cleanup(CAUSE_LINK_DOWN)
            return
        self._in_seq[msg.channel] = expected + 1
        try:
            self._dispatch_message(msg)
        except (ProtocolError, dsmmod.ProtocolFault) as exc:
            log.error("session %d: %s", self.session_id, exc)
            self.cleanup(CAUSE_LINK_DOWN)

    def _dispatch_message(self, msg: Message) -> None:
        if msg.channel == Channel.HEARTBEAT:
            self.last_heartbeat = self.kernel.now()
            if msg.kind == Kind.HEARTBEAT:
                self._send(Kind.HEARTBEAT_ACK, HeartbeatAck(msg.seq))
            return
        body = decode_body(msg)
        if msg.channel == Channel.COHERENCE:
            self.dsm.handle(body)
        elif msg.kind == Kind.OPEN:
            self._spawn_worker(self._handle_open(body), "open")
        elif msg.kind == Kind.CLEANUP:
            self.cleanup(_CAUSE_BY_CODE.get(body.cause, CAUSE_CLIENT_CLOSE))
        elif msg.kind == Kind.FILE_OP_REQUEST:
            self._spawn_worker(self._run_op(body), f"op-{body.op_id}")
        elif msg.kind == Kind.COPY_RESPONSE:
            fut = self.pending_copies.pop(body.op_id, None)
            if fut is not None:
                fut.set_result(body.data)

    def _spawn_worker(self, coro, name: str) -> None:
        task = self.kernel.spawn(coro, name)
        self.workers[task] = None
        task.add_done_callback(lambda t: self.workers.pop(t, None))

    # -- open / dispatch ------------------------------------------------------

    async def _handle_open(self, body: OpenRequest) -> None:
        device = self.server.devices.get(body.device_class)
        if device is None:
            self._send(Kind.OPEN_ACK, OpenAck(False, 0, _ENODEV))
            return
        try:
            desc = await device.open(body.flags)
        except Cancelled:
            raise
        except Exception:
            log.exception("open of %s failed", body.device_class)
            self._send(Kind.OPEN_ACK, OpenAck(False, 0, _EIO))
            return
        self.descs[desc.desc_id] = _DescEntry(device, desc, Lock(self.kernel))
        delivered = self._send(Kind.OPEN_ACK, OpenAck(True, desc.desc_id, 0))
        device.response_delivered(desc, delivered)

    async def _run_op(self, req: FileOpRequest) -> None:
        self.server.stats.ops += 1
        entry = self.descs.get(req.desc)
        if entry is None:
            self._send(Kind.FILE_OP_RESPONSE, FileOpResponse(req.op_id, -_EBADF))
            return
        ctx = _OpContext(req.op_id, req.desc, req.prefetch)
        self.live_ops[req.op_id] = ctx
        mem = ServerMemoryContext(self, ctx)
        try:
            if req.op == FileOp.POLL:
                result = await self._run_poll(entry, req, mem)
            else:
                async with entry.lock:
                    result = await self._run_locked_op(entry, req, ctx, mem)
        except (Cancelled, SessionClosed):
            self.live_ops.pop(req.op_id, None)
            return
        except OpAborted:
            result = -_EINVAL
        except Exception:
            # A handler bug must not strand the caller until the
            # disconnect horizon; answer with an I/O error instead.
            log.exception("op %d (%s) raised", req.op_id, req.op.name)
            result = -_EIO
        batch = ctx.batch
        self.live_ops.pop(req.op_id, None)
        if self.cleaned:
            return
        self.server.stats.batch_bytes += sum(len(d) for _, d in batch)
        delivered = self._send(Kind.FILE_OP_RESPONSE,
                               FileOpResponse(req.op_id, result, batch))
        entry.device.response_delivered(entry.desc, delivered)

    async def _run_locked_op(self, entry: _DescEntry, req: FileOpRequest,
                             ctx: _OpContext, mem: MemoryContext) -> int:
        device, desc = entry.device, entry.desc
        if req.op == FileOp.READ:
            return await device.read(desc, req.addr, req.length, mem)
        if req.op == FileOp.WRITE:
            return await device.write(desc, req.addr, req.length, mem)
        if req.op == FileOp.IOCTL:
            return await device.ioctl(desc, req.cmd, req.addr, mem)
        if req.op == FileOp.MMAP:
            return await self._run_mmap(entry, req, ctx, mem)
        if req.op == FileOp.CLOSE_MAP:
            return await self._run_close_map(entry, req.region)
        if req.op == FileOp.RELEASE:
            await self._release_descriptor(entry)
            return 0
        return -_EINVAL

    async def _run_poll(self, entry: _DescEntry, req: FileOpRequest,
                        mem: MemoryContext) -> int:
        wait = req.mode != PollMode.NONBLOCKING
        poll_task = self.kernel.spawn(
            entry.device.poll(entry.desc, req.events, wait, mem), "poll")
        budget = req.budget_ms if req.mode == PollMode.TIMEOUT else None
        finished, result = await self.kernel.race_timeout(poll_task, budget)
        return result if finished else 0

    async def _run_mmap(self, entry: _DescEntry, req: FileOpRequest,
                        ctx: _OpContext, mem: MemoryContext) -> int:
        result = await entry.device.mmap(entry.desc, req.length, req.offset, mem)
        if result < 0:
            return result
        npages = dsmmod.pages_for(req.length)
        if len(ctx.mapped) != npages:
            return -_EINVAL
        by_addr = sorted(ctx.mapped, key=lambda m: m[2])
        base = req.addr
        for i, (_, _, target_off) in enumerate(by_addr):
            if target_off != i * PAGE_SIZE:
                return -_EINVAL
        store = _MappedPagesStore([(buf, off) for buf, off, _ in by_addr])
        policy = (self.config.dma_policy if entry.device.class_name == "framesource"
                  else dsmmod.Policy.INVALIDATE)
        region_id = self._region_id
        self._region_id += 1
        region = dsmmod.make_server_region(region_id, base, req.length, store,
                                           dsmmod.Origin.MAP_PAGE, policy)
        # The client maps the whole range: split the kernel-side sections
        # down to page tracking and account the mappings.
        region.tracker.split(0, npages)
        for i in range(npages):
            region.tracker.map_count[i] += 1
        self.dsm.register_region(region)
        ref = RegionRef(region_id, req.length, None, self)
        self.regions[region_id] = _RegionRec(region_id, entry.desc.desc_id, ref)
        attach = getattr(entry.device, "region_attached", None)
        if attach is not None:
            attach(entry.desc, ref)
        return region_id

    async def _run_close_map(self, entry: _DescEntry, region_id: int) -> int:
        rec = self.regions.get(region_id)
        if rec is None:
            return -_EINVAL
        await self._drop_region(entry, rec)
        return 0

    async def _drop_region(self, entry: _DescEntry, rec: _RegionRec) -> None:
        await entry.device.close_map(entry.desc, rec.ref)
        region = self.dsm.regions.get(rec.region_id)
        if region is not None:
            for i in range(region.npages):
                region.tracker.map_count[i] = 0
            if region.origin == dsmmod.Origin.MAP_PAGE:
                # Unmapped: stitch split units back into sections.
                region.tracker.coalesce(0, region.npages)
        self.dsm.drop_region(rec.region_id)
        self.regions.pop(rec.region_id, None)

    async def _release_descriptor(self, entry: _DescEntry) -> None:
        for rec in [r for r in self.regions.values() if r.desc_id == entry.desc.desc_id]:
            await self._drop_region(entry, rec)
        await entry.device.release(entry.desc)
        self.descs.pop(entry.desc.desc_id, None)

    # -- copy service ----------------------------------------------------------

    async def fetch_from_client(self, ctx: _OpContext, addr: int, length: int) -> bytes:
        """One copy round trip for a cache miss (instrumented, bounded)."""
        if ctx.rounds >= self.config.copy_round_limit:
            raise OpAborted(f"op {ctx.op_id} exceeded {self.config.copy_round_limit} copy rounds")
        ctx.rounds += 1
        copy_id = self._copy_id
        self._copy_id += 1
        fut = Future(f"copy-{copy_id}")
        self.pending_copies[copy_id] = fut
        self._send(Kind.COPY_REQUEST, CopyRequest(copy_id, CopyDir.FROM_USER, addr, length))
        return await fut

    async def push_to_client(self, ctx: _OpContext, addr: int, data: bytes) -> None:
        """Unoptimized mode: flush one driver write as its own round trip."""
        if ctx.rounds >= self.config.copy_round_limit:
            raise OpAborted(f"op {ctx.op_id} exceeded {self.config.copy_round_limit} copy rounds")
        ctx.rounds += 1
        copy_id = self._copy_id
        self._copy_id += 1
        fut = Future(f"copy-{copy_id}")
        self.pending_copies[copy_id] = fut
        self._send(Kind.COPY_REQUEST,
                   CopyRequest(copy_id, CopyDir.TO_USER, addr, len(data), data))
        await fut

    # -- global buffers ----------------------------------------------------------

    def create_global_buffer(self, size: int, buffer_id: int, client_base: int,
                             desc_id: int) -> RegionRef:
        if size <= 0:
            raise dsmmod.DsmError("global buffer size must be positive")
        region_id = GBUF_REGION_BASE | buffer_id
        if region_id in self.dsm.regions:
            raise dsmmod.DsmError(f"global buffer {buffer_id} already exists")
        buf = bytearray(dsmmod.pages_for(size) * PAGE_SIZE)
        region = dsmmod.make_server_region(
            region_id, client_base, size, dsmmod.BufferStore(buf),
            dsmmod.Origin.GLOBAL_BUFFER, self.config.dma_policy,
            initial=dsmmod.PageState.INVALID)  # the client allocated it
        self.dsm.register_region(region)
        ref = RegionRef(region_id, size, buf, self)
        self.regions[region_id] = _RegionRec(region_id, desc_id, ref)
        return ref

    def _dma_complete(self, region_id: int, offset: int, length: int) -> None:
        if not self.cleaned:
            self.dsm.dma_complete(region_id, offset, length)

    # -- liveness and cleanup ------------------------------------------------------

    async def _watch_liveness(self) -> None:
        interval = self.config.heartbeat_interval_ms
        while not self.cleaned:
            await self.kernel.sleep(interval)
            silent = self.kernel.now() - self.last_heartbeat
            if silent > self.config.timeout_ms:
                log.info("session %d: silent for %.0f ms, cleaning up",
                         self.session_id, silent)
                self.cleanup(CAUSE_HEARTBEAT_TIMEOUT)
                return

    def cleanup(self, cause: str) -> None:
        """Tear down every residual of this session.  Idempotent."""
        if self.cleaned:
            return
        self.cleaned = True
        self.server.stats.cleanups.append((self.session_id, cause))
        for task in list(self.workers):
            task.cancel()
        self._watchdog.cancel()
        for fut in self.pending_copies.values():
            fut.set_exception(SessionClosed(f"cleanup: {cause}"))
        self.pending_copies.clear()
        self.kernel.spawn(self._cleanup_devices(), "cleanup")

    async def _cleanup_devices(self) -> None:
        # Mapped areas first, then descriptors, mirroring process teardown.
        for rec in list(self.regions.values()):
            entry = self.descs.get(rec.desc_id)
            if entry is not None:
                try:
                    await entry.device.close_map(entry.desc, rec.ref)
                except Exception:
                    log.exception("close_map during cleanup failed")
            region = self.dsm.regions.get(rec.region_id)
            if region is not None:
                for i in range(region.npages):
                    region.tracker.map_count[i] = 0
                if region.origin == dsmmod.Origin.MAP_PAGE:
                    region.tracker.coalesce(0, region.npages)
            self.dsm.drop_region(rec.region_id)
        self.regions.clear()
        for entry in list(self.descs.values()):
            try:
                await entry.device.release(entry.desc)
            except Exception:
                log.exception("release during cleanup failed")
        self.descs.clear()
        self.live_ops.clear()
        self.server.sessions.pop(self.session_id, None)
        log.info("session %d: cleanup complete", self.session_id)


class ServerMemoryContext(MemoryContext):
    """Routes device memory operations through the prefetch cache and batch."""

    def __init__(self, session: ServerSession, ctx: _OpContext) -> None:
        self.session = session
        self.ctx = ctx

    # -- reads ------------------------------------------------------------

    async def copy_from_user(self, addr: int, length: int) -> bytes:
        if length == 0:
            return b""
        gaps = self._uncovered(addr, length)
        if gaps:
            self.session.server.stats.cache_misses += 1
            for gap_addr, gap_len in gaps:
                data = await self.session.fetch_from_client(self.ctx, gap_addr, gap_len)
                patched = self._overlay_batch(gap_addr, bytearray(data))
                self.ctx.cache.append([gap_addr, patched])
        else:
            self.session.server.stats.cache_hits += 1
        return self._read_cache(addr, length)

    def _uncovered(self, addr: int, length: int) -> list[tuple[int, int]]:
        spans = sorted((max(e_addr, addr), min(e_addr + len(e_data), addr + length))
                       for e_addr, e_data in self.ctx.cache
                       if e_addr < addr + length and e_addr + len(e_data) > addr)
        gaps = []
        cursor = addr
        for lo, hi in spans:
            if lo > cursor:
                gaps.append((cursor, lo - cursor))
            cursor = max(cursor, hi)
        if cursor < addr + length:
            gaps.append((cursor, addr + length - cursor))
        return gaps

    def _overlay_batch(self, addr: int, data: bytearray) -> bytearray:
        # Pending batched writes are newer than the client's memory.
        for b_addr, b_data in self.ctx.batch:
            lo = max(addr, b_addr)
            hi = min(addr + len(data), b_addr + len(b_data))
            if lo < hi:
                data[lo - addr : hi - addr] = b_data[lo - b_addr : hi - b_addr]
        return data

    def _read_cache(self, addr: int, length: int) -> bytes:
        out = bytearray(length)
        for e_addr, e_data in self.ctx.cache:
            lo = max(addr, e_addr)
            hi = min(addr + length, e_addr + len(e_data))
            if lo < hi:
                out[lo - addr : hi - addr] = e_data[lo - e_addr : hi - e_addr]
        return bytes(out)

    # -- writes ------------------------------------------------------------

    def _update_cache(self, addr: int, data: bytes) -> None:
        for entry in self.ctx.cache:
            e_addr, e_data = entry
            lo = max(addr, e_addr)
            hi = min(addr + len(data), e_addr + len(e_data))
            if lo < hi:
                e_data[lo - e_addr : hi - e_addr] = data[lo - addr : hi - addr]

    async def copy_to_user(self, addr: int, data: bytes) -> None:
        data = bytes(data)
        self._update_cache(addr, data)
        if self.session.config.optimize:
            self.ctx.batch.append((addr, data))
        else:
            await self.session.push_to_client(self.ctx, addr, data)

    async def put_user(self, addr: int, value: int, width: int) -> None:
        if width not in (1, 2, 4, 8):
            raise ValueError("put_user width must be 1/2/4/8")
        data = value.to_bytes(width, "little")
        # Small scalar stores always ride the response batch.
        self._update_cache(addr, data)
        self.ctx.batch.append((addr, data))

    # -- mapping and DMA ---------------------------------------------------

    def map_page(self, buf: bytearray, buf_offset: int, target_offset: int) -> None:
        if buf_offset % PAGE_SIZE or target_offset % PAGE_SIZE:
            raise ValueError("map_page requires page-aligned source and target")
        self.ctx.mapped.append((buf, buf_offset, target_offset))

    def alloc_global_buffer(self, size: int, buffer_id: int, client_base: int) -> RegionRef:
        return self.session.create_global_buffer(size, buffer_id, client_base,
                                                 self.ctx.desc_id)

    def dma_complete(self, region_ref, offset: int, length: int) -> None:
        if region_ref is not None:
            region_ref.dma_complete(offset, length)
