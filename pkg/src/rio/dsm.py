"""Page-granular distributed shared memory with write-invalidate coherence.

A region pairs real pages on the server with shadow pages on the client.
Both sides run a ``DsmNode``; coherence is tracked per 4 KB page, each
page being read-write, read-only, or invalid.  Writes revoke the peer's
copy; reads fetch on demand.  Device DMA bypasses access checks, so DMA
completions enter through an explicit hook that either invalidates the
peer (one coalesced message) or pushes every touched page in a single
batch (update-push, used for frame streams).

The node core is scheduler-free: ``access``/``handle`` make synchronous
state transitions and emit outgoing messages through a callback, which
lets the same code run under the event kernel, under a real socket, or
inside the exhaustive model checker in the test suite.

Server-side tracking additionally models the kernel's large-page
bookkeeping: regions that originate from memory maps start as 1 MB
sections, split into 4 KB tracking in 2 MB units when the client maps a
subrange, and are stitched back on unmap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional

from .memory import PAGE_SIZE, ByteArena
from .wire import PageData, PageFetch, PageInvalidate, PageUpdateBatch

SECTION_PAGES = 256      # 1 MB
SPLIT_UNIT_PAGES = 512   # 2 MB: one split covers two adjacent sections


class PageState(IntEnum):
    INVALID = 0
    READ_ONLY = 1
    READ_WRITE = 2


class Policy(IntEnum):
    INVALIDATE = 0
    UPDATE_PUSH = 1


class Origin(IntEnum):
    MAP_PAGE = 0
    GLOBAL_BUFFER = 1


class DsmError(Exception):
    pass


class ProtocolFault(DsmError):
    """Coherence traffic that violates the protocol; session is bad."""


def pages_for(length: int) -> int:
    return (length + PAGE_SIZE - 1) // PAGE_SIZE


# ---------------------------------------------------------------------------
# Page storage backends
# ---------------------------------------------------------------------------


class PageStore:
    def read_page(self, index: int) -> bytes:
        raise NotImplementedError

    def write_page(self, index: int, data: bytes) -> None:
        raise NotImplementedError


class BufferStore(PageStore):
    """Pages backed by one contiguous buffer (server-side real pages)."""

    def __init__(self, buf: bytearray) -> None:
        self.buf = buf

    def read_page(self, index: int) -> bytes:
        off = index * PAGE_SIZE
        page = bytes(self.buf[off : off + PAGE_SIZE])
        if len(page) < PAGE_SIZE:
            page += b"\x00" * (PAGE_SIZE - len(page))
        return page

    def write_page(self, index: int, data: bytes) -> None:
        off = index * PAGE_SIZE
        take = min(PAGE_SIZE, len(self.buf) - off)
        self.buf[off : off + take] = data[:take]


class ArenaStore(PageStore):
    """Pages backed by a range of a process arena (client shadow pages)."""

    def __init__(self, arena: ByteArena, base: int) -> None:
        self.arena = arena
        self.base = base

    def read_page(self, index: int) -> bytes:
        return self.arena.read(self.base + index * PAGE_SIZE, PAGE_SIZE)

    def write_page(self, index: int, data: bytes) -> None:
        self.arena.write(self.base + index * PAGE_SIZE, data)


# ---------------------------------------------------------------------------
# Section tracking (server-side large-page model)
# ---------------------------------------------------------------------------


class SectionTracker:
    """Granularity bookkeeping for one region.

    Tracking is organized in 2 MB units.  A full unit is either two 1 MB
    sections (one state each) or 512 individually tracked pages; a
    partial tail unit is always page-tracked.
    """

    def __init__(self, npages: int, sectioned: bool, initial: PageState) -> None:
        self.npages = npages
        self.map_count = [0] * npages
        self._units: list[dict] = []
        full_units, tail = divmod(npages, SPLIT_UNIT_PAGES)
        for _ in range(full_units):
            if sectioned:
                self._units.append({"kind": "sections", "states": [initial, initial]})
            else:
                self._units.append({"kind": "pages", "states": [initial] * SPLIT_UNIT_PAGES})
        if tail:
            self._units.append({"kind": "pages", "states": [initial] * tail})

    # -- unit helpers ----------------------------------------------------

    def _unit_of(self, page: int) -> int:
        if not 0 <= page < self.npages:
            raise DsmError(f"page {page} outside region of {self.npages} pages")
        return page // SPLIT_UNIT_PAGES

    def is_paged(self, page: int) -> bool:
        return self._units[self._unit_of(page)]["kind"] == "pages"

    def get(self, page: int) -> PageState:
        unit = self._units[self._unit_of(page)]
        off = page % SPLIT_UNIT_PAGES
        if unit["kind"] == "pages":
            return unit["states"][off]
        return unit["states"][off // SECTION_PAGES]

    def set(self, page: int, state: PageState) -> None:
        unit = self._units[self._unit_of(page)]
        if unit["kind"] != "pages":
            raise DsmError(f"page {page} still tracked at section granularity")
        unit["states"][page % SPLIT_UNIT_PAGES] = state

    # -- split / coalesce -------------------------------------------------

    def split(self, first_page: int, npages: int) -> None:
        """Convert every 2 MB unit overlapping the range to page tracking."""
        if npages <= 0:
            return
        for u in range(self._unit_of(first_page), self._unit_of(first_page + npages - 1) + 1):
            unit = self._units[u]
            if unit["kind"] == "sections":
                s0, s1 = unit["states"]
                self._units[u] = {
                    "kind": "pages",
                    "states": [s0] * SECTION_PAGES + [s1] * SECTION_PAGES,
                }

    def coalesce(self, first_page: int, npages: int) -> None:
        """Stitch fully-unmapped 2 MB units in the range back into sections.

        A unit with any page still mapped is refused; partial tail units
        (never sectioned) are left as pages.
        """
        if npages <= 0:
            return
        for u in range(self._unit_of(first_page), self._unit_of(first_page + npages - 1) + 1):
            unit = self._units[u]
            if unit["kind"] != "pages" or len(unit["states"]) != SPLIT_UNIT_PAGES:
                continue
            base = u * SPLIT_UNIT_PAGES
            if any(self.map_count[base + i] for i in range(SPLIT_UNIT_PAGES)):
                raise DsmError(f"unit {u} still has mapped pages")
            states = unit["states"]
            fold = lambda part: PageState(min(part))  # most restrictive wins
            self._units[u] = {
                "kind": "sections",
                "states": [fold(states[:SECTION_PAGES]), fold(states[SECTION_PAGES:])],
            }

    def snapshot(self):
        return tuple(
            (unit["kind"], tuple(unit["states"])) for unit in self._units
        )


# ---------------------------------------------------------------------------
# Regions and the coherence node
# ---------------------------------------------------------------------------


@dataclass
class Region:
    region_id: int
    base: int                # client address of the first shadow page
    length: int
    npages: int
    origin: Origin
    policy: Policy
    store: PageStore
    tracker: SectionTracker  # permission states (per page once split)
    dma_state: Optional[list[PageState]] = None  # server side only
    epoch: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.epoch:
            self.epoch = [0] * self.npages

    def page_of(self, addr: int) -> int:
        off = addr - self.base
        if not 0 <= off < self.npages * PAGE_SIZE:
            raise DsmError(f"address {addr:#x} outside region {self.region_id}")
        return off // PAGE_SIZE


@dataclass
class _Pending:
    write: bool
    want_ownership: bool  # False on the two-step path; the retry claims separately
    waiters: list[Callable[[], None]] = field(default_factory=list)


class DsmNode:
    """One side's coherence engine.

    ``side`` is "client" or "server"; the server is the serialization
    point for crossed ownership claims (a claim arriving at a read-write
    server page is the loser of a race and is dropped; the client always
    yields).
    """

    CLIENT = "client"
    SERVER = "server"

    def __init__(self, side: str, send: Callable, *, coalesce_fetch_own: bool = True) -> None:
        assert side in (self.CLIENT, self.SERVER)
        self.side = side
        self.send = send
        self.coalesce_fetch_own = coalesce_fetch_own
        self.regions: dict[int, Region] = {}
        self._pending: dict[tuple[int, int], _Pending] = {}
        self.stats = {"fetches": 0, "invalidates_sent": 0, "pushes": 0, "installs": 0}

    # -- region lifecycle --------------------------------------------------

    def register_region(self, region: Region) -> None:
        if region.region_id in self.regions:
            raise DsmError(f"region id {region.region_id} already registered")
        self.regions[region.region_id] = region

    def drop_region(self, region_id: int) -> None:
        self.regions.pop(region_id, None)
        for key in [k for k in self._pending if k[0] == region_id]:
            pending = self._pending.pop(key)
            for wake in pending.waiters:
                wake()

    def region(self, region_id: int) -> Region:
        try:
            return self.regions[region_id]
        except KeyError:
            raise DsmError(f"unknown region {region_id}") from None

    def clear(self) -> None:
        for region_id in list(self.regions):
            self.drop_region(region_id)

    # -- local access path ---------------------------------------------------

    def access(self, region_id: int, page: int, write: bool,
               waiter: Optional[Callable[[], None]] = None) -> bool:
        """Attempt a local page access.

        Returns True when the access may proceed immediately.  Otherwise
        coherence traffic was started (or is already in flight) and
        ``waiter`` will be called once the page state changes; the caller
        must then retry.
        """
        region = self.region(region_id)
        if not region.tracker.is_paged(page):
            raise DsmError(f"page {page} of region {region_id} not split for access")
        key = (region_id, page)
        pending = self._pending.get(key)
        if pending is not None:
            if waiter is not None:
                pending.waiters.append(waiter)
            return False
        state = region.tracker.get(page)
        if state == PageState.READ_WRITE:
            return True
        if state == PageState.READ_ONLY:
            if not write:
                return True
            # Claim ownership: revoke the peer's copy and take read-write.
            region.tracker.set(page, PageState.READ_WRITE)
            self._set_dma(region, page, PageState.READ_WRITE)
            self.stats["invalidates_sent"] += 1
            self.send(PageInvalidate(region_id, [page]))
            return True
        # Invalid: fetch, optionally with ownership folded in.
        want_own = write and self.coalesce_fetch_own
        pending = _Pending(write=write, want_ownership=want_own)
        if waiter is not None:
            pending.waiters.append(waiter)
        self._pending[key] = pending
        self.stats["fetches"] += 1
        self.send(PageFetch(region_id, page, want_own))
        return False

    def local_write_done(self, region_id: int, page: int) -> None:
        region = self.region(region_id)
        region.epoch[page] += 1

    # -- incoming coherence traffic -------------------------------------------

    def handle(self, body) -> None:
        if isinstance(body, PageFetch):
            self._on_fetch(body)
        elif isinstance(body, PageData):
            self._on_data(body)
        elif isinstance(body, PageInvalidate):
            self._on_invalidate(body)
        elif isinstance(body, PageUpdateBatch):
            self._on_batch(body)
        else:
            raise ProtocolFault(f"unexpected coherence body {body!r}")

    def _on_fetch(self, body: PageFetch) -> None:
        region = self.region(body.region)
        state = region.tracker.get(body.page)
        if state == PageState.INVALID:
            raise ProtocolFault(
                f"peer fetched page {body.page} of region {body.region} "
                f"which is invalid on both sides"
            )
        self.send(PageData(body.region, body.page, region.store.read_page(body.page)))
        if body.want_ownership:
            region.tracker.set(body.page, PageState.INVALID)
            self._set_dma(region, body.page, PageState.INVALID)
        elif state == PageState.READ_WRITE:
            region.tracker.set(body.page, PageState.READ_ONLY)
            self._set_dma(region, body.page, PageState.READ_ONLY)

    def _on_data(self, body: PageData) -> None:
        key = (body.region, body.page)
        pending = self._pending.get(key)
        if pending is None:
            raise ProtocolFault(f"page data for {key} with no fetch in flight")
        region = self.region(body.region)
        region.store.write_page(body.page, body.data)
        region.epoch[body.page] += 1
        self.stats["installs"] += 1
        if pending.want_ownership:
            region.tracker.set(body.page, PageState.READ_WRITE)
            self._set_dma(region, body.page, PageState.READ_WRITE)
        else:
            region.tracker.set(body.page, PageState.READ_ONLY)
            self._set_dma(region, body.page, PageState.READ_ONLY)
        del self._pending[key]
        for wake in pending.waiters:
            wake()

    def _on_invalidate(self, body: PageInvalidate) -> None:
        region = self.region(body.region)
        for page in body.pages:
            state = region.tracker.get(page)
            if state == PageState.READ_WRITE and self.side == self.SERVER:
                # Crossed ownership claims: the server is the serialization
                # point and wins; the client's claim is void.
                continue
            region.tracker.set(page, PageState.INVALID)
            self._set_dma(region, page, PageState.INVALID)

    def _on_batch(self, body: PageUpdateBatch) -> None:
        # Pushed updates come from the serialization point: they install
        # unconditionally, demoting even a crossed local claim to read-only
        # (an uncoordinated local write loses to the device's DMA).
        region = self.region(body.region)
        for page, data in body.entries:
            region.store.write_page(page, data)
            region.epoch[page] += 1
            region.tracker.set(page, PageState.READ_ONLY)
            self._set_dma(region, page, PageState.READ_ONLY)
            self.stats["installs"] += 1

    # -- DMA completions -------------------------------------------------------

    def dma_complete(self, region_id: int, offset: int, length: int) -> int:
        """Apply the region's policy to pages a device just wrote.

        Returns the number of pages covered.  Invalidate policy: one
        coalesced invalidation listing every touched page, local side
        becomes read-write.  Update-push: one batch carrying every touched
        page's bytes, both sides read-only.
        """
        region = self.region(region_id)
        if length <= 0:
            return 0
        first = offset // PAGE_SIZE
        last = (offset + length - 1) // PAGE_SIZE
        pages = list(range(first, last + 1))
        if pages and not region.tracker.is_paged(pages[0]):
            raise DsmError("DMA into section-granularity range")
        for page in pages:
            region.epoch[page] += 1
        if region.policy == Policy.INVALIDATE:
            for page in pages:
                region.tracker.set(page, PageState.READ_WRITE)
                self._set_dma(region, page, PageState.READ_WRITE)
            self.stats["invalidates_sent"] += 1
            self.send(PageInvalidate(region_id, pages))
        else:
            entries = [(page, region.store.read_page(page)) for page in pages]
            for page in pages:
                region.tracker.set(page, PageState.READ_ONLY)
                self._set_dma(region, page, PageState.READ_ONLY)
            self.stats["pushes"] += 1
            self.send(PageUpdateBatch(region_id, entries))
        return len(pages)

    # -- helpers ----------------------------------------------------------------

    def _set_dma(self, region: Region, page: int, state: PageState) -> None:
        if region.dma_state is not None:
            region.dma_state[page] = state

    def quiescent(self) -> bool:
        return not self._pending


# ---------------------------------------------------------------------------
# Region construction helpers
# ---------------------------------------------------------------------------


def make_server_region(region_id: int, base: int, length: int, store: PageStore,
                       origin: Origin, policy: Policy,
                       initial: PageState = PageState.READ_WRITE) -> Region:
    npages = pages_for(length)
    sectioned = origin == Origin.MAP_PAGE
    tracker = SectionTracker(npages, sectioned=sectioned, initial=initial)
    return Region(region_id, base, length, npages, origin, policy, store,
                  tracker, dma_state=[initial] * npages)


def make_client_region(region_id: int, base: int, length: int, store: PageStore,
                       origin: Origin, policy: Policy,
                       initial: PageState = PageState.INVALID) -> Region:
    npages = pages_for(length)
    tracker = SectionTracker(npages, sectioned=False, initial=initial)
    return Region(region_id, base, length, npages, origin, policy, store, tracker)
