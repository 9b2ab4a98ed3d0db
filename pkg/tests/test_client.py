"""Client stub: prefetch, poll adjustment, fallback, liveness."""

import random
import struct

import pytest

from rio.client import HandleState, OpenError, RttEstimator
from rio.devices import (
    AUDIO_HEADER,
    AUDIO_XFER_OUT,
    FRAME_DQ,
    FRAME_SETUP,
    POLLIN,
    SensorDevice,
    frame_pattern,
    io,
)
from rio.dsm import PageState, Policy
from rio.errors import DisconnectedError
from rio.testbed import SimWorld
from rio.wire import LinkConfig


# ---------------------------------------------------------------------------
# Opening
# ---------------------------------------------------------------------------


def test_open_known_class_connects():
    world = SimWorld(link="lan")

    async def main():
        handle = await world.session.open("sensor")
        return handle.state, handle.name

    state, name = world.run(main())
    assert state is HandleState.CONNECTED
    assert name == "sensor"


def test_open_unknown_class_fails_from_ack():
    world = SimWorld(link="lan")

    async def main():
        with pytest.raises(OpenError) as info:
            await world.session.open("gpu")
        return info.value.errno

    assert world.run(main()) == 19  # ENODEV


def test_remote_handle_renamed_when_local_class_registered():
    world = SimWorld(link="lan")
    world.client.register_local_fallback("sensor", SensorDevice(world.kernel))

    async def main():
        handle = await world.session.open("sensor")
        return handle.name

    assert world.run(main()) == "sensor_rio"


# ---------------------------------------------------------------------------
# Prefetch computation
# ---------------------------------------------------------------------------


def test_registry_covers_audio_indirect_buffer_zero_misses():
    rng = random.Random(11)
    world = SimWorld(link="lan")

    async def main():
        handle = await world.session.open("audio")
        hdr = world.client.alloc(16)
        for _ in range(20):
            frames = rng.randint(1, 400)
            data = world.client.alloc(frames * 4)
            world.client.arena.write(data, rng.randbytes(frames * 4))
            world.client.arena.write(
                hdr, AUDIO_HEADER.pack(rng.getrandbits(32), data, frames))
            got = await handle.ioctl(AUDIO_XFER_OUT, hdr)
            assert got == frames

    world.run(main())
    assert world.session.coverage_misses == 0
    assert world.server.stats.cache_misses == 0


def test_dir_none_command_ships_nothing_and_pays_per_copy():
    from test_server import ScriptedDevice
    world = SimWorld(link="lan")
    cmd = io(ord("S"), 9)  # no direction or size encoded
    dev = ScriptedDevice(world.kernel, [("cfu", 0x7000, 8)])
    world.server.devices["scripted"] = dev

    async def main():
        handle = await world.session.open("scripted")
        world.client.arena.write(0x7000, bytes(range(8)))
        before = world.stats.round_trips
        assert await handle.ioctl(cmd, 0x7000) == 0
        return world.stats.round_trips - before

    assert world.run(main()) == 2  # the op plus one copy round trip
    assert world.session.coverage_misses == 1
    assert dev.observed[0] == bytes(range(8))


def test_command_without_registry_uses_dir_size_parse():
    world = SimWorld(link="lan")

    async def main():
        handle = await world.session.open("echodev")
        arg = world.client.alloc(24)
        world.client.arena.write(arg + 4, bytes(range(8)))
        before = world.stats.round_trips
        await handle.ioctl(0xDEAD, arg)  # unknown command: ENOTTY but parsed
        return world.stats.round_trips - before

    # dir bits of 0xDEAD are NONE, so nothing ships and no copies happen.
    assert world.run(main()) == 1
    assert world.session.coverage_misses == 0


# ---------------------------------------------------------------------------
# Transfers
# ---------------------------------------------------------------------------


def test_sensor_read_after_poll_is_one_round_trip():
    world = SimWorld(link="lan")

    async def main():
        handle = await world.session.open("sensor")
        buf = world.client.alloc(16)
        await handle.poll(POLLIN)
        before = world.stats.round_trips
        n = await handle.read(buf, 12)
        return n, world.stats.round_trips - before, world.client.arena.read(buf, 12)

    n, trips, sample = world.run(main())
    assert n == 12
    assert trips == 1
    assert struct.unpack("<III", sample)[0] == 1


def test_zero_byte_write_is_well_formed():
    world = SimWorld(link="lan")

    async def main():
        handle = await world.session.open("modem")
        buf = world.client.alloc(8)
        return await handle.write(buf, 0)

    assert world.run(main()) == -22  # modem rejects empty records


def test_modem_write_then_poll_completion():
    world = SimWorld(link="lan", sms_delay_ms=100.0)

    async def main():
        handle = await world.session.open("modem")
        rec = world.client.alloc(8)
        world.client.arena.write(rec, struct.pack("<I", 2) + b"abcd")
        n = await handle.write(rec, 8)
        got = await handle.poll(POLLIN)
        return n, got, world.now()

    n, got, when = world.run(main())
    assert n == 8
    assert got & POLLIN
    assert when < 300


# ---------------------------------------------------------------------------
# Poll modes
# ---------------------------------------------------------------------------


def test_nonblocking_poll_returns_immediately():
    world = SimWorld(link="lan")

    async def main():
        handle = await world.session.open("modem")
        before = world.stats.round_trips
        got = await handle.poll(POLLIN, wait=False)
        return got, world.stats.round_trips - before, world.now()

    got, trips, when = world.run(main())
    assert got == 0
    assert trips == 1
    assert when < 20


def test_timeout_poll_observed_deadline_matches_request():
    # One-way 5 ms -> RTT estimate 10 ms once heartbeats flow.
    world = SimWorld(LinkConfig.mbps(5.0, None))

    async def main():
        handle = await world.session.open("modem")
        await world.kernel.sleep(1600)  # let the estimator settle
        est = world.session.estimator.estimate_ms
        start = world.now()
        got = await handle.poll(POLLIN, timeout_ms=50.0)
        return est, got, world.now() - start

    est, got, elapsed = world.run(main())
    assert est == pytest.approx(10.0)
    assert got == 0
    assert 48.0 <= elapsed <= 53.0  # about the requested 50, not 60


# ---------------------------------------------------------------------------
# RTT estimation
# ---------------------------------------------------------------------------


def test_estimator_seeds_with_first_sample_then_smooths():
    est = RttEstimator(alpha=0.125)
    assert est.update(8.0) == 8.0
    assert est.update(16.0) == pytest.approx(8.0 + 0.125 * 8.0)


def test_estimator_converges_on_constant_rtt():
    world = SimWorld(link="lan")

    async def main():
        await world.kernel.sleep(500 * 21)
        return world.session.estimator

    est = world.run(main())
    assert est.samples >= 20
    assert est.estimate_ms == pytest.approx(4.4, abs=0.1)


def test_disconnect_declared_about_three_intervals_after_last_ack():
    world = SimWorld(link="lan")

    async def main():
        await world.session.open("sensor")
        await world.kernel.sleep(1100)
        cut_at = world.now()
        world.cut_link()
        while world.session.live:
            await world.kernel.sleep(10)
        return world.now() - cut_at

    lag = world.run(main())
    interval = world.client.config.heartbeat_interval_ms
    assert 2 * interval <= lag <= 4.2 * interval


# ---------------------------------------------------------------------------
# Memory maps
# ---------------------------------------------------------------------------


def _setup_frames(world, count=3, width=640, height=480):
    async def setup():
        handle = await world.session.open("framesource")
        arg = world.client.alloc(12)
        world.client.arena.write(arg, struct.pack("<III", width, height, count))
        assert await handle.ioctl(FRAME_SETUP, arg) == 0
        region = await handle.mmap(count * width * height * 2)
        return handle, region
    return setup


def test_mmap_three_vga_buffers_450_invalid_pages():
    world = SimWorld(link="lan")

    async def main():
        handle, region = await _setup_frames(world)()
        client_region = world.session.dsm.region(region.region_id)
        states = {client_region.tracker.get(i) for i in range(region.npages)}
        return region.npages, states

    npages, states = world.run(main())
    assert npages == 450
    assert states == {PageState.INVALID}


def test_page_read_after_dma_under_invalidate_fetches_pattern():
    world = SimWorld(link="lan", dsm_policy=Policy.INVALIDATE)

    async def main():
        handle, region = await _setup_frames(world)()
        idx = await handle.ioctl(FRAME_DQ)
        assert idx == 0
        fetches_before = world.session.dsm.stats["fetches"]
        got = await region.page_read(region.base, 4096)
        fetches = world.session.dsm.stats["fetches"] - fetches_before
        return got, fetches

    got, fetches = world.run(main())
    assert fetches == 1
    assert got == frame_pattern(0, 614_400)[:4096]


def test_page_read_under_update_push_costs_no_fetch():
    world = SimWorld(link="lan", dsm_policy=Policy.UPDATE_PUSH)

    async def main():
        handle, region = await _setup_frames(world)()
        idx = await handle.ioctl(FRAME_DQ)
        assert idx == 0
        fetches_before = world.session.dsm.stats["fetches"]
        got = await region.page_read(region.base, 614_400)
        return got, world.session.dsm.stats["fetches"] - fetches_before

    got, fetches = world.run(main())
    assert fetches == 0  # the batch already arrived with the dequeue
    assert got == frame_pattern(0, 614_400)


def test_global_buffer_readthrough_after_capture():
    from rio.devices import FRAME_CAPTURE
    world = SimWorld(link="lan", dsm_policy=Policy.INVALIDATE)

    async def main():
        handle = await world.session.open("framesource")
        gbuf = await handle.alloc_global_buffer(614_400, buffer_id=7)
        server_region = next(iter(world.server.sessions.values())).dsm.region(
            gbuf.region_id)
        assert server_region.npages == 150
        client_region = world.session.dsm.region(gbuf.region_id)
        assert client_region.tracker.get(0) == PageState.READ_WRITE
        assert await handle.ioctl(FRAME_CAPTURE, 7) == 0
        data = await gbuf.page_read(gbuf.base, 614_400)
        return data

    data = world.run(main())
    assert data == frame_pattern(1, 614_400)


def test_global_buffer_size_zero_rejected():
    world = SimWorld(link="lan")

    async def main():
        handle = await world.session.open("framesource")
        with pytest.raises(ValueError):
            await handle.alloc_global_buffer(0, buffer_id=1)
        return True

    assert world.run(main())


def test_duplicate_global_buffer_id_rejected():
    world = SimWorld(link="lan")

    async def main():
        handle = await world.session.open("framesource")
        await handle.alloc_global_buffer(4096, buffer_id=3)
        with pytest.raises(Exception):
            await handle.alloc_global_buffer(4096, buffer_id=3)
        return True

    assert world.run(main())


# ---------------------------------------------------------------------------
# Disconnection and fallback
# ---------------------------------------------------------------------------


def test_sensor_poll_read_survives_mid_sequence_disconnect():
    world = SimWorld(link="lan")
    world.client.register_local_fallback("sensor", SensorDevice(world.kernel))

    async def main():
        handle = await world.session.open("sensor")
        buf = world.client.alloc(16)
        cycle_times = []
        for i in range(14):
            if i == 5:
                world.cut_link()
            await handle.poll(POLLIN)
            n = await handle.read(buf, 12)
            assert n == 12
            cycle_times.append(world.now())
        return handle.state, cycle_times

    state, times = world.run(main())
    assert state is HandleState.FALLING_BACK
    deltas = [b - a for a, b in zip(times, times[1:])]
    # Cycles stay sample-paced apart from the one disconnect-detection gap.
    assert sum(1 for d in deltas if d > 300) <= 1
    assert all(60 <= d <= 80 for d in deltas if d <= 300)


def test_modem_in_flight_call_drops_with_error():
    world = SimWorld(link="lan")

    async def main():
        handle = await world.session.open("modem")
        rec = world.client.alloc(8)
        world.client.arena.write(rec, struct.pack("<I", 1) + b"x" * 4)
        await handle.write(rec, 8)
        world.cut_link()
        with pytest.raises(DisconnectedError):
            await handle.poll(POLLIN)
        start = world.now()
        with pytest.raises(DisconnectedError):
            await handle.read(rec, 8)  # immediate, no hang
        return handle.state, world.now() - start

    state, second_op = world.run(main())
    assert state is HandleState.FAILED
    assert second_op == 0.0


def test_disconnect_with_no_inflight_op_next_op_follows_rules():
    world = SimWorld(link="lan")
    world.client.register_local_fallback("sensor", SensorDevice(world.kernel))

    async def main():
        sensor = await world.session.open("sensor")
        modem = await world.session.open("modem")
        world.cut_link()
        while world.session.live:
            await world.kernel.sleep(50)
        got = await sensor.poll(POLLIN)  # served locally
        with pytest.raises(DisconnectedError):
            await modem.poll(POLLIN, wait=False)
        return got

    assert world.run(main()) & POLLIN


def test_blocking_poll_returns_about_due_time_plus_half_rtt():
    world = SimWorld(link="lan")

    async def main():
        handle = await world.session.open("sensor")
        buf = world.client.alloc(16)
        await handle.poll(POLLIN)
        await handle.read(buf, 12)  # consume; next sample re-armed on delivery
        # The next sample falls due one cadence after the read lands.
        start = world.now()
        await handle.poll(POLLIN)
        return world.now() - start

    waited = world.run(main())
    # due-in ~(65 - half RTT) from poll issue, plus the response leg home
    assert 60.0 <= waited <= 65.0 + 4.4 * 2


def test_open_remote_alias_matches_session_open():
    world = SimWorld(link="lan")

    async def main():
        handle = await world.client.open_remote(world.session, "echodev")
        return handle.device_class, handle.state

    device_class, state = world.run(main())
    assert device_class == "echodev"
    assert state is HandleState.CONNECTED


def test_mmap_length_mismatch_rejected():
    world = SimWorld(link="lan")

    async def main():
        handle = await world.session.open("framesource")
        arg = world.client.alloc(12)
        world.client.arena.write(arg, struct.pack("<III", 640, 480, 3))
        assert await handle.ioctl(FRAME_SETUP, arg) == 0
        with pytest.raises(Exception):
            await handle.mmap(1234)  # not count * buffer size
        return True

    assert world.run(main())
    assert world.census()["regions"] == 0


def test_frame_setup_rejects_bad_dimensions():
    world = SimWorld(link="lan")

    async def main():
        handle = await world.session.open("framesource")
        arg = world.client.alloc(12)
        world.client.arena.write(arg, struct.pack("<III", 0, 480, 3))
        return await handle.ioctl(FRAME_SETUP, arg)

    assert world.run(main()) == -22


def test_open_on_dead_session_raises_immediately():
    world = SimWorld(link="lan")

    async def main():
        world.cut_link()
        while world.session.live:
            await world.kernel.sleep(50)
        with pytest.raises(DisconnectedError):
            await world.session.open("sensor")
        return True

    assert world.run(main())


def test_average_latency_preset_usable_end_to_end():
    world = SimWorld(link="lan_avg")

    async def main():
        handle = await world.session.open("sensor")
        buf = world.client.alloc(16)
        times = []
        for _ in range(10):
            await handle.poll(POLLIN)
            await handle.read(buf, 12)
            times.append(world.now())
        deltas = [b - a for a, b in zip(times, times[1:])]
        return sum(deltas) / len(deltas)

    mean = world.run(main())
    assert mean == pytest.approx(65.0 + 1.5 * 13.8, abs=1.0)


def test_sms_with_zero_carrier_delay_completes_at_protocol_cost():
    world = SimWorld(link="lan", sms_delay_ms=0.0)

    async def main():
        handle = await world.session.open("modem")
        rec = world.client.alloc(8)
        world.client.arena.write(rec, struct.pack("<I", 2) + b"dest")
        start = world.now()
        await handle.write(rec, 8)
        await handle.poll(POLLIN)
        return world.now() - start

    elapsed = world.run(main())
    assert elapsed <= 3 * 4.4  # a couple of round trips, no carrier time


def test_zero_byte_write_round_trips_with_count_zero():
    from rio.devices import Device

    class SinkDevice(Device):
        class_name = "sink"

        async def write(self, desc, addr, length, mem):
            if length:
                await mem.copy_from_user(addr, length)
            return length

    world = SimWorld(link="lan")
    world.server.devices["sink"] = SinkDevice(world.kernel)

    async def main():
        handle = await world.session.open("sink")
        buf = world.client.alloc(8)
        before = world.stats.round_trips
        count = await handle.write(buf, 0)
        return count, world.stats.round_trips - before

    count, trips = world.run(main())
    assert count == 0
    assert trips == 1
