"""Exhaustive and randomized coherence model checks."""

import pytest

from rio.dsm import Policy

from model_utils import (
    Op,
    all_programs,
    explore,
    run_coordinated_trace,
    run_uncoordinated_trace,
)


def test_conflicting_writers_same_page_all_interleavings():
    states, quiescent = explore(
        (Op("write", 0, 1), Op("write", 0, 2)),
        (Op("write", 0, 101), Op("write", 0, 102)))
    assert quiescent >= 1
    assert states > 10


def test_write_read_cross_page_all_interleavings():
    explore((Op("write", 0, 1), Op("read", 1)),
            (Op("write", 1, 101), Op("read", 0)))


def test_dma_against_client_writes_all_interleavings():
    for policy in (Policy.INVALIDATE, Policy.UPDATE_PUSH):
        explore((Op("write", 0, 1), Op("read", 0)),
                (Op("dma", 0, 101), Op("dma", 0, 102)),
                policy=policy)


def test_naive_fetch_then_claim_path_all_interleavings():
    explore((Op("write", 0, 1), Op("write", 1, 2)),
            (Op("write", 0, 101), Op("write", 1, 102)),
            naive=True)


def test_exhaustive_single_op_programs():
    # Every (client op, server op) pair, all interleavings, both policies.
    for policy in (Policy.INVALIDATE, Policy.UPDATE_PUSH):
        for cprog in all_programs("client", 1):
            for sprog in all_programs("server", 1):
                explore(cprog, sprog, policy=policy)


def test_cross_fetch_deadlock_freedom():
    # Both sides start invalid on opposite pages and fetch across at once:
    # each must serve the other's fetch while its own is pending.
    states, quiescent = explore(
        (Op("read", 0), Op("write", 1, 7)),
        (Op("read", 1), Op("write", 0, 107)))
    assert quiescent >= 1


@pytest.mark.parametrize("seed", range(200))
def test_coordinated_traces_match_serial_oracle(seed):
    run_coordinated_trace(seed)


@pytest.mark.parametrize("seed", range(100))
def test_uncoordinated_traces_keep_single_writer(seed):
    run_uncoordinated_trace(10_000 + seed)
