"""Sensor reading cadence, local vs remote.

A reading is obtained by a blocking poll followed by a read.  Remotely,
the poll's wake travels half a round trip and the read a full one, so
each reading costs the 65 ms conversion plus one and a half round trips.
"""

from rio.bench import bench_sensor
from rio.testbed import LINK_PRESETS


if __name__ == "__main__":
    print(f"{'link':<10} {'rtt_ms':>7} {'mean_read_ms':>13} {'model':>13}")
    for name in ("loopback", "lan", "wan"):
        rtt = 2 * LINK_PRESETS[name].one_way_latency_ms
        row = bench_sensor(name, n_samples=150)
        model = 65.0 + 1.5 * rtt
        print(f"{name:<10} {rtt:>7.1f} {row.value:>13.2f} {model:>13.2f}")
    print("\nmeasured means track 65 ms + 1.5 RTT")
