"""Audio rate vs. buffering size.

Each transfer ships one segment of frames; when the segment plays for
less time than the operation's round trip, the achieved rate collapses.
The sweep finds the knee where the full 48 kHz is reached.
"""

from rio.bench import bench_audio


if __name__ == "__main__":
    print("speaker over the close-range link (16-bit stereo):")
    print(f"  {'buffer_ms':>9} {'rate_khz':>9}")
    for buffer_ms in (3, 4, 5, 6, 7, 10, 20):
        row = bench_audio(buffer_ms, "lan", direction="out")
        print(f"  {buffer_ms:>9} {row.value:>9.2f}")

    print("\nmicrophone over the long-haul link (8-bit mono):")
    print(f"  {'buffer_ms':>9} {'rate_khz':>9}")
    for buffer_ms in (40, 60, 80, 85, 120):
        row = bench_audio(buffer_ms, "wan", direction="in")
        print(f"  {buffer_ms:>9} {row.value:>9.2f}")
