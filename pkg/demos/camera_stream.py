"""Frame streaming is throughput-bound; photo capture is one big push.

Uncompressed VGA frames are 614,400 bytes, so sustained frame rate tracks
link throughput.  The fixed 8 MB photo buffer crosses in a single update
batch, and the capture call returns once the batch has landed.
"""

from rio.bench import bench_camera
from rio.wire import LinkConfig


if __name__ == "__main__":
    print("VGA streaming (update-push of whole frames):")
    for label, link in (("14.3 Mbps", "lan"),
                        ("73.7 Mbps", LinkConfig.mbps(2.2, 73.7))):
        row = bench_camera("stream", "vga", link, n_frames=200, warmup=30)
        print(f"  {label:>10}: {row.value:5.2f} fps")

    row = bench_camera("capture", "vga", "lan")
    print(f"\n8 MB photo capture over 14.3 Mbps: {row.value:.2f} s")
    print("(frame pixels are verifiable bit-exactly from the pattern function)")
