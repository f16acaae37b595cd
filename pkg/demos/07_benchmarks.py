"""Micro-benchmarks for the transport and compression layers.

Times loopback round trips for inline versus staged-file payloads, then
tabulates compression ratio and throughput per codec on synthetic models.
Both runs also land as CSVs in a temp directory, the same files the
``fedkit bench-comm`` and ``fedkit bench-compress`` commands produce.

    python demos/07_benchmarks.py
"""

import tempfile
from pathlib import Path

from fedkit.bench import bench_comm, bench_compress
from fedkit.compression import CodecConfig


def main():
    out = Path(tempfile.mkdtemp(prefix="fedkit-bench-"))

    print("loopback round trips (payload travels both directions):\n")
    rows = bench_comm(sizes=(1 << 14, 1 << 20), trials=5,
                      out_path=out / "comm.csv")
    print(f"{'payload':>10s} {'transport':>10s} {'mean ms':>9s} {'std ms':>8s}")
    for r in rows:
        print(f"{r['payload_bytes']:>10d} {r['transport']:>10s} "
              f"{r['mean_seconds'] * 1e3:>9.2f} {r['std_seconds'] * 1e3:>8.2f}")

    print("\ncompression on synthetic float32 models:\n")
    codecs = {
        "deflate": CodecConfig(lossy="none", lossless="deflate"),
        "qz+dfl": CodecConfig(lossy="qz", lossless="deflate", eb_rel=0.01),
    }
    rows = bench_compress(param_counts={"tiny": 10_000, "small": 400_000},
                          codecs=codecs, out_path=out / "compress.csv")
    print(f"{'model':>6s} {'codec':>8s} {'bytes in':>9s} {'bytes out':>10s} "
          f"{'ratio':>6s} {'enc s':>7s} {'dec s':>7s}")
    for r in rows:
        print(f"{r['model']:>6s} {r['codec']:>8s} {r['original_bytes']:>9d} "
              f"{r['compressed_bytes']:>10d} {r['ratio']:>6.2f} "
              f"{r['compress_seconds']:>7.3f} {r['decompress_seconds']:>7.3f}")

    print(f"\nCSV artifacts: {sorted(p.name for p in out.iterdir())} in {out}")


if __name__ == "__main__":
    main()
