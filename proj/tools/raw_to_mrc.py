#!/usr/bin/env python3
"""Convert an export-volume raw + sidecar pair to MRC2014 (mode 2, float32)."""
import json
import struct
import sys


def main(raw_path, sidecar_path, out_path):
    with open(sidecar_path) as f:
        side = json.load(f)
    g = side["dims"][0]
    voxel = side["voxel_size"]
    with open(raw_path, "rb") as f:
        data = f.read()
    if len(data) != 4 * g * g * g:
        sys.exit("raw size does not match dims")
    vals = struct.unpack("<%df" % (g * g * g), data)
    header = bytearray(1024)
    struct.pack_into("<3i", header, 0, g, g, g)            # nx, ny, nz
    struct.pack_into("<i", header, 12, 2)                  # mode 2: float32
    struct.pack_into("<3i", header, 16, 0, 0, 0)           # nxstart..
    struct.pack_into("<3i", header, 28, g, g, g)           # mx, my, mz
    struct.pack_into("<3f", header, 40, g * voxel, g * voxel, g * voxel)
    struct.pack_into("<3f", header, 52, 90.0, 90.0, 90.0)
    struct.pack_into("<3i", header, 64, 1, 2, 3)           # x fastest, matching the raw order
    struct.pack_into("<3f", header, 76, min(vals), max(vals), sum(vals) / len(vals))
    struct.pack_into("<3f", header, 196, *(-(g // 2) * voxel,) * 3)
    header[208:212] = b"MAP "
    header[212:216] = bytes([0x44, 0x44, 0, 0])            # little-endian stamp
    with open(out_path, "wb") as f:
        f.write(header)
        f.write(data)


if __name__ == "__main__":
    if len(sys.argv) != 4:
        sys.exit("usage: raw_to_mrc.py volume.raw volume.json out.mrc")
    main(*sys.argv[1:])
