#!/usr/bin/env python3
"""Regenerates assets/digits16.bin (layout: README.md).

Each glyph is a 5x7 bitmap digit, upscaled 2x, centred on a 16x16 canvas and
softened with a 3x3 kernel. Output is deterministic.
"""
import struct
import sys

FONT = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}
SIZE = 16
KERNEL = [[1, 2, 1], [2, 4, 2], [1, 2, 1]]


def glyph(rows):
    canvas = [[0.0] * SIZE for _ in range(SIZE)]
    top, left = 1, 3
    for r, line in enumerate(rows):
        for c, ch in enumerate(line):
            if ch == "1":
                for dy in range(2):
                    for dx in range(2):
                        canvas[top + 2 * r + dy][left + 2 * c + dx] = 1.0
    out = [[0.0] * SIZE for _ in range(SIZE)]
    for y in range(SIZE):
        for x in range(SIZE):
            acc = 0.0
            for ky in range(3):
                for kx in range(3):
                    yy, xx = y + ky - 1, x + kx - 1
                    if 0 <= yy < SIZE and 0 <= xx < SIZE:
                        acc += KERNEL[ky][kx] * canvas[yy][xx]
            out[y][x] = acc / 16.0
    return out


def main(path):
    blob = bytearray(b"DG16")
    blob += struct.pack("<HHHH", 1, len(FONT), SIZE, SIZE)
    for label in sorted(FONT):
        blob.append(label)
        for row in glyph(FONT[label]):
            blob += bytes(min(255, round(v * 255)) for v in row)
    with open(path, "wb") as f:
        f.write(blob)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "assets/digits16.bin")
