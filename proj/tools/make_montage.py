#!/usr/bin/env python3
"""Writes data/montage_62.csv: the 62-channel 10-10 layout used by the
SEED-family recordings, placed on an idealized unit sphere.

Convention: x points right, y points to the nose, z to the vertex (Cz).
Each electrode gets an inclination from Cz and an azimuth. The outer ring
(Fpz, Fp2, AF8, F8, FT8, T8, ...) sits at 72 degrees inclination with azimuths
18 degrees apart. Row members between the midline and the outer ring are
interpolated linearly in the azimuthal-equidistant plane.
"""
import math
import sys

# midline inclination (deg, signed: + frontal, - posterior) and outer-ring azimuth
ROWS = {
    "FP": (72, 72), "AF": (54, 54), "F": (36, 36), "FC": (18, 18), "C": (0, 0),
    "CP": (-18, -18), "P": (-36, -36), "PO": (-54, -54), "O": (-72, -72),
}

CHANNELS = [
    "FP1", "FPZ", "FP2", "AF3", "AF4", "F7", "F5", "F3", "F1", "FZ", "F2", "F4", "F6", "F8",
    "FT7", "FC5", "FC3", "FC1", "FCZ", "FC2", "FC4", "FC6", "FT8", "T7", "C5", "C3", "C1", "CZ",
    "C2", "C4", "C6", "T8", "TP7", "CP5", "CP3", "CP1", "CPZ", "CP2", "CP4", "CP6", "TP8", "P7",
    "P5", "P3", "P1", "PZ", "P2", "P4", "P6", "P8", "PO7", "PO5", "PO3", "POZ", "PO4", "PO6",
    "PO8", "CB1", "O1", "OZ", "O2", "CB2",
]


def plane(incl_deg, azim_deg):
    return (incl_deg * math.cos(math.radians(azim_deg)), incl_deg * math.sin(math.radians(azim_deg)))


def to_xyz(px, py):
    incl = math.hypot(px, py)
    azim = math.atan2(py, px)
    t = math.radians(incl)
    return (math.sin(t) * math.cos(azim), math.sin(t) * math.sin(azim), math.cos(t))


def locate(name):
    if name in ("CB1", "CB2"):
        azim = -70.0 if name == "CB2" else 250.0
        return to_xyz(*plane(100.0, azim))
    # outer-ring aliases
    row_map = {"FT": "FC", "T": "C", "TP": "CP"}
    prefix = name.rstrip("0123456789Z")
    suffix = name[len(prefix):]
    row = row_map.get(prefix, prefix)
    incl, outer_az = ROWS[row]
    mid = plane(abs(incl), 90.0 if incl >= 0 else -90.0)
    if suffix == "Z":
        return to_xyz(*mid)
    num = int(suffix)
    if prefix in ("FT", "T", "TP"):
        num = 8 if num % 2 == 0 else 7
    right = num % 2 == 0
    k = (num if right else num + 1) / 2.0
    if row in ("FP", "O"):
        k = 4.0
    outer = plane(72.0, outer_az)
    px = mid[0] + (k / 4.0) * (outer[0] - mid[0])
    py = mid[1] + (k / 4.0) * (outer[1] - mid[1])
    if not right:
        px = -px
    return to_xyz(px, py)


def main(path):
    assert len(CHANNELS) == 62 and len(set(CHANNELS)) == 62
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("name,x,y,z\n")
        for name in CHANNELS:
            x, y, z = locate(name)
            fh.write(f"{name},{x:.9f},{y:.9f},{z:.9f}\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/montage_62.csv")
