"""Regenerate the bundled 62-channel montage CSV.

Positions follow the classic spherical 10-20/10-10 construction: the head is
a unit sphere with the vertex electrode at +z, nasion toward +y and the right
ear toward +x.  The outer ring sits 72 degrees from the vertex with 18-degree
azimuth steps; interior electrodes are spaced at equal angles along the
circle through the row's ring endpoints and its midline electrode.  CB1/CB2
are not part of the 10-10 grid and are placed on the lower occipital arc.

Usage: python scripts/make_default_montage.py [out.csv]
"""

import sys
from pathlib import Path

import numpy as np

# (name, azimuth degrees from nasion, positive toward the right ear)
RING = [
    ("Fpz", 0.0), ("Fp2", 18.0), ("AF8", 36.0), ("F8", 54.0), ("FT8", 72.0),
    ("T8", 90.0), ("TP8", 108.0), ("P8", 126.0), ("PO8", 144.0), ("O2", 162.0),
    ("Oz", 180.0), ("O1", -162.0), ("PO7", -144.0), ("P7", -126.0),
    ("TP7", -108.0), ("T7", -90.0), ("FT7", -72.0), ("F7", -54.0),
    ("AF7", -36.0), ("Fp1", -18.0),
]
RING_POLAR = 72.0

# (name, polar degrees from vertex, True if in front of the ears)
MIDLINE = [
    ("AFz", 54.0, True), ("Fz", 36.0, True), ("FCz", 18.0, True),
    ("Cz", 0.0, True), ("CPz", 18.0, False), ("Pz", 36.0, False),
    ("POz", 54.0, False),
]

# row -> (left ring endpoint, midline electrode, interior labels left of midline)
ROWS = {
    "AF": ("AF7", "AFz", ["AF7", "AF5", "AF3", "AF1"]),
    "F": ("F7", "Fz", ["F7", "F5", "F3", "F1"]),
    "FC": ("FT7", "FCz", ["FT7", "FC5", "FC3", "FC1"]),
    "C": ("T7", "Cz", ["T7", "C5", "C3", "C1"]),
    "CP": ("TP7", "CPz", ["TP7", "CP5", "CP3", "CP1"]),
    "P": ("P7", "Pz", ["P7", "P5", "P3", "P1"]),
    "PO": ("PO7", "POz", ["PO7", "PO5", "PO3", "PO1"]),
}

# 62-channel cap order (ESI NeuroScan style)
CHANNELS = [
    "Fp1", "Fpz", "Fp2", "AF3", "AF4",
    "F7", "F5", "F3", "F1", "Fz", "F2", "F4", "F6", "F8",
    "FT7", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8",
    "T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8",
    "TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8",
    "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8",
    "PO7", "PO5", "PO3", "POz", "PO4", "PO6", "PO8",
    "CB1", "O1", "Oz", "O2", "CB2",
]


def sph(polar_deg, azimuth_deg):
    """Unit vector at the given polar angle from +z and azimuth from +y."""
    th = np.radians(polar_deg)
    az = np.radians(azimuth_deg)
    return np.array([np.sin(th) * np.sin(az), np.sin(th) * np.cos(az), np.cos(th)])


def circumcenter(p1, p2, p3):
    a = p1 - p3
    b = p2 - p3
    axb = np.cross(a, b)
    num = np.cross(a.dot(a) * b - b.dot(b) * a, axb)
    return p3 + num / (2.0 * axb.dot(axb))


def arc_point(end, mid, frac):
    """Point at `frac` of the arc from `end` to `mid` on the circle through
    end, mid and the mirror image of end (x -> -x)."""
    mirror = end * np.array([-1.0, 1.0, 1.0])
    c = circumcenter(end, mid, mirror)
    u = end - c
    rho = np.linalg.norm(u)
    u /= rho
    n = np.cross(end - c, mid - c)
    n /= np.linalg.norm(n)
    w = np.cross(n, u)
    rel = mid - c
    phi_mid = np.arctan2(rel.dot(w), rel.dot(u))
    phi = frac * phi_mid
    return c + rho * (u * np.cos(phi) + w * np.sin(phi))


def build_positions():
    pos = {}
    for name, az in RING:
        pos[name] = sph(RING_POLAR, az)
    for name, polar, front in MIDLINE:
        pos[name] = sph(polar, 0.0 if front else 180.0)
    for _, (end_name, mid_name, labels) in ROWS.items():
        end = pos[end_name]
        mid = pos[mid_name]
        # labels run ring -> midline: fractions 0, 1/4, 2/4, 3/4
        for j, label in enumerate(labels):
            p = arc_point(end, mid, j / 4.0)
            pos.setdefault(label, p)
            right = label.replace("7", "8").replace("5", "6").replace("3", "4").replace("1", "2")
            pos.setdefault(right, p * np.array([-1.0, 1.0, 1.0]))
    # lower occipital electrodes between PO7/O1 and PO8/O2, closer to the neck
    pos["CB1"] = sph(81.0, -153.0)
    pos["CB2"] = sph(81.0, 153.0)
    return pos


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(
        __file__).resolve().parent.parent / "src" / "eegtransfer" / "data" / "montage62.csv"
    pos = build_positions()
    lines = ["name,x,y,z"]
    for name in CHANNELS:
        p = pos[name]
        p = p / np.linalg.norm(p)
        lines.append("%s,%.6f,%.6f,%.6f" % (name, p[0], p[1], p[2]))
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("wrote %s (%d channels)" % (out, len(CHANNELS)))


if __name__ == "__main__":
    main()
