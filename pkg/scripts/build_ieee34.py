"""Regenerate src/dsse/data/ieee34.json and ieee34_solution.csv from the
public IEEE 34-node test feeder tables (IEEE PES Distribution System
Analysis Subcommittee).

Distributed loads are split half/half between the end buses of their segment.
Regulator taps are the published radial-flow solution taps.
"""
import csv
import json
from pathlib import Path

DATA = Path(__file__).resolve().parents[1] / "src" / "dsse" / "data"
FT_PER_MILE = 5280.0

# ohm/mile (upper triangle, phase order a b c) and microsiemens/mile
CONFIGS = {
    "300": dict(phases="ABC",
                z=[[(1.3368, 1.3343), (0.2101, 0.5779), (0.2130, 0.5015)],
                   [None, (1.3238, 1.3569), (0.2066, 0.4591)],
                   [None, None, (1.3294, 1.3471)]],
                b=[[5.3350, -1.5313, -0.9943], [None, 5.0979, -0.6212], [None, None, 4.8880]]),
    "301": dict(phases="ABC",
                z=[[(1.9300, 1.4115), (0.2327, 0.6442), (0.2359, 0.5691)],
                   [None, (1.9157, 1.4281), (0.2288, 0.5238)],
                   [None, None, (1.9219, 1.4209)]],
                b=[[5.1207, -1.4364, -0.9402], [None, 4.9055, -0.5951], [None, None, 4.7154]]),
    "302": dict(phases="A", z=[[(2.7995, 1.4855)]], b=[[4.2251]]),
    "303": dict(phases="B", z=[[(2.7995, 1.4855)]], b=[[4.2251]]),
    "304": dict(phases="B", z=[[(1.9217, 1.4212)]], b=[[4.3637]]),
}

SEGMENTS = [
    ("800", "802", 2580, "300"), ("802", "806", 1730, "300"), ("806", "808", 32230, "300"),
    ("808", "810", 5804, "303"), ("808", "812", 37500, "300"), ("812", "814", 29730, "300"),
    ("814", "850", 10, "301"), ("816", "818", 1710, "302"), ("816", "824", 10210, "301"),
    ("818", "820", 48150, "302"), ("820", "822", 13740, "302"), ("824", "826", 3030, "303"),
    ("824", "828", 840, "301"), ("828", "830", 20440, "301"), ("830", "854", 520, "301"),
    ("832", "858", 4900, "301"), ("834", "860", 2020, "301"), ("834", "842", 280, "301"),
    ("836", "840", 860, "301"), ("836", "862", 280, "301"), ("842", "844", 1350, "301"),
    ("844", "846", 3640, "301"), ("846", "848", 530, "301"), ("850", "816", 310, "301"),
    ("852", "832", 10, "301"), ("854", "856", 23330, "303"), ("854", "852", 36830, "301"),
    ("858", "864", 1620, "302"), ("858", "834", 5830, "301"), ("860", "836", 2680, "301"),
    ("862", "838", 4860, "304"), ("888", "890", 10560, "300"),
]

BUS_ORDER = ["800", "802", "806", "808", "810", "812", "814", "850", "816", "818", "820", "822",
             "824", "826", "828", "830", "854", "856", "852", "832", "858", "864", "834", "842",
             "844", "846", "848", "860", "836", "840", "862", "838", "888", "890"]

# (bus, connection, model, (kW, kvar) x 3); delta columns are AB, BC, CA
SPOT = [
    ("860", "wye", "PQ", [(20, 16), (20, 16), (20, 16)]),
    ("840", "wye", "I", [(9, 7), (9, 7), (9, 7)]),
    ("844", "wye", "Z", [(135, 105), (135, 105), (135, 105)]),
    ("848", "delta", "PQ", [(20, 16), (20, 16), (20, 16)]),
    ("890", "delta", "I", [(150, 75), (150, 75), (150, 75)]),
    ("830", "delta", "Z", [(10, 5), (10, 5), (25, 10)]),
]

DISTRIBUTED = [
    ("802", "806", "wye", "PQ", [(0, 0), (30, 15), (25, 14)]),
    ("808", "810", "wye", "I", [(0, 0), (16, 8), (0, 0)]),
    ("818", "820", "wye", "Z", [(34, 17), (0, 0), (0, 0)]),
    ("820", "822", "wye", "PQ", [(135, 70), (0, 0), (0, 0)]),
    ("816", "824", "delta", "I", [(0, 0), (5, 2), (0, 0)]),
    ("824", "826", "wye", "I", [(0, 0), (40, 20), (0, 0)]),
    ("824", "828", "wye", "PQ", [(0, 0), (0, 0), (4, 2)]),
    ("828", "830", "wye", "PQ", [(7, 3), (0, 0), (0, 0)]),
    ("854", "856", "wye", "PQ", [(0, 0), (4, 2), (0, 0)]),
    ("832", "858", "delta", "Z", [(7, 3), (2, 1), (6, 3)]),
    ("858", "864", "wye", "PQ", [(2, 1), (0, 0), (0, 0)]),
    ("858", "834", "delta", "PQ", [(4, 2), (15, 8), (13, 7)]),
    ("834", "860", "delta", "Z", [(16, 8), (20, 10), (110, 55)]),
    ("860", "836", "delta", "PQ", [(30, 15), (10, 6), (42, 22)]),
    ("836", "840", "delta", "I", [(18, 9), (22, 11), (0, 0)]),
    ("862", "838", "wye", "PQ", [(0, 0), (28, 14), (0, 0)]),
    ("842", "844", "wye", "PQ", [(9, 5), (0, 0), (0, 0)]),
    ("844", "846", "wye", "PQ", [(0, 0), (25, 12), (20, 11)]),
    ("846", "848", "wye", "PQ", [(0, 0), (23, 11), (0, 0)]),
]

# published radial-flow voltage profile: (|V| pu, angle deg) per phase A, B, C
SOLUTION = {
    "800": [(1.0500, 0.00), (1.0500, -120.00), (1.0500, 120.00)],
    "802": [(1.0475, -0.05), (1.0484, -120.07), (1.0484, 119.95)],
    "806": [(1.0457, -0.08), (1.0474, -120.11), (1.0474, 119.92)],
    "808": [(1.0136, -0.75), (1.0296, -120.95), (1.0289, 119.30)],
    "810": [None, (1.0294, -120.95), None],
    "812": [(0.9763, -1.57), (1.0100, -121.92), (1.0069, 118.59)],
    "814": [(0.9467, -2.26), (0.9945, -122.70), (0.9893, 118.01)],
    "850": [(1.0176, -2.26), (1.0255, -122.70), (1.0203, 118.01)],
    "816": [(1.0172, -2.26), (1.0253, -122.71), (1.0200, 118.01)],
    "818": [(1.0163, -2.27), None, None],
    "820": [(0.9926, -2.32), None, None],
    "822": [(0.9895, -2.33), None, None],
    "824": [(1.0082, -2.37), (1.0158, -122.94), (1.0116, 117.76)],
    "826": [None, (1.0156, -122.94), None],
    "828": [(1.0074, -2.38), (1.0151, -122.95), (1.0109, 117.75)],
    "830": [(0.9894, -2.63), (0.9982, -123.39), (0.9938, 117.25)],
    "854": [(0.9890, -2.64), (0.9978, -123.40), (0.9934, 117.24)],
    "856": [None, (0.9977, -123.41), None],
    "852": [(0.9581, -3.11), (0.9680, -124.18), (0.9637, 116.33)],
    "832": [(1.0359, -3.11), (1.0345, -124.18), (1.0360, 116.33)],
    "858": [(1.0336, -3.17), (1.0322, -124.28), (1.0338, 116.22)],
    "864": [(1.0336, -3.17), None, None],
    "834": [(1.0309, -3.24), (1.0295, -124.39), (1.0313, 116.09)],
    "842": [(1.0309, -3.25), (1.0294, -124.39), (1.0313, 116.09)],
    "844": [(1.0307, -3.27), (1.0291, -124.42), (1.0311, 116.06)],
    "846": [(1.0309, -3.32), (1.0291, -124.46), (1.0313, 116.01)],
    "848": [(1.0310, -3.32), (1.0291, -124.47), (1.0314, 116.00)],
    "860": [(1.0305, -3.24), (1.0291, -124.39), (1.0310, 116.09)],
    "836": [(1.0303, -3.23), (1.0287, -124.39), (1.0308, 116.09)],
    "840": [(1.0303, -3.23), (1.0287, -124.39), (1.0308, 116.09)],
    "862": [(1.0303, -3.23), (1.0287, -124.39), (1.0308, 116.09)],
    "838": [None, (1.0285, -124.39), None],
    "888": [(1.0000, -4.64), (0.9983, -125.73), (1.0008, 114.82)],
    "890": [(0.9177, -5.19), (0.9235, -126.78), (0.9208, 114.22)],
}


def _full(tri, scale):
    """Symmetric matrix from an upper triangle, as [re, im] pairs."""
    k = len(tri)
    out = [[None] * k for _ in range(k)]
    for i in range(k):
        for j in range(i, k):
            out[i][j] = out[j][i] = tri[i][j]
    return [[scale(v) for v in row] for row in out]


def build():
    phases = {b: set() for b in BUS_ORDER}
    lines = []
    for f, t, ft, code in SEGMENTS:
        cfg = CONFIGS[code]
        phases[f] |= set(cfg["phases"])
        phases[t] |= set(cfg["phases"])
        lines.append({
            "from": f, "to": t, "phases": list(cfg["phases"]),
            "z": _full(cfg["z"], lambda v: [v[0], v[1]]),
            "y": _full(cfg["b"], lambda v: [0.0, v * 1e-6]),
            "length": ft / FT_PER_MILE,
        })
    phases["888"] |= set("ABC")
    phases["890"] |= set("ABC")
    buses = [{"id": b, "phases": sorted(phases[b]), "base_kv": 4.16 if b in ("888", "890") else 24.9,
              "is_source": b == "800"} for b in BUS_ORDER]
    loads = []
    for bus, conn, model, pq in SPOT:
        loads.append({"bus": bus, "phases": sorted(phases[bus]), "connection": conn, "model": model,
                      "kw": [float(p) for p, _ in pq], "kvar": [float(q) for _, q in pq]})
    for a, b, conn, model, pq in DISTRIBUTED:
        labels = ("AB", "BC", "CA") if conn == "delta" else ("A", "B", "C")
        used = sorted({ph for lab, (p, q) in zip(labels, pq) if p or q for ph in lab})
        for bus in (a, b):
            loads.append({"bus": bus, "phases": used, "connection": conn, "model": model,
                          "kw": [p / 2 for p, _ in pq], "kvar": [q / 2 for _, q in pq]})
    doc = {
        "name": "IEEE 34-node test feeder",
        "base_mva": 2.5,
        "source": {"vmag_pu": [1.05, 1.05, 1.05], "vang_deg": [0.0, -120.0, 120.0]},
        "buses": buses,
        "lines": lines,
        "transformers": [{"from": "832", "to": "888", "conn_high": "wye-grounded", "conn_low": "wye-grounded",
                          "kv_high": 24.9, "kv_low": 4.16, "kva": 500.0, "z_pu": [0.019, 0.0408]}],
        "regulators": [
            {"from": "814", "to": "850", "taps": [12, 5, 5], "step": 0.00625, "vreg_pu": None, "band_pu": 0.0083},
            {"from": "852", "to": "832", "taps": [13, 11, 12], "step": 0.00625, "vreg_pu": None, "band_pu": 0.0083},
        ],
        "capacitors": [{"bus": "844", "kvar": [100.0] * 3, "status": [True] * 3},
                       {"bus": "848", "kvar": [150.0] * 3, "status": [True] * 3}],
        "loads": loads,
    }
    DATA.mkdir(parents=True, exist_ok=True)
    (DATA / "ieee34.json").write_text(json.dumps(doc, indent=1) + "\n")
    with open(DATA / "ieee34_solution.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "phase", "vmag_pu", "vang_deg"])
        for bus in BUS_ORDER:
            for ph, val in zip("ABC", SOLUTION[bus]):
                if val is not None:
                    w.writerow([bus, ph, f"{val[0]:.4f}", f"{val[1]:.2f}"])


if __name__ == "__main__":
    build()
