"""Historical solution datasets and voltage-box constructions.

A dataset maps demand profiles to previously solved operating points.
Three rectangular voltage boxes are derived here: the network's own
bounds (exact envelope of the polar box), a tight box around a known
optimum, and the min/max hull of the k nearest historical solutions.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyBox,
    EmptyDataset,
    FingerprintMismatch,
    KTooLarge,
    SchemaVersion,
)
from .formulation import Instance, VoltageBox

SCHEMA_VERSION = 1

_CANONICAL_ANGLES = (-math.pi, -math.pi / 2, 0.0, math.pi / 2, math.pi)


@dataclass
class DatasetEntry:
    """One solved operating point: demands plus the optimal setpoint."""

    instance: Instance
    e: np.ndarray
    f: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    objective: float
    certified: bool = False


@dataclass
class HistoricalDataset:
    network_fingerprint: str
    entries: list
    sampling: dict = field(default_factory=dict)
    _pd_mat: np.ndarray = field(default=None, repr=False)
    _qd_mat: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.entries)

    def demand_matrices(self):
        if self._pd_mat is None or self._pd_mat.shape[0] != len(self.entries):
            self._pd_mat = np.array([en.instance.pd for en in self.entries])
            self._qd_mat = np.array([en.instance.qd for en in self.entries])
        return self._pd_mat, self._qd_mat


def network_fingerprint(net):
    """sha256 over a canonical float64 byte stream of the network data."""
    rows = [np.array([net.base_mva, float(net.nb), float(net.nl), float(net.ng)])]
    for b in net.buses:
        rows.append(np.array([float(b.id), b.gs, b.bs, b.vmin, b.vmax,
                              b.theta_min, b.theta_max, float(b.is_reference),
                              b.pd, b.qd]))
    for br in net.branches:
        rows.append(np.array([float(br.from_bus), float(br.to_bus), br.r, br.x,
                              br.b, br.tau, br.gamma, br.s_max]))
    for g in net.generators:
        rows.append(np.array([float(g.bus), g.pmin, g.pmax, g.qmin, g.qmax,
                              g.c2, g.c1, g.c0]))
    return hashlib.sha256(np.concatenate(rows).tobytes()).hexdigest()


def demand_distance(a, b):
    """Squared demand mismatch: sum (pd_a - pd_b)^2 + sum (qd_a - qd_b)^2."""
    if a.pd.shape != b.pd.shape or a.qd.shape != b.qd.shape:
        raise DimensionMismatch("instances have different bus counts")
    dp = a.pd - b.pd
    dq = a.qd - b.qd
    return float(dp.dot(dp) + dq.dot(dq))


def _distances(ds, query):
    pd_mat, qd_mat = ds.demand_matrices()
    if pd_mat.shape[1] != query.pd.shape[0]:
        raise DimensionMismatch("query bus count differs from dataset")
    dp = pd_mat - query.pd
    dq = qd_mat - query.qd
    return np.sum(dp * dp, axis=1) + np.sum(dq * dq, axis=1)


def nearest_instance(ds, query):
    """Index of the entry with the smallest demand distance (ties: lowest)."""
    if not ds.entries:
        raise EmptyDataset("dataset has no entries")
    return int(np.argmin(_distances(ds, query)))


def k_nearest(ds, query, k):
    """Indices of the k closest entries, distance then index order."""
    if not ds.entries:
        raise EmptyDataset("dataset has no entries")
    if not 1 <= k <= len(ds.entries):
        raise KTooLarge(f"k={k} outside [1, {len(ds.entries)}]")
    d = _distances(ds, query)
    return np.argsort(d, kind="stable")[:k]


def original_bounds(buses):
    """Exact rectangular envelope of each bus's polar operating region.

    Per bus the extrema of v*cos(theta) and v*sin(theta) over the box
    [vmin, vmax] x [theta_min, theta_max] are attained at a bound
    magnitude and either an angle bound or a stationary angle of
    cos/sin, so a small candidate grid is exact.
    """
    nb = len(buses)
    e_lo = np.empty(nb)
    e_hi = np.empty(nb)
    f_lo = np.empty(nb)
    f_hi = np.empty(nb)
    for i, bus in enumerate(buses):
        angles = [t for t in _CANONICAL_ANGLES if bus.theta_min <= t <= bus.theta_max]
        angles += [bus.theta_min, bus.theta_max]
        cs = np.cos(angles)
        sn = np.sin(angles)
        ecand = np.concatenate([bus.vmin * cs, bus.vmax * cs])
        fcand = np.concatenate([bus.vmin * sn, bus.vmax * sn])
        e_lo[i], e_hi[i] = ecand.min(), ecand.max()
        f_lo[i], f_hi[i] = fcand.min(), fcand.max()
    return VoltageBox(e_lo=e_lo, e_hi=e_hi, f_lo=f_lo, f_hi=f_hi)


def epsilon_bounds(sol, eps, original):
    """Box of half-width eps around a known solution, clipped to original."""
    e, f = sol.state.e, sol.state.f
    box = VoltageBox(
        e_lo=np.maximum(original.e_lo, e - eps),
        e_hi=np.minimum(original.e_hi, e + eps),
        f_lo=np.maximum(original.f_lo, f - eps),
        f_hi=np.minimum(original.f_hi, f + eps),
    )
    if box.is_empty():
        raise EmptyBox("solution lies outside the original box by more than eps")
    return box


def _grid_down(x):
    # exact rational comparison against the 1e-5 grid, then the nearest
    # float to the chosen grid value; plain floor(x*1e5) misrounds values
    # like 1.001 whose binary product lands just past the integer
    return math.floor(Fraction(float(x)) * 100000) / 1e5


def _grid_up(x):
    return math.ceil(Fraction(float(x)) * 100000) / 1e5


def knn_bounds(ds, query, k):
    """Hull of the k nearest solutions, rounded outward to the 1e-5 grid."""
    idx = k_nearest(ds, query, k)
    e_mat = np.array([ds.entries[i].e for i in idx])
    f_mat = np.array([ds.entries[i].f for i in idx])
    return VoltageBox(
        e_lo=np.array([_grid_down(v) for v in e_mat.min(axis=0)]),
        e_hi=np.array([_grid_up(v) for v in e_mat.max(axis=0)]),
        f_lo=np.array([_grid_down(v) for v in f_mat.min(axis=0)]),
        f_hi=np.array([_grid_up(v) for v in f_mat.max(axis=0)]),
    )


def dataset_to_dict(ds):
    return {
        "schema_version": SCHEMA_VERSION,
        "network_fingerprint": ds.network_fingerprint,
        "sampling": ds.sampling,
        "entries": [
            {
                "pd": en.instance.pd.tolist(),
                "qd": en.instance.qd.tolist(),
                "e": en.e.tolist(),
                "f": en.f.tolist(),
                "pg": en.pg.tolist(),
                "qg": en.qg.tolist(),
                "objective": en.objective,
                "certified": bool(en.certified),
            }
            for en in ds.entries
        ],
    }


def dataset_from_dict(doc, expected_fingerprint=None):
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersion(
            f"expected schema_version {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")
    fp = doc["network_fingerprint"]
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise FingerprintMismatch("dataset was generated for a different network")
    entries = [
        DatasetEntry(
            instance=Instance(pd=np.array(d["pd"]), qd=np.array(d["qd"])),
            e=np.array(d["e"]), f=np.array(d["f"]),
            pg=np.array(d["pg"]), qg=np.array(d["qg"]),
            objective=float(d["objective"]), certified=bool(d["certified"]),
        )
        for d in doc["entries"]
    ]
    return HistoricalDataset(network_fingerprint=fp, entries=entries,
                             sampling=dict(doc.get("sampling", {})))


def save_dataset(path, ds):
    with open(path, "w") as fh:
        json.dump(dataset_to_dict(ds), fh, indent=1)
        fh.write("\n")


def load_dataset(path, net=None):
    """Load a dataset file; with net given, verify it matches the network."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaVersion(f"not a valid dataset file: {exc}") from exc
    expected = network_fingerprint(net) if net is not None else None
    return dataset_from_dict(doc, expected_fingerprint=expected)
