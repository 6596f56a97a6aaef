"""Network model and MATPOWER case parsing.

All quantities are stored in per-unit on the system MVA base.  Buses are
reindexed 0..nb-1 in file order; branches and generators refer to buses by
that internal index.
"""

import cmath
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from types import SimpleNamespace

import numpy as np

from .errors import (
    DanglingReference,
    DegenerateImpedance,
    DimensionMismatch,
    MissingSection,
    NoReferenceBus,
    UnsupportedCost,
)

DEFAULT_ANGLE_LIMIT = math.pi / 2


@dataclass
class BranchAdmittance:
    """Two-port admittance coefficients of a single branch.

    The branch current equations are

        If = (Gff + jBff) Vf + (Gft + jBft) Vt
        It = (Gtf + jBtf) Vf + (Gtt + jBtt) Vt

    with Vf, Vt the complex terminal voltages.
    """

    Gff: float
    Bff: float
    Gft: float
    Bft: float
    Gtf: float
    Btf: float
    Gtt: float
    Btt: float


def branch_admittance(r, x, b, tau=1.0, gamma=0.0):
    """Admittance coefficients of a branch with series impedance r + jx,
    total shunt charging susceptance b, tap ratio tau and phase shift gamma
    (radians).  The tap side is the from terminal.
    """
    if r == 0.0 and x == 0.0:
        raise DegenerateImpedance("branch has zero series impedance")
    ys = 1.0 / complex(r, x)
    ych = complex(0.0, 0.5 * b)
    yff = (ys + ych) / tau**2
    yft = -ys / (tau * cmath.exp(complex(0.0, -gamma)))
    ytf = -ys / (tau * cmath.exp(complex(0.0, gamma)))
    ytt = ys + ych
    return BranchAdmittance(
        Gff=yff.real, Bff=yff.imag,
        Gft=yft.real, Bft=yft.imag,
        Gtf=ytf.real, Btf=ytf.imag,
        Gtt=ytt.real, Btt=ytt.imag,
    )


@dataclass
class Bus:
    id: int
    gs: float = 0.0
    bs: float = 0.0
    vmin: float = 0.9
    vmax: float = 1.1
    theta_min: float = -DEFAULT_ANGLE_LIMIT
    theta_max: float = DEFAULT_ANGLE_LIMIT
    is_reference: bool = False
    # nominal demand from the case file; sampling perturbs around it
    pd: float = 0.0
    qd: float = 0.0


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tau: float = 1.0
    gamma: float = 0.0
    s_max: float = 0.0  # apparent power limit in p.u.; 0 means unlimited


@dataclass
class Generator:
    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0


@dataclass
class Network:
    base_mva: float
    buses: list
    branches: list
    generators: list
    admittances: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        if not self.admittances:
            self.admittances = [
                branch_admittance(br.r, br.x, br.b, br.tau, br.gamma)
                for br in self.branches
            ]

    @property
    def nb(self):
        return len(self.buses)

    @property
    def nl(self):
        return len(self.branches)

    @property
    def ng(self):
        return len(self.generators)

    @property
    def ref(self):
        for i, bus in enumerate(self.buses):
            if bus.is_reference:
                return i
        raise NoReferenceBus("network has no reference bus")

    @cached_property
    def arr(self):
        """Vectorised read-only view of the network tables."""
        adm = self.admittances
        a = SimpleNamespace(
            nb=self.nb, nl=self.nl, ng=self.ng, ref=self.ref,
            f=np.array([br.from_bus for br in self.branches], dtype=np.intp),
            t=np.array([br.to_bus for br in self.branches], dtype=np.intp),
            Gff=np.array([y.Gff for y in adm]),
            Bff=np.array([y.Bff for y in adm]),
            Gft=np.array([y.Gft for y in adm]),
            Bft=np.array([y.Bft for y in adm]),
            Gtf=np.array([y.Gtf for y in adm]),
            Btf=np.array([y.Btf for y in adm]),
            Gtt=np.array([y.Gtt for y in adm]),
            Btt=np.array([y.Btt for y in adm]),
            gs=np.array([b.gs for b in self.buses]),
            bs=np.array([b.bs for b in self.buses]),
            vmin=np.array([b.vmin for b in self.buses]),
            vmax=np.array([b.vmax for b in self.buses]),
            theta_min=np.array([b.theta_min for b in self.buses]),
            theta_max=np.array([b.theta_max for b in self.buses]),
            pd=np.array([b.pd for b in self.buses]),
            qd=np.array([b.qd for b in self.buses]),
            gen_bus=np.array([g.bus for g in self.generators], dtype=np.intp),
            pmin=np.array([g.pmin for g in self.generators]),
            pmax=np.array([g.pmax for g in self.generators]),
            qmin=np.array([g.qmin for g in self.generators]),
            qmax=np.array([g.qmax for g in self.generators]),
            c2=np.array([g.c2 for g in self.generators]),
            c1=np.array([g.c1 for g in self.generators]),
            c0=np.array([g.c0 for g in self.generators]),
            smax=np.array([br.s_max for br in self.branches]),
        )
        for v in vars(a).values():
            if isinstance(v, np.ndarray):
                v.setflags(write=False)
        return a


_COMMENT_RE = re.compile(r"%.*")
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([^\[;'\"]+);")
_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.S)


def _parse_matrix(text):
    rows = []
    for raw in re.split(r"[;\n]", text):
        raw = raw.strip()
        if not raw:
            continue
        rows.append([float(tok) for tok in raw.replace(",", " ").split()])
    if not rows:
        return np.zeros((0, 0))
    width = max(len(r) for r in rows)
    out = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        if len(r) != width:
            r = r + [0.0] * (width - len(r))
        out[i, :] = r
    return out


def parse_matpower_case(source, name=""):
    """Parse MATPOWER case text (or a path to a .m file) into a Network.

    Out-of-service branches and generators are dropped.  All quantities are
    converted to per-unit on the case MVA base; cost coefficients are
    rescaled so the objective takes per-unit power.
    """
    text = source
    if "\n" not in str(source) and str(source).endswith(".m"):
        with open(source) as fh:
            text = fh.read()
        if not name:
            name = re.sub(r"\.m$", "", str(source).rsplit("/", 1)[-1])
    text = _COMMENT_RE.sub("", text)

    matrices = {m.group(1): _parse_matrix(m.group(2))
                for m in _MATRIX_RE.finditer(text)}
    scalars = {}
    for m in _SCALAR_RE.finditer(text):
        try:
            scalars[m.group(1)] = float(m.group(2))
        except ValueError:
            pass

    if "baseMVA" not in scalars:
        raise MissingSection("baseMVA")
    for section in ("bus", "gen", "branch", "gencost"):
        if section not in matrices or matrices[section].size == 0:
            raise MissingSection(section)
    base = scalars["baseMVA"]

    bus_tab = matrices["bus"]
    gen_tab = matrices["gen"]
    br_tab = matrices["branch"]
    cost_tab = matrices["gencost"]

    # gencost may carry a second block of reactive cost rows; ignore it
    if cost_tab.shape[0] == 2 * gen_tab.shape[0]:
        cost_tab = cost_tab[: gen_tab.shape[0]]
    if cost_tab.shape[0] != gen_tab.shape[0]:
        raise DimensionMismatch(
            f"{cost_tab.shape[0]} gencost rows for {gen_tab.shape[0]} generators")

    index_of = {}
    buses = []
    nref = 0
    for i, row in enumerate(bus_tab):
        ext = int(row[0])
        if ext in index_of:
            raise DanglingReference(f"duplicate bus id {ext}")
        index_of[ext] = i
        is_ref = int(row[1]) == 3
        nref += is_ref
        buses.append(Bus(
            id=i,
            gs=row[4] / base,
            bs=row[5] / base,
            vmin=row[12],
            vmax=row[11],
            theta_min=0.0 if is_ref else -DEFAULT_ANGLE_LIMIT,
            theta_max=0.0 if is_ref else DEFAULT_ANGLE_LIMIT,
            is_reference=is_ref,
            pd=row[2] / base,
            qd=row[3] / base,
        ))
    if nref != 1:
        raise NoReferenceBus(f"found {nref} reference buses, need exactly 1")

    branches = []
    for row in br_tab:
        if row[10] == 0:  # out of service
            continue
        for ext in (int(row[0]), int(row[1])):
            if ext not in index_of:
                raise DanglingReference(f"branch endpoint bus {ext} unknown")
        tap = row[8] if row[8] != 0.0 else 1.0
        branches.append(Branch(
            from_bus=index_of[int(row[0])],
            to_bus=index_of[int(row[1])],
            r=row[2], x=row[3], b=row[4],
            tau=tap,
            gamma=math.radians(row[9]),
            s_max=row[5] / base,
        ))

    generators = []
    for row, cost in zip(gen_tab, cost_tab):
        if row[7] == 0:  # out of service
            continue
        ext = int(row[0])
        if ext not in index_of:
            raise DanglingReference(f"generator bus {ext} unknown")
        model, ncost = int(cost[0]), int(cost[3])
        if model != 2:
            raise UnsupportedCost(f"cost model {model}; only polynomial supported")
        if ncost > 3:
            raise UnsupportedCost(f"cost degree {ncost - 1} above quadratic")
        coeffs = [0.0] * (3 - ncost) + list(cost[4:4 + ncost])
        c2, c1, c0 = coeffs
        generators.append(Generator(
            bus=index_of[ext],
            pmin=row[9] / base,
            pmax=row[8] / base,
            qmin=row[4] / base,
            qmax=row[3] / base,
            c2=c2 * base**2,
            c1=c1 * base,
            c0=c0,
        ))

    return Network(base_mva=base, buses=buses, branches=branches,
                   generators=generators, name=name)


def validate_network(net):
    """Check the structural invariants of a Network.

    Returns a list of human-readable violation descriptions (empty when the
    network is valid).  Never mutates or raises: violations are data.
    """
    out = []
    nb = net.nb
    nref = sum(b.is_reference for b in net.buses)
    if nref != 1:
        out.append(f"network has {nref} reference buses, need exactly 1")
    for i, bus in enumerate(net.buses):
        if bus.vmin <= 0.0:
            out.append(f"bus {i}: vmin = {bus.vmin} not strictly positive")
        if bus.vmin > bus.vmax:
            out.append(f"bus {i}: vmin {bus.vmin} > vmax {bus.vmax}")
        if bus.theta_min > bus.theta_max:
            out.append(f"bus {i}: angle bounds inverted")
    if len(net.admittances) != net.nl:
        out.append(f"{len(net.admittances)} admittance entries "
                   f"for {net.nl} branches")
    for k, br in enumerate(net.branches):
        if not (0 <= br.from_bus < nb and 0 <= br.to_bus < nb):
            out.append(f"branch {k}: endpoint out of range")
            continue
        if br.from_bus == br.to_bus:
            out.append(f"branch {k}: connects bus {br.from_bus} to itself")
        if br.r == 0.0 and br.x == 0.0:
            out.append(f"branch {k}: zero series impedance")
        if br.tau <= 0.0:
            out.append(f"branch {k}: tap ratio {br.tau} not positive")
        if br.s_max < 0.0:
            out.append(f"branch {k}: negative rating {br.s_max}")
    for j, g in enumerate(net.generators):
        if not 0 <= g.bus < nb:
            out.append(f"generator {j}: bus out of range")
        if g.pmin > g.pmax:
            out.append(f"generator {j}: pmin > pmax")
        if g.qmin > g.qmax:
            out.append(f"generator {j}: qmin > qmax")
        if g.c2 < 0.0:
            out.append(f"generator {j}: concave cost (c2 = {g.c2})")
    return out
