"""
Radial feeder data model.

Loads a feeder file (JSON), converts it to per-unit on the feeder's power
base, validates the topology and the device placements, and hands out an
immutable Feeder + DeviceFleet pair that every other module consumes.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from functools import cached_property

import networkx as nx

from bess import BessParams
from devices import V_MAX, V_MIN, CapBank, Regulator, SmartDG

log = logging.getLogger(__name__)

BUS_KINDS = ("substation", "load", "junction")
EDGE_KINDS = ("line", "regulator")


class FeederError(ValueError):
    """Feeder file cannot be turned into a valid radial model."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    p0: float = 0.0
    q0: float = 0.0
    cvr_p: float = 0.0
    cvr_q: float = 0.0

    @property
    def has_load(self):
        return self.p0 > 0.0 or self.q0 > 0.0


@dataclass(frozen=True)
class Edge:
    from_bus: int
    to_bus: int
    r: float = 0.0
    x: float = 0.0
    kind: str = "line"


@dataclass(frozen=True)
class Feeder:
    buses: tuple
    edges: tuple
    s_base: float
    v_base: float
    v0: float = 1.0
    name: str = "feeder"

    @cached_property
    def topology(self):
        return validate_radial(self)

    @cached_property
    def bus_by_id(self):
        return {b.id: b for b in self.buses}

    @property
    def root(self):
        return self.topology["root"]

    def parent_edge(self, bus_id):
        """Edge index feeding `bus_id`, None for the substation."""
        return self.topology["parent_edge"].get(bus_id)

    def child_edges(self, bus_id):
        return self.topology["child_edges"].get(bus_id, ())


@dataclass(frozen=True)
class DeviceFleet:
    regulators: tuple = ()
    capacitors: tuple = ()
    dgs: tuple = ()
    battery: BessParams | None = None

    @property
    def is_empty(self):
        return not (self.regulators or self.capacitors or self.dgs or self.battery)


def validate_radial(feeder):
    """
    Checks that the edge set is a tree rooted at the single substation bus.

    Returns a topology report:
        {"root", "parent", "parent_edge", "child_edges", "order"}
    where `order` lists bus ids breadth-first from the root.
    """
    ids = [b.id for b in feeder.buses]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise FeederError(f"duplicate bus ids: {dupes}")

    roots = [b.id for b in feeder.buses if b.kind == "substation"]
    if len(roots) != 1:
        raise FeederError(f"multiple roots: expected exactly one substation bus, found {roots}")
    root = roots[0]

    graph = nx.MultiGraph()
    graph.add_nodes_from(ids)
    digraph = nx.DiGraph()
    digraph.add_nodes_from(ids)
    for k, e in enumerate(feeder.edges):
        for end in (e.from_bus, e.to_bus):
            if end not in feeder.bus_by_id:
                raise FeederError(f"edge {k} ({e.from_bus}->{e.to_bus}) references unknown bus {end}")
        if e.from_bus == e.to_bus:
            raise FeederError(f"edge {k} is a self-loop on bus {e.from_bus}")
        graph.add_edge(e.from_bus, e.to_bus, key=k)
        digraph.add_edge(e.from_bus, e.to_bus, index=k)

    if len(ids) > 1 and not nx.is_connected(graph):
        reachable = nx.node_connected_component(graph, root)
        stranded = sorted(set(ids) - reachable)
        raise FeederError(f"disconnected component: buses {stranded} unreachable from substation {root}")

    if graph.number_of_edges() != len(ids) - 1:
        cycle = nx.find_cycle(nx.Graph(graph)) if nx.cycle_basis(nx.Graph(graph)) else None
        where = f" through {[u for u, _ in cycle]}" if cycle else " (parallel edges)"
        raise FeederError(f"non-radial: cycle detected{where}")

    parent, parent_edge = {}, {}
    child_edges = {i: [] for i in ids}
    for k, e in enumerate(feeder.edges):
        if e.to_bus in parent:
            raise FeederError(f"bus {e.to_bus} has multiple parents ({parent[e.to_bus]}, {e.from_bus})")
        parent[e.to_bus] = e.from_bus
        parent_edge[e.to_bus] = k
        child_edges[e.from_bus].append(k)

    if root in parent:
        raise FeederError(f"substation bus {root} has a parent edge from {parent[root]}")
    orphans = [i for i in ids if i != root and i not in parent]
    if orphans:
        raise FeederError(f"multiple roots: buses {orphans} have no parent edge")

    order = [root] + [v for _, v in nx.bfs_edges(digraph, root)]
    if len(order) != len(ids):
        raise FeederError("disconnected component: edge directions do not all point away from the substation")

    return {
        "root": root,
        "parent": parent,
        "parent_edge": parent_edge,
        "child_edges": {i: tuple(ks) for i, ks in child_edges.items()},
        "order": order,
    }


def _per_unit(entry, pu_key, phys_key, base, what):
    if pu_key in entry:
        return float(entry[pu_key])
    if phys_key in entry:
        return float(entry[phys_key]) / base
    raise FeederError(f"{what}: needs '{pu_key}' or '{phys_key}'")


def _parse_bus(entry, defaults, s_base):
    try:
        bus_id = int(entry["id"])
    except (KeyError, TypeError, ValueError):
        raise FeederError(f"bus entry {entry!r} has no integer 'id'")
    kind = entry.get("kind", "load")
    if kind not in BUS_KINDS:
        raise FeederError(f"bus {bus_id}: unknown kind {kind!r}")
    p0 = _per_unit(entry, "p0_pu", "p0_kw", s_base, f"bus {bus_id}") if ("p0_pu" in entry or "p0_kw" in entry) else 0.0
    q0 = _per_unit(entry, "q0_pu", "q0_kvar", s_base, f"bus {bus_id}") if ("q0_pu" in entry or "q0_kvar" in entry) else 0.0
    bus = Bus(
        id=bus_id,
        kind=kind,
        p0=p0,
        q0=q0,
        cvr_p=float(entry.get("cvr_p", defaults.get("cvr_p", 0.0))),
        cvr_q=float(entry.get("cvr_q", defaults.get("cvr_q", 0.0))),
    )
    if bus.p0 < 0 or bus.q0 < 0:
        raise FeederError(f"bus {bus_id}: negative peak load p0={bus.p0} q0={bus.q0}")
    if bus.cvr_p < 0 or bus.cvr_q < 0:
        raise FeederError(f"bus {bus_id}: negative CVR coefficient")
    return bus


def _parse_edge(k, entry, z_base):
    kind = entry.get("kind", "line")
    if kind not in EDGE_KINDS:
        raise FeederError(f"edge {k}: unknown kind {kind!r}")
    try:
        src, dst = int(entry["from"]), int(entry["to"])
    except (KeyError, TypeError, ValueError):
        raise FeederError(f"edge {k}: needs integer 'from' and 'to'")
    if kind == "regulator":
        r = _per_unit(entry, "r_pu", "r_ohm", z_base, f"edge {k}") if ("r_pu" in entry or "r_ohm" in entry) else 0.0
        x = _per_unit(entry, "x_pu", "x_ohm", z_base, f"edge {k}") if ("x_pu" in entry or "x_ohm" in entry) else 0.0
        if r != 0.0 or x != 0.0:
            raise FeederError(f"edge {k}: regulator edges carry no impedance (got r={r}, x={x})")
    else:
        r = _per_unit(entry, "r_pu", "r_ohm", z_base, f"edge {k}")
        x = _per_unit(entry, "x_pu", "x_ohm", z_base, f"edge {k}")
    if r < 0 or x < 0:
        raise FeederError(f"edge {k} ({src}->{dst}): negative impedance r={r} x={x}")
    return Edge(from_bus=src, to_bus=dst, r=r, x=x, kind=kind)


def _parse_devices(raw, feeder):
    raw = raw or {}
    s_base = feeder.s_base

    regulators = []
    seen_edges = set()
    for entry in raw.get("regulators", []) or []:
        edge_id = int(entry["edge"])
        if not 0 <= edge_id < len(feeder.edges):
            raise FeederError(f"regulator references unknown edge {edge_id}")
        if feeder.edges[edge_id].kind != "regulator":
            raise FeederError(f"regulator references edge {edge_id}, which is a {feeder.edges[edge_id].kind} edge")
        if edge_id in seen_edges:
            raise FeederError(f"edge {edge_id} carries two regulators")
        seen_edges.add(edge_id)
        tap_min = int(entry.get("tap_min", -16))
        tap_max = int(entry.get("tap_max", 16))
        if tap_min > tap_max:
            raise FeederError(f"regulator on edge {edge_id}: tap_min {tap_min} > tap_max {tap_max}")
        regulators.append(Regulator(edge=edge_id, taps=tuple(range(tap_min, tap_max + 1)),
                                    step=float(entry.get("step", 0.00625))))

    unregulated = [k for k, e in enumerate(feeder.edges) if e.kind == "regulator" and k not in seen_edges]
    if unregulated:
        raise FeederError(f"regulator edges {unregulated} have no regulator device")

    capacitors = []
    for entry in raw.get("capacitors", []) or []:
        bus_id = int(entry["bus"])
        if bus_id not in feeder.bus_by_id:
            raise FeederError(f"capacitor references unknown bus {bus_id}")
        if bus_id == feeder.root:
            raise FeederError(f"capacitor at bus {bus_id}: the substation bus cannot hold devices")
        q_rated = _per_unit(entry, "q_rated_pu", "q_rated_kvar", s_base, f"capacitor at bus {bus_id}")
        if q_rated <= 0:
            raise FeederError(f"capacitor at bus {bus_id}: q_rated must be positive")
        capacitors.append(CapBank(bus=bus_id, q_rated=q_rated))

    dgs = []
    for entry in raw.get("dgs", []) or []:
        bus_id = int(entry["bus"])
        if bus_id not in feeder.bus_by_id:
            raise FeederError(f"DG references unknown bus {bus_id}")
        if bus_id == feeder.root:
            raise FeederError(f"DG at bus {bus_id}: the substation bus cannot hold devices")
        s_rated = _per_unit(entry, "s_rated_pu", "s_rated_kva", s_base, f"DG at bus {bus_id}")
        if s_rated <= 0:
            raise FeederError(f"DG at bus {bus_id}: s_rated must be positive")
        dgs.append(SmartDG(bus=bus_id, s_rated=s_rated, p_profile_ref=entry.get("profile", f"pv_{bus_id}")))

    for kind, items in (("capacitor", capacitors), ("DG", dgs)):
        buses = [d.bus for d in items]
        if len(set(buses)) != len(buses):
            raise FeederError(f"two {kind}s placed on the same bus: {sorted(buses)}")

    battery = None
    if raw.get("battery"):
        b = raw["battery"]
        try:
            battery = BessParams(
                q_bat=float(b["q_bat_kwh"]),
                c_r=float(b["c_r_kw"]),
                d_r=float(b["d_r_kw"]),
                eta=float(b.get("eta", 0.0)),
                rho=float(b.get("rho", 1.0)),
                e_minus=float(b.get("e_minus", 0.25)),
                e_plus=float(b.get("e_plus", 1.0)),
                soc0=float(b.get("soc0", b.get("e_minus", 0.25))),
                tau=float(b.get("tau_h", 0.25)),
            )
            battery.validate()
        except KeyError as e:
            raise FeederError(f"battery: missing field {e}")
        except ValueError as e:
            raise FeederError(f"battery: {e}")

    return DeviceFleet(regulators=tuple(regulators), capacitors=tuple(capacitors), dgs=tuple(dgs), battery=battery)


def parse_feeder(data, name="feeder"):
    """Builds Feeder + DeviceFleet from an already-decoded feeder document."""
    if not isinstance(data, dict):
        raise FeederError("feeder document must be a JSON object")
    base = data.get("base") or {}
    try:
        s_base = float(base["s_base_kva"])
        v_base = float(base["v_base_kv"])
    except (KeyError, TypeError, ValueError):
        raise FeederError("base: needs numeric 's_base_kva' and 'v_base_kv'")
    if s_base <= 0 or v_base <= 0:
        raise FeederError("base: s_base_kva and v_base_kv must be positive")
    if "v0_pu2" in base:
        v0 = float(base["v0_pu2"])
    else:
        v0 = float(base.get("v0_pu", 1.0)) ** 2
    if not V_MIN <= v0 <= V_MAX:
        raise FeederError(f"base: substation voltage {math.sqrt(v0):.4f} pu outside [0.95, 1.05]")

    z_base = v_base ** 2 * 1000.0 / s_base
    defaults = data.get("load_model") or {}

    buses = tuple(_parse_bus(entry, defaults, s_base) for entry in data.get("buses", []))
    if not buses:
        raise FeederError("feeder has no buses")
    edges = tuple(_parse_edge(k, entry, z_base) for k, entry in enumerate(data.get("edges", [])))

    feeder = Feeder(buses=buses, edges=edges, s_base=s_base, v_base=v_base, v0=v0,
                    name=data.get("name", name))
    feeder.topology  # raises FeederError on a non-radial graph
    root = feeder.bus_by_id[feeder.root]
    if root.p0 != 0.0 or root.q0 != 0.0:
        raise FeederError(f"bus {root.id}: the substation bus cannot carry load (p0={root.p0}, q0={root.q0})")
    fleet = _parse_devices(data.get("devices"), feeder)
    return feeder, fleet


def load_feeder(path):
    """
    Reads a feeder file and returns the validated, per-unit (Feeder, DeviceFleet).
    """
    if not os.path.exists(path):
        raise FeederError(f"feeder file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise FeederError(f"{path}: parse failure at line {e.lineno}: {e.msg}")

    name = os.path.splitext(os.path.basename(path))[0]
    feeder, fleet = parse_feeder(data, name=name)
    log.info("🔌 Loaded %s: %d buses, %d edges, %d reg / %d cap / %d DG%s",
             feeder.name, len(feeder.buses), len(feeder.edges), len(fleet.regulators),
             len(fleet.capacitors), len(fleet.dgs), " + battery" if fleet.battery else "")
    return feeder, fleet


def feeder_to_dict(feeder, fleet):
    """Per-unit document that `parse_feeder` reads back field-for-field."""
    battery = None
    if fleet.battery:
        b = fleet.battery
        battery = {"q_bat_kwh": b.q_bat, "c_r_kw": b.c_r, "d_r_kw": b.d_r, "eta": b.eta, "rho": b.rho,
                   "e_minus": b.e_minus, "e_plus": b.e_plus, "soc0": b.soc0, "tau_h": b.tau}
    return {
        "name": feeder.name,
        "base": {"s_base_kva": feeder.s_base, "v_base_kv": feeder.v_base, "v0_pu2": feeder.v0},
        "buses": [{"id": b.id, "kind": b.kind, "p0_pu": b.p0, "q0_pu": b.q0, "cvr_p": b.cvr_p, "cvr_q": b.cvr_q}
                  for b in feeder.buses],
        "edges": [{"from": e.from_bus, "to": e.to_bus, "r_pu": e.r, "x_pu": e.x, "kind": e.kind}
                  for e in feeder.edges],
        "devices": {
            "regulators": [{"edge": r.edge, "tap_min": min(r.taps), "tap_max": max(r.taps), "step": r.step}
                           for r in fleet.regulators],
            "capacitors": [{"bus": c.bus, "q_rated_pu": c.q_rated} for c in fleet.capacitors],
            "dgs": [{"bus": g.bus, "s_rated_pu": g.s_rated, "profile": g.p_profile_ref} for g in fleet.dgs],
            "battery": battery,
        },
    }


def dump_feeder(feeder, fleet, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(feeder_to_dict(feeder, fleet), f, indent=2)
    return path
