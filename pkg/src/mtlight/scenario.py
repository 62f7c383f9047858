"""Road-network and traffic-flow descriptions: JSON files, grid generation,
the synthetic flat-peak-flat schedule and arrival sampling."""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

FORMAT_VERSION = 1
MOVEMENTS = ("left", "straight", "right")
SIDES = "NESW"
# heading deltas, clockwise from north
_DELTA = {0: (-1, 0), 1: (0, 1), 2: (1, 0), 3: (0, -1)}
_TURN = {"left": -1, "straight": 0, "right": 1}


class ScenarioError(ValueError):
    """Structural or parse problem in a scenario description.

    ``field`` is a dotted path into the document; ``line`` is set for parse
    errors.
    """

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(field)
        super().__init__(f"{': '.join(where)}: {message}" if where else message)


@dataclass
class LaneSpec:
    id: str
    length: float = 300.0
    capacity: int = 40
    movement: str = "straight"
    upstream: Optional[str] = None    # intersection the lane leaves, None for entry lanes
    downstream: Optional[str] = None  # intersection the lane feeds, None for exit lanes


@dataclass
class IntersectionSpec:
    id: str
    incoming: list[str]
    phases: list[list[tuple[str, str]]]


@dataclass
class NetworkSpec:
    intersections: list[IntersectionSpec]
    lanes: list[LaneSpec]
    links: list[tuple[str, str, str]]  # (intersection, in lane, out lane)
    grid: Optional[tuple[int, int]] = None

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "grid": list(self.grid) if self.grid else None,
            "lanes": [asdict(l) for l in self.lanes],
            "intersections": [
                {"id": i.id, "incoming": list(i.incoming), "phases": [[list(m) for m in p] for p in i.phases]}
                for i in self.intersections
            ],
            "links": [list(l) for l in self.links],
        }


@dataclass
class LaneParams:
    length: float = 300.0
    capacity: int = 40


@dataclass
class FlowSchedule:
    """Piecewise-constant network arrival rate plus weighted routes.

    ``windows`` holds (start, end, vehicles/s) triples; routes are lane-id
    lists whose first lane is a boundary entry lane.
    """

    windows: list[tuple[float, float, float]]
    routes: list[list[str]] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)
    seed: int = 0
    mode: str = "quota"

    @property
    def horizon(self) -> float:
        return self.windows[-1][1] if self.windows else 0.0

    def rate_at(self, t: float) -> float:
        for start, end, rate in self.windows:
            if start <= t < end:
                return rate
        return 0.0

    def cumulative(self, t: float) -> float:
        """Expected arrivals in [0, t)."""
        total = 0.0
        for start, end, rate in self.windows:
            if t <= start:
                break
            total += rate * (min(t, end) - start)
        return total

    def expected_totals(self) -> list[float]:
        return [rate * (end - start) for start, end, rate in self.windows]

    def with_seed(self, seed: int) -> "FlowSchedule":
        return FlowSchedule(list(self.windows), self.routes, self.weights, seed, self.mode)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "windows": [list(w) for w in self.windows],
            "routes": [{"lanes": list(r), "weight": w} for r, w in zip(self.routes, self.weights)],
            "seed": self.seed,
            "mode": self.mode,
        }


# -- validation ---------------------------------------------------------------

def validate_network(spec: NetworkSpec) -> None:
    lanes = {}
    for n, lane in enumerate(spec.lanes):
        if lane.id in lanes:
            raise ScenarioError(f"duplicate lane id {lane.id!r}", f"lanes[{n}].id")
        if lane.movement not in MOVEMENTS:
            raise ScenarioError(f"movement must be one of {MOVEMENTS}", f"lanes[{n}].movement")
        if lane.length <= 0 or lane.capacity < 1:
            raise ScenarioError("length must be > 0 and capacity >= 1", f"lanes[{n}]")
        lanes[lane.id] = lane
    ids = {i.id for i in spec.intersections}
    for n, lane in enumerate(spec.lanes):
        for end in ("upstream", "downstream"):
            ref = getattr(lane, end)
            if ref is not None and ref not in ids:
                raise ScenarioError(f"unknown intersection {ref!r}", f"lanes[{n}].{end}")

    def need_lane(lid, where):
        if lid not in lanes:
            raise ScenarioError(f"dangling lane reference {lid!r}", where)
        return lanes[lid]

    link_set = set()
    for n, (iid, lin, lout) in enumerate(spec.links):
        if iid not in ids:
            raise ScenarioError(f"unknown intersection {iid!r}", f"links[{n}]")
        a, b = need_lane(lin, f"links[{n}]"), need_lane(lout, f"links[{n}]")
        if a.downstream != iid or b.upstream != iid:
            raise ScenarioError(f"link {lin}->{lout} does not pass through {iid}", f"links[{n}]")
        link_set.add((iid, lin, lout))

    for n, inter in enumerate(spec.intersections):
        where = f"intersections[{n}]"
        if not inter.incoming:
            raise ScenarioError("needs at least one incoming lane", where + ".incoming")
        for lid in inter.incoming:
            lane = need_lane(lid, where + ".incoming")
            if lane.downstream != inter.id:
                raise ScenarioError(f"lane {lid!r} does not feed {inter.id}", where + ".incoming")
            if lane.upstream == inter.id:
                raise ScenarioError(f"lane {lid!r} is both incoming and outgoing", where + ".incoming")
            if not any(l[0] == inter.id and l[1] == lid for l in link_set):
                raise ScenarioError(f"incoming lane {lid!r} has no outgoing link", where + ".incoming")
        if len(inter.phases) < 2:
            raise ScenarioError("needs at least 2 phases", where + ".phases")
        for k, phase in enumerate(inter.phases):
            pw = f"{where}.phases[{k}]"
            if not phase:
                raise ScenarioError("phase has no movements", pw)
            for lin, lout in phase:
                need_lane(lin, pw)
                need_lane(lout, pw)
                if lanes[lin].movement == "right":
                    raise ScenarioError(f"right-turn lane {lin!r} must not be phase-controlled", pw)
                if (inter.id, lin, lout) not in link_set:
                    raise ScenarioError(f"movement {lin}->{lout} is not a link", pw)


def validate_flow(flow: FlowSchedule, lane_ids: set[str] | None = None) -> None:
    if not flow.windows:
        raise ScenarioError("at least one window required", "windows")
    t = 0.0
    for n, (start, end, rate) in enumerate(flow.windows):
        if start != t:
            kind = "overlapping" if start < t else "gap before"
            raise ScenarioError(f"{kind} window starting at {start} (expected {t})", f"windows[{n}]")
        if end <= start:
            raise ScenarioError("window end must exceed start", f"windows[{n}]")
        if rate < 0:
            raise ScenarioError("arrival rate must be >= 0", f"windows[{n}]")
        t = end
    if flow.mode not in ("quota", "poisson"):
        raise ScenarioError("mode must be 'quota' or 'poisson'", "mode")
    if len(flow.routes) != len(flow.weights):
        raise ScenarioError("one weight per route required", "routes")
    if flow.routes:
        if any(w < 0 for w in flow.weights) or not math.isclose(sum(flow.weights), 1.0, abs_tol=1e-9):
            raise ScenarioError("route weights must be non-negative and sum to 1", "routes")
        for n, route in enumerate(flow.routes):
            if len(route) < 2:
                raise ScenarioError("route needs an entry lane and an exit lane", f"routes[{n}]")
            if lane_ids is not None:
                for lid in route:
                    if lid not in lane_ids:
                        raise ScenarioError(f"dangling lane reference {lid!r}", f"routes[{n}]")


# -- file io --------------------------------------------------------------------

def _read_json(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, line=exc.lineno) from None


def _check_version(doc: dict):
    if doc.get("format_version") != FORMAT_VERSION:
        raise ScenarioError(f"unsupported format_version {doc.get('format_version')!r}", "format_version")


def network_from_dict(doc: dict) -> NetworkSpec:
    _check_version(doc)
    try:
        lanes = [LaneSpec(**l) for l in doc["lanes"]]
        inters = [
            IntersectionSpec(i["id"], list(i["incoming"]), [[tuple(m) for m in p] for p in i["phases"]])
            for i in doc["intersections"]
        ]
        links = [tuple(l) for l in doc.get("links", [])]
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed document ({exc})") from None
    grid = tuple(doc["grid"]) if doc.get("grid") else None
    spec = NetworkSpec(inters, lanes, links, grid)
    validate_network(spec)
    return spec


def flow_from_dict(doc: dict, lane_ids: set[str] | None = None) -> FlowSchedule:
    _check_version(doc)
    try:
        windows = [tuple(float(v) for v in w) for w in doc["windows"]]
        routes = [list(r["lanes"]) for r in doc.get("routes", [])]
        weights = [float(r["weight"]) for r in doc.get("routes", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"malformed document ({exc})") from None
    flow = FlowSchedule(windows, routes, weights, int(doc.get("seed", 0)), doc.get("mode", "quota"))
    validate_flow(flow, lane_ids)
    return flow


def load_roadnet(path) -> NetworkSpec:
    return network_from_dict(_read_json(path))


def load_flow(path, network: NetworkSpec | None = None) -> FlowSchedule:
    ids = {l.id for l in network.lanes} if network is not None else None
    return flow_from_dict(_read_json(path), ids)


def save_roadnet(spec: NetworkSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")


def save_flow(flow: FlowSchedule, path) -> None:
    Path(path).write_text(json.dumps(flow.to_dict(), indent=1, sort_keys=True) + "\n")


# -- grid generation -------------------------------------------------------------

def _node(r, c):
    return f"i{r}_{c}"


def _road_out(rows, cols, r, c, heading):
    """Road leaving intersection (r, c) in direction ``heading``."""
    dr, dc = _DELTA[heading]
    rr, cc = r + dr, c + dc
    if 0 <= rr < rows and 0 <= cc < cols:
        return f"road_{r}_{c}_{rr}_{cc}"
    return f"out_{r}_{c}_{SIDES[heading]}"


def _road_in(rows, cols, r, c, side):
    """Road arriving at (r, c) from its ``side`` (0..3 = N, E, S, W)."""
    dr, dc = _DELTA[side]
    rr, cc = r + dr, c + dc
    if 0 <= rr < rows and 0 <= cc < cols:
        return f"road_{rr}_{cc}_{r}_{c}"
    return f"in_{r}_{c}_{SIDES[side]}"


def lane_id(road: str, movement: str) -> str:
    return f"{road}_{movement[0].upper()}"


def gen_grid(rows: int, cols: int, lane_params: LaneParams | None = None) -> NetworkSpec:
    """Signalized rows x cols grid; every road has a left, straight and right
    lane, boundary roads enter and leave the network.

    Phases follow the 4-phase convention: NS-straight, NS-left, EW-straight,
    EW-left. Right-turn lanes are never phase-controlled.
    """
    if rows < 1 or cols < 1:
        raise ScenarioError(f"grid dimensions must be >= 1, got {rows}x{cols}", "grid")
    lp = lane_params or LaneParams()
    lanes: dict[str, LaneSpec] = {}

    def road_lanes(road, up, down):
        for mv in MOVEMENTS:
            lid = lane_id(road, mv)
            if lid not in lanes:
                lanes[lid] = LaneSpec(lid, lp.length, lp.capacity, mv, up, down)
        return [lane_id(road, mv) for mv in MOVEMENTS]

    inters, links = [], []
    for r in range(rows):
        for c in range(cols):
            nid = _node(r, c)
            incoming = []
            served = {}  # (side, movement) -> list of (in, out)
            for side in range(4):
                road = _road_in(rows, cols, r, c, side)
                dr, dc = _DELTA[side]
                up = _node(r + dr, c + dc) if road.startswith("road_") else None
                in_lanes = road_lanes(road, up, nid)
                incoming += in_lanes
                heading = (side + 2) % 4
                for mv, lin in zip(MOVEMENTS, in_lanes):
                    out_h = (heading + _TURN[mv]) % 4
                    oroad = _road_out(rows, cols, r, c, out_h)
                    odr, odc = _DELTA[out_h]
                    down = _node(r + odr, c + odc) if oroad.startswith("road_") else None
                    pairs = [(lin, lout) for lout in road_lanes(oroad, nid, down)]
                    links += [(nid, a, b) for a, b in pairs]
                    served[(side, mv)] = pairs
            phases = []
            for sides, mv in (((0, 2), "straight"), ((0, 2), "left"), ((1, 3), "straight"), ((1, 3), "left")):
                phases.append([p for s in sides for p in served[(s, mv)]])
            inters.append(IntersectionSpec(nid, incoming, phases))
    spec = NetworkSpec(inters, list(lanes.values()), links, (rows, cols))
    validate_network(spec)
    return spec


def _grid_route(rows, cols, r0, c0, side0, r1, c1, side1) -> list[str] | None:
    """Fewest-intersection, then fewest-turn route from the entry road on
    ``side0`` of (r0, c0) to the exit road on ``side1`` of (r1, c1)."""
    order = {"straight": 0, "right": 1, "left": 2}
    first_road = _road_in(rows, cols, r0, c0, side0)
    # (n_nodes, n_turns, turn_key, r, c, heading, road arrived on, lanes so far)
    heap = [(1, 0, (), r0, c0, (side0 + 2) % 4, first_road, (), False)]
    settled = set()
    while heap:
        n, turns, key, r, c, h, road, lanes, done = heapq.heappop(heap)
        if done:
            return list(lanes)
        if (r, c, h) in settled:
            continue
        settled.add((r, c, h))
        for mv in MOVEMENTS:
            out_h = (h + _TURN[mv]) % 4
            used = lanes + (lane_id(road, mv),)
            dr, dc = _DELTA[out_h]
            rr, cc = r + dr, c + dc
            nxt = _road_out(rows, cols, r, c, out_h)
            item = (turns + (mv != "straight"), key + (order[mv],))
            if 0 <= rr < rows and 0 <= cc < cols:
                heapq.heappush(heap, (n + 1, *item, rr, cc, out_h, nxt, used, False))
            elif (r, c, out_h) == (r1, c1, side1):
                # the exit movement counts toward the turn tie-break too
                heapq.heappush(heap, (n, *item, r, c, out_h, nxt, used + (lane_id(nxt, "straight"),), True))
    return None


def grid_routes(spec: NetworkSpec) -> list[list[str]]:
    """Shortest-path routes for every (entry, exit) boundary pair, U-turns excluded."""
    if spec.grid is None:
        raise ScenarioError("grid routes need a grid network", "grid")
    rows, cols = spec.grid
    ends = []
    for r in range(rows):
        for c in range(cols):
            for side in range(4):
                dr, dc = _DELTA[side]
                if not (0 <= r + dr < rows and 0 <= c + dc < cols):
                    ends.append((r, c, side))
    routes = []
    for r0, c0, s0 in ends:
        for r1, c1, s1 in ends:
            if (r0, c0, s0) == (r1, c1, s1):
                continue  # U-turn
            route = _grid_route(rows, cols, r0, c0, s0, r1, c1, s1)
            if route is not None:
                routes.append(route)
    return routes


SYNTHETIC_PEAK = ((0, 600, 1.00), (600, 1200, 0.25), (1200, 1800, 4.00),
                  (1800, 2400, 2.00), (2400, 3000, 0.2), (3000, 3600, 0.5))


def gen_synthetic_peak(horizon: int = 3600, routes: list[list[str]] | None = None,
                       seed: int = 0, mode: str = "quota") -> FlowSchedule:
    """Flat-peak-flat hour: six 600 s windows totalling 4770 expected arrivals."""
    if horizon != 3600:
        raise ScenarioError("the synthetic peak schedule is defined for a 3600 s horizon", "horizon")
    routes = routes or []
    weights = [1.0 / len(routes)] * len(routes) if routes else []
    flow = FlowSchedule([tuple(float(v) for v in w) for w in SYNTHETIC_PEAK], routes, weights, seed, mode)
    validate_flow(flow)
    return flow


def uniform_flow(rate: float, horizon: float, routes, weights=None, seed: int = 0,
                 mode: str = "quota") -> FlowSchedule:
    weights = list(weights) if weights is not None else [1.0 / len(routes)] * len(routes)
    flow = FlowSchedule([(0.0, float(horizon), float(rate))], [list(r) for r in routes], weights, seed, mode)
    validate_flow(flow)
    return flow


_EPS = 1e-9


def arrivals_at(schedule: FlowSchedule, tick: int) -> int:
    """Quota count for second ``tick``: floor(C(t+1)) - floor(C(t)) with C the
    cumulative expected arrivals, so every window total is exact."""
    return int(math.floor(schedule.cumulative(tick + 1) + _EPS) - math.floor(schedule.cumulative(tick) + _EPS))


def sample_arrivals(schedule: FlowSchedule, tick: int, rng: np.random.Generator) -> list[tuple[int, str]]:
    """Arrivals spawned during ``tick`` as (route index, entry lane) pairs."""
    if schedule.mode == "poisson":
        n = int(rng.poisson(schedule.rate_at(tick)))
    else:
        n = arrivals_at(schedule, tick)
    if n == 0 or not schedule.routes:
        return []
    idx = rng.choice(len(schedule.routes), size=n, p=schedule.weights)
    return [(int(i), schedule.routes[i][0]) for i in idx]


def axis_route_weights(routes: list[list[str]], share: float, axis: str = "NS") -> list[float]:
    """Route weights that put ``share`` of demand on routes entering from the
    two sides of ``axis`` ("NS" or "EW"), split evenly within each group."""
    if axis not in ("NS", "EW"):
        raise ScenarioError(f"axis must be NS or EW, got {axis!r}", "axis")
    if not 0 <= share <= 1:
        raise ScenarioError("share must lie in [0, 1]", "share")
    on = [r[0].split("_")[3] in axis for r in routes]
    n_on = sum(on)
    n_off = len(routes) - n_on
    if n_on == 0 or n_off == 0:
        raise ScenarioError("both route groups must be non-empty", "routes")
    return [share / n_on if o else (1.0 - share) / n_off for o in on]
