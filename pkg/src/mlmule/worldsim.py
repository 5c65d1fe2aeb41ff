"""World geometry, mobility models and co-location detection.

Each area is a square of side ``L`` split into four ``L/2`` quadrant spaces.
A central void square of side ``void_frac * L`` is carved out of space
membership, so a device standing there belongs to no space. Areas are laid
out along the x axis with a gap wider than the mobile communication radius,
which keeps them isolated.

Space ids are global: area ``a`` owns spaces ``4a .. 4a+3`` (lower-left,
lower-right, upper-left, upper-right) and the fixed device of space ``s``
has id ``s``.
"""
from __future__ import annotations

import math
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, TraceParseError, ValidationError

MAX_RESAMPLE = 64
SPACES_PER_AREA = 4


@dataclass(frozen=True)
class Square:
    x0: float
    y0: float
    side: float

    @property
    def x1(self) -> float:
        return self.x0 + self.side

    @property
    def y1(self) -> float:
        return self.y0 + self.side

    @property
    def center(self) -> tuple[float, float]:
        h = self.side / 2.0
        return (self.x0 + h, self.y0 + h)

    def contains(self, p) -> bool:
        # closed square
        return self.x0 <= p[0] <= self.x1 and self.y0 <= p[1] <= self.y1


@dataclass(frozen=True)
class Space:
    id: int
    bounds: Square
    fixed_device: int


@dataclass(frozen=True)
class Area:
    id: int
    bounds: Square
    spaces: tuple[Space, ...]
    central_void: Square

    def in_void(self, p) -> bool:
        return self.central_void.side > 0 and self.central_void.contains(p)


@dataclass(frozen=True)
class WorldConfig:
    n_areas: int = 2
    side: float = 30.0
    void_frac: float = 0.25
    step_length: float = 1.0
    comm_radius_mobile: float = 3.0
    seed: int = 0


@dataclass(frozen=True)
class World:
    areas: tuple[Area, ...]
    step_length: float
    comm_radius_mobile: float
    seed: int = 0

    @property
    def spaces(self) -> tuple[Space, ...]:
        return tuple(s for a in self.areas for s in a.spaces)

    def space(self, sid: int) -> Space:
        return self.areas[sid // SPACES_PER_AREA].spaces[sid % SPACES_PER_AREA]

    def area_of_space(self, sid: int) -> Area:
        return self.areas[sid // SPACES_PER_AREA]

    def area_at(self, p) -> Area | None:
        for area in self.areas:
            if area.bounds.contains(p):
                return area
        return None

    def fixed_positions(self) -> dict[int, tuple[float, float]]:
        return {s.fixed_device: s.bounds.center for s in self.spaces}


@dataclass(frozen=True, order=True)
class CoLocation:
    mule: int
    fixed: int
    t: int


def build_world(config: WorldConfig) -> World:
    if not config.side > 0:
        raise ConfigError(f"area side must be positive, got {config.side}", key="side")
    if not 0 <= config.void_frac < 1:
        raise ConfigError(f"void_frac must lie in [0, 1), got {config.void_frac}", key="void_frac")
    if config.n_areas < 1:
        raise ConfigError("n_areas must be at least 1", key="n_areas")
    if config.step_length <= 0:
        raise ConfigError("step_length must be positive", key="step_length")
    if config.comm_radius_mobile < 0:
        raise ConfigError("comm_radius_mobile must be non-negative", key="comm_radius_mobile")

    L = float(config.side)
    gap = 2.0 * config.comm_radius_mobile + 1.0
    half = L / 2.0
    areas = []
    for a in range(config.n_areas):
        x0 = a * (L + gap)
        spaces = []
        for q in range(SPACES_PER_AREA):
            sid = a * SPACES_PER_AREA + q
            qx = x0 + (q % 2) * half
            qy = (q // 2) * half
            spaces.append(Space(id=sid, bounds=Square(qx, qy, half), fixed_device=sid))
        v = config.void_frac * L
        void = Square(x0 + (L - v) / 2.0, (L - v) / 2.0, v)
        areas.append(Area(id=a, bounds=Square(x0, 0.0, L), spaces=tuple(spaces), central_void=void))
    return World(
        areas=tuple(areas),
        step_length=float(config.step_length),
        comm_radius_mobile=float(config.comm_radius_mobile),
        seed=config.seed,
    )


def _locate_in_area(p, area: Area) -> int | None:
    if area.in_void(p):
        return None
    for s in area.spaces:  # ascending ids: shared boundaries go to the lower id
        if s.bounds.contains(p):
            return s.id
    return None


def locate(p, w: World) -> int | None:
    """Space id whose membership region contains ``p``, or None."""
    for area in w.areas:
        if area.bounds.contains(p):
            return _locate_in_area(p, area)
    return None


def _reflect(v: float, lo: float, hi: float) -> float:
    if v < lo:
        v = 2 * lo - v
    elif v > hi:
        v = 2 * hi - v
    return min(max(v, lo), hi)


def _uniform_step(pos, area: Area, step: float, rng) -> tuple[float, float]:
    dx, dy = rng.uniform(-step, step, 2)
    b = area.bounds
    return (_reflect(pos[0] + dx, b.x0, b.x1), _reflect(pos[1] + dy, b.y0, b.y1))


def _nearest_exit(pos, space: Space, area: Area) -> tuple[float, float]:
    """Point just beyond the nearest boundary of ``space`` that is still in the area."""
    b, ab = space.bounds, area.bounds
    eps = 1e-6 * ab.side
    best, best_d = None, math.inf
    # interior edges only; the area wall cannot be crossed
    if b.x0 > ab.x0 and pos[0] - b.x0 < best_d:
        best, best_d = (b.x0 - eps, pos[1]), pos[0] - b.x0
    if b.x1 < ab.x1 and b.x1 - pos[0] < best_d:
        best, best_d = (b.x1 + eps, pos[1]), b.x1 - pos[0]
    if b.y0 > ab.y0 and pos[1] - b.y0 < best_d:
        best, best_d = (pos[0], b.y0 - eps), pos[1] - b.y0
    if b.y1 < ab.y1 and b.y1 - pos[1] < best_d:
        best, best_d = (pos[0], b.y1 + eps), b.y1 - pos[1]
    v = area.central_void
    if v.side > 2 * eps:
        cx = min(max(pos[0], v.x0 + eps), v.x1 - eps)
        cy = min(max(pos[1], v.y0 + eps), v.y1 - eps)
        d = math.hypot(cx - pos[0], cy - pos[1])
        if d < best_d:
            best = (cx, cy)
    return best


def step_random_walk(pos, area: Area, w: World, p_cross: float, rng) -> tuple[float, float]:
    """Advance one mobile device by one time step.

    Inside a space, a crossing attempt (probability ``p_cross``) moves the
    device toward the nearest exterior point; otherwise the uniform step is
    resampled until it stays in the space. In open space the step is
    unconstrained. Area walls reflect in both cases.
    """
    step = w.step_length
    sid = _locate_in_area(pos, area)
    if sid is None:
        return _uniform_step(pos, area, step, rng)
    space = area.spaces[sid % SPACES_PER_AREA]
    if rng.random() < p_cross:
        tx, ty = _nearest_exit(pos, space, area)
        dx, dy = tx - pos[0], ty - pos[1]
        cheb = max(abs(dx), abs(dy))
        if cheb > step:
            dx, dy = dx * step / cheb, dy * step / cheb
        return (pos[0] + dx, pos[1] + dy)
    for _ in range(MAX_RESAMPLE):
        cand = _uniform_step(pos, area, step, rng)
        if _locate_in_area(cand, area) == sid:
            return cand
    return (pos[0], pos[1])


def random_point_in_space(space: Space, area: Area, rng) -> tuple[float, float]:
    b = space.bounds
    while True:
        p = (float(rng.uniform(b.x0, b.x1)), float(rng.uniform(b.y0, b.y1)))
        if _locate_in_area(p, area) == space.id:
            return p


def detect_colocations(w: World, positions: Mapping[int, tuple], t: int) -> set[CoLocation]:
    out = set()
    for mule, p in positions.items():
        sid = locate(p, w)
        if sid is not None:
            out.add(CoLocation(mule, w.space(sid).fixed_device, t))
    return out


def detect_mobile_encounters(w: World, positions: Mapping[int, tuple], t: int) -> set[tuple[int, int]]:
    """Unordered mobile pairs within the closed communication ball."""
    ids = sorted(positions)
    if len(ids) < 2:
        return set()
    xy = np.array([positions[i] for i in ids], dtype=float)
    d2 = ((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1)
    r2 = w.comm_radius_mobile ** 2
    ii, jj = np.nonzero(np.triu(d2 <= r2, k=1))
    return {(ids[i], ids[j]) for i, j in zip(ii, jj)}


# --- trace replay ---------------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    user: int
    place: int
    start: int
    duration: int

    @property
    def end(self) -> int:
        return self.start + self.duration


@dataclass(frozen=True)
class MobilityTrace:
    records: tuple[TraceRecord, ...]
    user_names: tuple[str, ...] = ()
    place_names: tuple[str, ...] = ()

    @property
    def n_users(self) -> int:
        return len(self.user_names)


_SPACE_ID = re.compile(r"s(\d+)")


def parse_trace_lines(lines: Iterable[str], n_spaces: int = 8) -> MobilityTrace:
    users: dict[str, int] = {}
    places: dict[str, int] = {}
    n_unknown = 0
    recs = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [x.strip() for x in line.split(",")]
        if len(parts) != 4:
            raise TraceParseError(f"expected 4 fields, got {len(parts)}", lineno)
        user, place, start_s, dur_s = parts
        if not user or not place:
            raise TraceParseError("empty user or place id", lineno)
        try:
            start, dur = int(start_s), int(dur_s)
        except ValueError:
            raise TraceParseError(f"non-integer step in {line!r}", lineno) from None
        if start < 0 or dur < 1:
            raise TraceParseError("start must be >= 0 and duration >= 1", lineno)
        uid = users.setdefault(user, len(users))
        if place not in places:
            known = _SPACE_ID.fullmatch(place)
            if known and int(known.group(1)) < n_spaces:
                places[place] = int(known.group(1))
            else:
                places[place] = n_unknown % n_spaces
                n_unknown += 1
        recs.append(TraceRecord(uid, places[place], start, dur))
    recs.sort(key=lambda r: (r.start, r.user))
    last_end: dict[int, int] = {}
    for r in recs:
        if r.start < last_end.get(r.user, 0):
            name = next(k for k, v in users.items() if v == r.user)
            raise ValidationError(f"overlapping intervals for user {name!r} at step {r.start}")
        last_end[r.user] = r.end
    return MobilityTrace(tuple(recs), tuple(users), tuple(places))


def load_trace(path, n_spaces: int = 8) -> MobilityTrace:
    with open(path, encoding="utf-8") as fh:
        return parse_trace_lines(fh, n_spaces)


def write_trace(trace: MobilityTrace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# user_id,place_id,start_step,duration_steps\n")
        for r in trace.records:
            user = trace.user_names[r.user] if trace.user_names else f"u{r.user}"
            fh.write(f"{user},s{r.place},{r.start},{r.duration}\n")


def trace_colocations(tr: MobilityTrace, t: int) -> set[CoLocation]:
    return {CoLocation(r.user, r.place, t) for r in tr.records if r.start <= t < r.end}


def trace_timeline(tr: MobilityTrace, horizon: int) -> dict[int, list[CoLocation]]:
    """Co-locations for every step in ``[0, horizon)``, keyed by step (sparse)."""
    out: dict[int, list[CoLocation]] = defaultdict(list)
    for r in tr.records:
        for t in range(r.start, min(r.end, horizon)):
            out[t].append(CoLocation(r.user, r.place, t))
    for t in out:
        out[t].sort()
    return dict(out)


def synth_trace(n_users: int, n_spaces: int, horizon: int, rng,
                visits_per_user: float = 6.0, mean_dwell: float = 25.0,
                lifetime_frac: float = 0.35) -> MobilityTrace:
    """Sparse check-in style trace with churn.

    Each user is active during a random window covering ``lifetime_frac`` of
    the horizon on average and makes a Poisson number of visits, mostly to a
    small personal set of places. Users appear briefly and disappear.
    """
    recs = []
    names = []
    for u in range(n_users):
        names.append(f"u{u}")
        life = max(1, int(rng.exponential(lifetime_frac * horizon)))
        life = min(life, horizon)
        birth = int(rng.integers(0, max(1, horizon - life + 1)))
        favourites = rng.choice(n_spaces, size=min(2, n_spaces), replace=False)
        n_visits = int(rng.poisson(visits_per_user))
        starts = np.sort(rng.integers(birth, birth + life, size=n_visits))
        end = -1
        for s in starts:
            s = int(max(s, end))
            dur = 1 + int(rng.geometric(1.0 / mean_dwell))
            if s >= horizon:
                break
            place = int(favourites[rng.integers(len(favourites))]) if rng.random() < 0.8 \
                else int(rng.integers(n_spaces))
            recs.append(TraceRecord(u, place, s, dur))
            end = s + dur + 1
    recs.sort(key=lambda r: (r.start, r.user))
    return MobilityTrace(tuple(recs), tuple(names), tuple(f"s{i}" for i in range(n_spaces)))
