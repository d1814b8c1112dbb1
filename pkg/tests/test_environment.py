import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from quadgps.dynamics import make_state
from quadgps.environment import (BEAM_ANGLES, MAX_RANGE, NUM_BEAMS, OBS_DIM,
                                 CrashParams, CrashStatus, Cylinder,
                                 Environment, WallSegment, detect_crash,
                                 generate_forest, generate_winding_hallway,
                                 make_empty, make_scenario,
                                 make_single_cylinder, make_straight_hallway,
                                 observe, ray_cast, signed_distance)

CYL = Environment(cylinders=(Cylinder(0.0, 0.0, 0.5, 4.0),))


# ---------------------------------------------------------------------------
# signed distance
# ---------------------------------------------------------------------------

def test_signed_distance_cylinder_basics():
    assert signed_distance(CYL, [2.0, 0.0, 1.0]) == pytest.approx(1.5)
    assert signed_distance(CYL, [0.5, 0.0, 1.0]) == pytest.approx(0.0)
    assert signed_distance(CYL, [0.0, 0.0, 1.0]) == pytest.approx(-0.5)
    assert signed_distance(CYL, [0.0, 0.0, 4.5]) == pytest.approx(0.5)
    # above the rim: both radial and vertical parts count
    assert signed_distance(CYL, [1.5, 0.0, 5.0]) == pytest.approx(math.hypot(1.0, 1.0))


def test_signed_distance_empty_world():
    assert np.isinf(signed_distance(make_empty(), [0.0, 0.0, 1.0]))


def test_signed_distance_vs_surface_sampling_oracle(rng):
    # brute force: densely sample the cylinder surface and take the min
    # point distance; compare against the closed form
    cyl = Cylinder(1.0, -2.0, 0.7, 3.0)
    env = Environment(cylinders=(cyl,))
    phis = np.linspace(0, 2 * math.pi, 4000, endpoint=False)
    zs = np.linspace(0.0, cyl.height, 400)
    side = np.stack([
        np.repeat(cyl.center_x + cyl.radius * np.cos(phis), zs.size),
        np.repeat(cyl.center_y + cyl.radius * np.sin(phis), zs.size),
        np.tile(zs, phis.size)], axis=-1)
    rr = np.linspace(0, cyl.radius, 400)
    cap = np.stack([
        cyl.center_x + np.repeat(rr, phis.size) * np.cos(np.tile(phis, rr.size)),
        cyl.center_y + np.repeat(rr, phis.size) * np.sin(np.tile(phis, rr.size)),
        np.full(rr.size * phis.size, cyl.height)], axis=-1)
    surface = np.concatenate([side, cap])
    tree = cKDTree(surface)
    for _ in range(30):
        p = rng.uniform([-3, -6, 0.05], [5, 2, 5])
        expected = tree.query(p)[0]
        inside = (math.hypot(p[0] - 1.0, p[1] + 2.0) < cyl.radius
                  and p[2] < cyl.height)
        if inside:
            expected = -expected
        assert abs(float(signed_distance(env, p)) - expected) < 1e-3


def test_wall_distance():
    env = Environment(walls=(WallSegment(0.0, 0.0, 10.0, 0.0, 4.0),))
    assert signed_distance(env, [5.0, 2.0, 1.0]) == pytest.approx(2.0)
    assert signed_distance(env, [-3.0, 4.0, 1.0]) == pytest.approx(5.0)
    assert signed_distance(env, [5.0, 0.0, 6.0]) == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

def test_ray_cast_max_range_when_clear():
    assert ray_cast(make_empty(), [0, 0, 1], [1, 0, 0]) == pytest.approx(MAX_RANGE)


def test_ray_cast_cylinder_closed_form():
    assert ray_cast(CYL, [-2, 0, 1], [1, 0, 0]) == pytest.approx(1.5)
    assert ray_cast(CYL, [-2, 0, 1], [0, 1, 0]) == pytest.approx(MAX_RANGE)
    # above the cylinder: horizontal beam misses
    assert ray_cast(CYL, [-2, 0, 4.5], [1, 0, 0]) == pytest.approx(MAX_RANGE)


def test_ray_cast_ground_hit():
    d = 1.0 / math.sqrt(2.0)
    assert ray_cast(make_empty(), [0, 0, 1], [d, 0, -d]) == pytest.approx(math.sqrt(2.0))


def test_ray_cast_vs_marching_oracle(rng):
    # solid obstacles and the ground admit a signed-distance marching oracle
    env = Environment(
        cylinders=(Cylinder(1.0, 1.0, 0.6, 4.0), Cylinder(-2.0, 0.5, 0.4, 2.0)))
    n_rays = 250
    origins = rng.uniform([-3.5, -2.5, 0.2], [3.5, 2.5, 4.5], size=(n_rays, 3))
    az = rng.uniform(0, 2 * math.pi, n_rays)
    el = rng.uniform(-0.7, 0.7, n_rays)
    dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                     np.sin(el)], axis=-1)
    got = ray_cast(env, origins, dirs)
    step = 1e-4
    ts = np.arange(step, MAX_RANGE + step, step)
    for k in range(n_rays):
        if float(signed_distance(env, origins[k])) < 0:
            continue
        pts = origins[k] + ts[:, None] * dirs[k]
        inside = (signed_distance(env, pts) <= 0.0) | (pts[:, 2] <= 0.0)
        expected = ts[np.argmax(inside)] if inside.any() else MAX_RANGE
        assert abs(got[k] - expected) < 2e-4


def test_ray_cast_walls_vs_shapely_oracle(rng):
    from shapely.geometry import LineString

    walls = (WallSegment(-4.0, -3.0, 4.0, -3.0, 4.0),
             WallSegment(1.0, -3.0, 1.0, 5.0, 2.5))
    env = Environment(walls=walls)
    for _ in range(300):
        o = rng.uniform([-3.5, -2.5, 0.2], [3.5, 2.5, 4.5])
        az = rng.uniform(0, 2 * math.pi)
        el = rng.uniform(-0.6, 0.6)
        d = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az),
                      math.sin(el)])
        got = float(ray_cast(env, o, d))
        # independent 2D construction: intersect the ray's horizontal
        # projection with each wall segment, then check the z window
        best = MAX_RANGE
        horiz = math.hypot(d[0], d[1])
        if horiz > 1e-12:
            ray2d = LineString([(o[0], o[1]),
                                (o[0] + d[0] * 10.0, o[1] + d[1] * 10.0)])
            for w in walls:
                seg = LineString([(w.x1, w.y1), (w.x2, w.y2)])
                hit = ray2d.intersection(seg)
                if hit.is_empty:
                    continue
                pts = [hit] if hit.geom_type == "Point" else list(hit.geoms)
                for p in pts:
                    t = math.hypot(p.x - o[0], p.y - o[1]) / horiz
                    z = o[2] + t * d[2]
                    if 1e-9 < t and 0.0 <= z <= w.height:
                        best = min(best, t)
        if d[2] < -1e-9:
            best = min(best, -o[2] / d[2])
        best = min(best, MAX_RANGE)
        assert abs(got - best) < 1e-9


@given(st.integers(0, 10**6))
@settings(max_examples=30)
def test_ray_cast_never_exceeds_max_range(seed):
    rng = np.random.default_rng(seed)
    env = Environment(cylinders=(Cylinder(0.0, 0.0, 0.5, 4.0),))
    o = rng.uniform([-4, -4, 0.1], [4, 4, 5])
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    r = float(ray_cast(env, o, d))
    assert 0.0 < r <= MAX_RANGE


# ---------------------------------------------------------------------------
# observation
# ---------------------------------------------------------------------------

def test_observation_layout_and_dimension():
    x = make_state(p=(0, 0, 2), v=(1, 2, 3), w=(0.1, 0.2, 0.3))
    obs = observe(make_empty(), x)
    assert obs.shape == (OBS_DIM,)
    assert np.allclose(obs[:NUM_BEAMS], MAX_RANGE)
    assert np.allclose(obs[30:33], (1, 2, 3))
    assert np.allclose(obs[33:37], (1, 0, 0, 0))
    assert np.allclose(obs[37:40], (0.1, 0.2, 0.3))


def test_observation_contains_no_position():
    env = make_empty()
    x1 = make_state(p=(0, 0, 2), v=(1, 0, 0))
    x2 = make_state(p=(25, -7, 3), v=(1, 0, 0))
    assert np.allclose(observe(env, x1), observe(env, x2))


def test_observation_wall_ahead():
    env = Environment(walls=(WallSegment(1.5, -10.0, 1.5, 10.0, 4.0),))
    x = make_state(p=(0, 0, 2))
    obs = observe(env, x)
    center = obs[NUM_BEAMS // 2 - 1: NUM_BEAMS // 2 + 1]
    # the two middle beams sit ~3 degrees off the forward axis
    assert np.all(center < 1.51)
    assert np.all(center > 1.49)
    assert obs[0] == pytest.approx(MAX_RANGE)   # sideways beams run parallel
    assert obs[NUM_BEAMS - 1] == pytest.approx(MAX_RANGE)


def test_observation_rotates_with_yaw():
    env = Environment(walls=(WallSegment(1.5, -10.0, 1.5, 10.0, 4.0),))
    # facing +y: the wall sits to the right of the fan center
    x = make_state(p=(0, 0, 2), q=(math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)))
    obs = observe(env, x)
    assert obs[0] == pytest.approx(1.5, abs=0.01)      # first beam points +x
    assert obs[NUM_BEAMS // 2] == pytest.approx(MAX_RANGE)


def test_beam_fan_geometry():
    assert NUM_BEAMS == 30
    assert BEAM_ANGLES[0] == pytest.approx(-math.pi / 2)
    assert BEAM_ANGLES[-1] == pytest.approx(math.pi / 2)
    diffs = np.diff(BEAM_ANGLES)
    assert np.allclose(diffs, diffs[0])


# ---------------------------------------------------------------------------
# crash detection
# ---------------------------------------------------------------------------

def test_detect_crash_cases():
    env = CYL
    assert detect_crash(env, make_state(p=(10, 0, 2))) is CrashStatus.FLYING
    assert detect_crash(env, make_state(p=(10, 0, 0.0))) is CrashStatus.GROUND_COLLISION
    assert detect_crash(env, make_state(p=(0.7, 0, 1))) is CrashStatus.OBSTACLE_COLLISION
    assert detect_crash(env, make_state(p=(0, 0, 4.5))) is CrashStatus.OVERFLEW_OBSTACLE
    # inside the inflated footprint but below the rim: collision rules apply
    assert detect_crash(env, make_state(p=(1.2, 0, 4.5))) is CrashStatus.OVERFLEW_OBSTACLE
    assert detect_crash(env, make_state(p=(2.0, 0, 4.5))) is CrashStatus.FLYING


def test_detect_crash_radius_threshold():
    env = CYL
    crash = CrashParams()
    just_outside = make_state(p=(0.5 + crash.vehicle_radius_m + 0.01, 0, 1))
    just_inside = make_state(p=(0.5 + crash.vehicle_radius_m - 0.01, 0, 1))
    assert detect_crash(env, just_outside) is CrashStatus.FLYING
    assert detect_crash(env, just_inside) is CrashStatus.OBSTACLE_COLLISION


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def test_forest_deterministic():
    f1 = generate_forest(7, extent=40.0)
    f2 = generate_forest(7, extent=40.0)
    assert f1.to_dict() == f2.to_dict()
    assert generate_forest(8, extent=40.0).to_dict() != f1.to_dict()


def test_forest_spacing_statistics():
    means = []
    for seed in range(10):
        f = generate_forest(seed, extent=60.0)
        centers = np.array([[c.center_x, c.center_y] for c in f.cylinders])
        d, _ = cKDTree(centers).query(centers, k=2)
        means.append(d[:, 1].mean())
    assert abs(np.mean(means) - 5.0) < 0.5


def test_forest_shape_and_clearance():
    f = generate_forest(3, extent=40.0)
    for c in f.cylinders[:20]:
        assert c.radius == pytest.approx(0.5)
        assert c.height == pytest.approx(4.0)
    centers = np.array([[c.center_x, c.center_y] for c in f.cylinders])
    assert np.hypot(centers[:, 0], centers[:, 1]).min() > 4.0


def test_forest_rejects_tight_packing():
    with pytest.raises(ValueError):
        generate_forest(0, mean_spacing=0.9, cylinder_radius=0.5)


def test_winding_hallway_deterministic():
    w1 = generate_winding_hallway(5, n_segments=10)
    w2 = generate_winding_hallway(5, n_segments=10)
    assert w1.to_dict() == w2.to_dict()


def test_winding_hallway_zero_turn_matches_straight(rng):
    w = generate_winding_hallway(3, max_turn_deg=0.0, n_segments=13)
    straight = make_straight_hallway(length=13 * 5.0)
    pts = rng.uniform([-4, -3, 0], [55, 3, 4], size=(300, 3))
    assert np.allclose(signed_distance(w, pts), signed_distance(straight, pts))


def test_winding_hallway_turn_limit():
    env = generate_winding_hallway(11, max_turn_deg=30.0, n_segments=40)
    walls = np.array([[w.x1, w.y1, w.x2, w.y2] for w in env.walls])
    # wall segment headings change by at most the turn limit between
    # consecutive pieces of the same side
    side = walls[:39]
    headings = np.arctan2(side[:, 3] - side[:, 1], side[:, 2] - side[:, 0])
    turns = np.diff(headings)
    turns = (turns + math.pi) % (2 * math.pi) - math.pi
    assert np.abs(turns).max() <= math.radians(30.0) + 1e-9


def test_winding_hallway_corners_closed(rng):
    env = generate_winding_hallway(2, n_segments=20)
    # a dense horizontal scan from inside must never escape through a corner:
    # every cast in the plane of the hallway hits something within the span
    # of the geometry
    x = make_state(p=(0.0, 0.0, 2.0))
    for _ in range(200):
        az = rng.uniform(0, 2 * math.pi)
        d = np.array([math.cos(az), math.sin(az), 0.0])
        r = float(ray_cast(env, [0.0, 0.0, 2.0], d, max_range=150.0))
        assert r < 150.0


def test_scenarios():
    for name in ("empty", "cylinder", "straight_hallway", "forest",
                 "winding_hallway"):
        env = make_scenario(name, seed=1)
        assert isinstance(env, Environment)
    with pytest.raises(ValueError):
        make_scenario("maze")


def test_environment_serialization_roundtrip():
    env = make_single_cylinder()
    again = Environment.from_dict(env.to_dict())
    assert again.to_dict() == env.to_dict()
    assert float(signed_distance(again, [0, 0, 1])) == float(signed_distance(env, [0, 0, 1]))
