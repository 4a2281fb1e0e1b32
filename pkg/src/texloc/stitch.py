"""Map construction from overlapping frames.

Consecutive frames are registered pairwise, chained into initial poses,
loop closures are found among frames whose estimates land close together,
and a Gauss-Newton pose-graph solve spreads the residual error.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import FeatureSet, Pose2, compose, inverse, wrap_angle
from .mapdb import MapImage
from .rigid import ransac_rigid, residuals

log = logging.getLogger(__name__)

MIN_PAIR_INLIERS = 8
PAIR_INLIER_THRESHOLD = 3.0
RATIO_TEST = 0.8


class BrokenChainError(RuntimeError):
    """A consecutive pair of frames could not be registered."""

    def __init__(self, index: int):
        super().__init__(f"frames {index} and {index + 1} do not register; capture chain is broken")
        self.index = index


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class PairConstraint:
    image_a: int
    image_b: int
    rel: Pose2  # pose of b in a's frame
    inlier_count: int
    residual: float


@dataclass
class PoseGraph:
    nodes: dict[int, Pose2]
    edges: list[PairConstraint] = field(default_factory=list)
    gauge: int | None = None

    def __post_init__(self):
        if self.gauge is None and self.nodes:
            self.gauge = next(iter(self.nodes))

    def is_connected(self) -> bool:
        if not self.nodes:
            return True
        adj: dict[int, set[int]] = {n: set() for n in self.nodes}
        for e in self.edges:
            adj[e.image_a].add(e.image_b)
            adj[e.image_b].add(e.image_a)
        seen = {self.gauge}
        stack = [self.gauge]
        while stack:
            for m in adj[stack.pop()]:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        return len(seen) == len(self.nodes)


@dataclass
class OptimizeResult:
    poses: list[tuple[int, Pose2]]
    converged: bool
    cost: float
    initial_cost: float
    iterations: int
    cost_history: list[float] = field(default_factory=list)

    def as_dict(self) -> dict[int, Pose2]:
        return dict(self.poses)


def match_descriptors(da: np.ndarray, db: np.ndarray, ratio: float = RATIO_TEST) -> np.ndarray:
    """Ratio-test matches ``(i_a, i_b)`` of every row of ``db`` against ``da``."""
    if len(da) < 2 or len(db) == 0:
        return np.zeros((0, 2), int)
    d2 = np.maximum(2.0 - 2.0 * (db.astype(np.float32) @ da.astype(np.float32).T), 0.0)
    part = np.argpartition(d2, 1, axis=1)[:, :2]
    rows = np.arange(len(db))
    first = np.where(d2[rows, part[:, 0]] <= d2[rows, part[:, 1]], part[:, 0], part[:, 1])
    second = np.where(first == part[:, 0], part[:, 1], part[:, 0])
    ok = d2[rows, first] <= (ratio * ratio) * d2[rows, second]
    return np.stack([first[ok], rows[ok]], axis=1)


def register_pair(fa: FeatureSet, fb: FeatureSet, image_a: int = 0, image_b: int = 1,
                  threshold: float = PAIR_INLIER_THRESHOLD, min_inliers: int = MIN_PAIR_INLIERS,
                  seed: int = 0) -> PairConstraint | None:
    """Rigid pose of frame b in frame a, or ``None`` when the frames do not overlap."""
    m = match_descriptors(fa.descriptors, fb.descriptors)
    if len(m) < max(min_inliers, 2):
        return None
    src = fb.xy[m[:, 1]]
    dst = fa.xy[m[:, 0]]
    fit = ransac_rigid(src, dst, threshold, rng=np.random.default_rng(seed))
    if fit.n_inliers < min_inliers:
        return None
    r = residuals(fit.pose, src[fit.inliers], dst[fit.inliers])
    return PairConstraint(image_a, image_b, fit.pose, fit.n_inliers, float(np.sqrt(np.mean(r * r))))


def _edge_error(xa, xb, z: Pose2, rot_weight: float):
    """Residual ``[dx, dy, L*dtheta]`` of ``inverse(z) * inverse(xa) * xb`` and its Jacobians."""
    dt = np.array([xb[1] - xa[1], xb[2] - xa[2]])
    # Rotation by -(theta_z + theta_a).
    phi = -(z.theta + xa[0])
    c, s = math.cos(phi), math.sin(phi)
    Rp = np.array([[c, -s], [s, c]])
    cz, sz = math.cos(z.theta), math.sin(z.theta)
    tz_local = np.array([cz * z.tx + sz * z.ty, -sz * z.tx + cz * z.ty])
    e_t = Rp @ dt - tz_local
    e_th = wrap_angle(xb[0] - xa[0] - z.theta)
    e = np.array([e_t[0], e_t[1], rot_weight * e_th])
    S = np.array([[0.0, -1.0], [1.0, 0.0]])
    Ja = np.zeros((3, 3))
    Jb = np.zeros((3, 3))
    Ja[:2, 0] = -(Rp @ S @ dt)
    Ja[:2, 1:] = -Rp
    Jb[:2, 1:] = Rp
    Ja[2, 0] = -rot_weight
    Jb[2, 0] = rot_weight
    return e, Ja, Jb


def _total_cost(x: np.ndarray, index: dict[int, int], edges, rot_weight: float) -> float:
    cost = 0.0
    for ed in edges:
        e, _, _ = _edge_error(x[index[ed.image_a]], x[index[ed.image_b]], ed.rel, rot_weight)
        cost += float(e @ e)
    return cost


def optimize(graph: PoseGraph, iters: int = 50, tol: float = 1e-8, rot_weight: float = 800.0) -> OptimizeResult:
    """Gauss-Newton on ``sum |[dx, dy, L*dtheta]|^2`` over edges with the gauge node held fixed.

    ``rot_weight`` is ``L`` in pixels per radian.  Each step is halved until
    the total cost does not increase; when no halving helps the solve stops.
    """
    if graph.gauge not in graph.nodes:
        raise GraphError("gauge node missing from graph")
    if not graph.is_connected():
        raise GraphError("pose graph is not connected")
    ids = list(graph.nodes)
    index = {n: i for i, n in enumerate(ids)}
    x = np.array([graph.nodes[n].as_array() for n in ids], dtype=np.float64)
    g = index[graph.gauge]
    gp = graph.nodes[graph.gauge].as_array()
    # Re-anchor so the gauge node sits at the identity.
    if np.any(gp != 0):
        inv_g = inverse(graph.nodes[graph.gauge])
        x = np.array([compose(inv_g, Pose2.from_array(r)).as_array() for r in x])
    free = [i for i in range(len(ids)) if i != g]
    col = {i: 3 * k for k, i in enumerate(free)}
    nvar = 3 * len(free)

    cost = _total_cost(x, index, graph.edges, rot_weight)
    history = [cost]
    initial = cost
    converged = nvar == 0
    it = 0
    while not converged and it < iters:
        it += 1
        H = np.zeros((nvar, nvar))
        b = np.zeros(nvar)
        for ed in graph.edges:
            ia, ib = index[ed.image_a], index[ed.image_b]
            e, Ja, Jb = _edge_error(x[ia], x[ib], ed.rel, rot_weight)
            blocks = [(ia, Ja), (ib, Jb)]
            for i, Ji in blocks:
                if i == g:
                    continue
                ci = col[i]
                b[ci:ci + 3] += Ji.T @ e
                for j, Jj in blocks:
                    if j == g:
                        continue
                    cj = col[j]
                    H[ci:ci + 3, cj:cj + 3] += Ji.T @ Jj
        try:
            dx = np.linalg.solve(H + 1e-12 * np.eye(nvar), -b)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(H, -b, rcond=None)[0]
        step = 1.0
        accepted = False
        for _ in range(20):
            xn = x.copy()
            for i in free:
                xn[i] += step * dx[col[i]:col[i] + 3]
                xn[i, 0] = wrap_angle(xn[i, 0])
            cn = _total_cost(xn, index, graph.edges, rot_weight)
            if cn <= cost:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        upd = step * float(np.linalg.norm(dx))
        x, cost = xn, cn
        history.append(cost)
        if upd < tol:
            converged = True
    poses = [(n, Pose2.from_array(x[index[n]])) for n in ids]
    if not converged:
        log.warning("pose graph did not converge in %d iterations (cost %.6g)", iters, cost)
    return OptimizeResult(poses, converged, cost, initial, it, history)


def _register_many(pairs, frames, ids, threads):
    def job(p):
        i, j = p
        return register_pair(frames[i], frames[j], ids[i], ids[j], seed=i * 7919 + j)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(job, pairs))
    return [job(p) for p in pairs]


def build_pose_graph(frames: list[FeatureSet], sizes=None, image_ids=None, loop_closures: bool = True,
                     threads: int = 1) -> PoseGraph:
    """Register consecutive frames, chain them, and add loop-closure constraints.

    Loop-closure candidates are non-consecutive frames whose chained centre
    estimates are within one frame diagonal.  Raises :class:`BrokenChainError`
    when a consecutive pair does not register.
    """
    n = len(frames)
    sizes = list(sizes) if sizes is not None else [(1280, 960)] * n
    ids = list(image_ids) if image_ids is not None else list(range(n))
    if n == 0:
        return PoseGraph({})
    seq = _register_many([(i, i + 1) for i in range(n - 1)], frames, ids, threads)
    for i, c in enumerate(seq):
        if c is None:
            raise BrokenChainError(i)
    poses = [Pose2.identity()]
    for c in seq:
        poses.append(compose(poses[-1], c.rel))
    edges = list(seq)

    if loop_closures and n > 2:
        centres = [p @ np.array([w / 2.0, h / 2.0]) for p, (w, h) in zip(poses, sizes)]
        diag = math.hypot(*sizes[0])
        cand = [(i, j) for i in range(n) for j in range(i + 2, n)
                if np.linalg.norm(centres[i] - centres[j]) < diag]
        found = _register_many(cand, frames, ids, threads)
        closures = [c for c in found if c is not None]
        log.info("loop closures: %d of %d candidates registered", len(closures), len(cand))
        edges += closures
    return PoseGraph({ids[i]: poses[i] for i in range(n)}, edges, gauge=ids[0])


def stitch_sequence(frames: list[FeatureSet], sizes=None, image_ids=None, sources=None,
                    loop_closures: bool = True, rot_weight: float | None = None, iters: int = 50,
                    threads: int = 1) -> list[MapImage]:
    """Globally consistent poses for frames given in capture order.

    ``sizes`` holds ``(width, height)`` per frame (default 1280x960).  The
    first frame is the gauge.
    """
    n = len(frames)
    sizes = list(sizes) if sizes is not None else [(1280, 960)] * n
    ids = list(image_ids) if image_ids is not None else list(range(n))
    sources = list(sources) if sources is not None else [""] * n
    if n == 0:
        return []
    if rot_weight is None:
        rot_weight = 0.5 * math.hypot(*sizes[0])
    graph = build_pose_graph(frames, sizes, ids, loop_closures, threads)
    final = optimize(graph, iters=iters, rot_weight=rot_weight).as_dict()
    return [MapImage(ids[i], final[ids[i]], int(sizes[i][0]), int(sizes[i][1]), sources[i]) for i in range(n)]
