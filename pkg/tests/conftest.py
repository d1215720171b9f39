import numpy as np
import pytest

from emloc.geometry import Pose6D
from emloc.graph import Feature3D, GraphEdge, GraphNode, LocalizationGraph
from emloc.sidechannel import MagneticSequence, RssiDistribution, SideChannelFingerprint

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {line}")


def random_fingerprint(rng, aps=("ap0", "ap1"), mag_len=8) -> SideChannelFingerprint:
    wifi = {ap: RssiDistribution.from_samples(rng.normal(rng.uniform(-90, -40), 3, 30)) for ap in aps}
    return SideChannelFingerprint(wifi, MagneticSequence(rng.uniform(30, 60, mag_len)))


def chain_graph(n=5, step=1.0, rng=None, n_features=0, dim=8, fingerprints=True) -> LocalizationGraph:
    """Straight chain along x with optional random fingerprints and features."""
    rng = np.random.default_rng(0) if rng is None else rng
    nodes = {i: GraphNode(i, Pose6D.from_euler([i * step, 0, 0], 0.0)) for i in range(n)}
    edges = [GraphEdge(i, i + 1, Pose6D.from_euler([step, 0, 0], 0.0),
                       random_fingerprint(rng) if fingerprints else None) for i in range(n - 1)]
    feats = {}
    for f in range(n_features):
        d = rng.standard_normal(dim)
        feats[f] = Feature3D(f, rng.uniform(-5, 5, 3), d / np.linalg.norm(d))
    if feats:
        for i in nodes:
            nodes[i].visible_features = frozenset(feats)
    return LocalizationGraph(nodes, edges, feats, dim if feats else 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pnp_fixture(rng, n, planar=False):
    """Random camera looking at n points 2-8 m in front of it; returns
    (camera pose, world points, noiseless pixels)."""
    from emloc.vision import CameraIntrinsics, project_points

    cam = Pose6D.from_euler(rng.uniform(-2, 2, 3), rng.uniform(-np.pi, np.pi), *rng.uniform(-0.5, 0.5, 2))
    pc = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n), rng.uniform(2, 8, n)])
    if planar:
        pc[:, 2] = 5 + 0.3 * pc[:, 0]
    X = cam.transform(pc)
    uv, _ = project_points(cam, X, CameraIntrinsics())
    return cam, X, uv


class StubPnp:
    """Stand-in for NodePnp: succeeds with probability ``p`` per (frame, node),
    deterministically, returning a small body pose in the node frame."""

    def __init__(self, p: float = 0.5, seed: int = 0):
        self.p, self.seed = p, seed
        self.calls = []

    def cost(self, node, obs):
        return 10 * len(obs)

    def solve(self, frame, node, obs):
        from emloc.vision import PoseEstimate

        self.calls.append((frame, node))
        r = np.random.default_rng([self.seed, int(frame), int(node)])
        tm = {"matching": 0.0, "ransac": 0.0}
        if r.random() >= self.p:
            return PoseEstimate.failure(3), None, tm
        body = Pose6D.from_euler(r.normal(0, 0.3, 3), *r.normal(0, 0.2, 3))
        n_in = int(r.integers(8, 40))
        return PoseEstimate(body, n_in, 0.5, True, np.arange(n_in)), body, tm


def square_loop_problem(seed, sig_t=0.05, sig_r=0.01, loop_info_scale=100.0):
    """20 poses around a 5 m square with noisy odometry, five true loop
    closures and one false closure (listed last)."""
    from emloc.assembler.posegraph import Constraint, PoseGraphProblem

    rng = np.random.default_rng(seed)
    corners = [np.array([0, 0]), np.array([5, 0]), np.array([5, 5]), np.array([0, 5])]
    gt = []
    for k in range(20):
        side, s = divmod(k, 5)
        yaw = side * np.pi / 2
        p = corners[side] + np.array([np.cos(yaw), np.sin(yaw)]) * s
        gt.append(Pose6D.from_euler([p[0], p[1], 0], yaw))
    info = np.diag([sig_t**-2] * 3 + [sig_r**-2] * 3)
    odo, init = [], [gt[0]]
    for k in range(19):
        z = gt[k].inverse() @ gt[k + 1] @ Pose6D.from_euler(rng.normal(0, sig_t, 3), *rng.normal(0, sig_r, 3))
        odo.append(Constraint(k, k + 1, z, info))
        init.append(init[-1] @ z)
    pairs = [(19, 0), (4, 16), (9, 1), (14, 6), (12, 3)]
    loops = [Constraint(i, j, gt[i].inverse() @ gt[j], info * loop_info_scale) for i, j in pairs]
    loops.append(Constraint(2, 11, Pose6D.from_euler([0.5, 0.2, 0], 0.3), info * loop_info_scale))
    return PoseGraphProblem(init, odo, loops), gt


SMALL_BENCH_YAML = """\
bench:
  scenario: two-rooms
  runs: 2
  n_particles: 100
  policies:
    - {variant: EMLOC, k: 1}
    - {variant: A2, k: 1}
    - {variant: EXHAUSTIVE, k: 1}
"""
