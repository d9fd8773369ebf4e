import math
from collections import deque

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synth import make_dataset
from wholebody.anno import Box, Dataset, ImageInfo, make_instance
from wholebody.stats import (GESTURES, LINK, SCALE_PARTS, TREE_PARTS, AnnotationCounts, SkeletonTree,
                             StatsError, blur_bucket, blurriness, cluster_gestures, count_annotations,
                             fingertip_spread, laplacian, mean_edge_length, normalize_hand_pose,
                             scale_distribution, to_gray, yaw_bucket)


@pytest.fixture(scope="module")
def tree():
    return SkeletonTree.load()


# ---------------------------------------------------------------------------
# blurriness

def test_constant_image_hits_floor():
    assert blurriness(np.full((50, 70, 3), 128, np.uint8)) == pytest.approx(-12.0)


def test_checkerboard_matches_hand_computation():
    yy, xx = np.mgrid[:112, :112]
    board = ((yy + xx) % 2).astype(float)
    # every interior pixel has four opposite neighbours: response is +4 or -4
    response = [4 - 8 * board[i, j] for i in range(1, 111) for j in range(1, 111)]
    expected = math.log10(float(np.var(response)) + 1e-12)
    assert expected == pytest.approx(math.log10(16.0))
    assert blurriness(board) == pytest.approx(expected, abs=1e-12)


def test_laplacian_matches_direct_convolution():
    g = np.random.default_rng(0).random((9, 11))
    ref = np.array([[g[i - 1, j] + g[i + 1, j] + g[i, j - 1] + g[i, j + 1] - 4 * g[i, j]
                     for j in range(1, 10)] for i in range(1, 8)])
    assert np.allclose(laplacian(g), ref, atol=1e-12)


def test_gray_uses_luma_weights():
    img = np.zeros((1, 3, 3))
    img[0, 0] = [1, 0, 0]
    img[0, 1] = [0, 1, 0]
    img[0, 2] = [0, 0, 1]
    assert np.allclose(to_gray(img), [[0.299, 0.587, 0.114]])


def texture(seed, shape=(112, 112)):
    """Periodic smooth noise, so wrapped shifts introduce no seam."""
    rng = np.random.default_rng(seed)
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.fftfreq(shape[1])[None, :]
    spectrum = np.fft.fft2(rng.normal(size=shape)) * np.exp(-(fx ** 2 + fy ** 2) / (2 * 0.15 ** 2))
    img = np.real(np.fft.ifft2(spectrum))
    return 255 * (img - img.min()) / np.ptp(img)


@pytest.mark.parametrize("seed", range(5))
def test_repeated_blurring_strictly_lowers_score(seed):
    img = np.random.default_rng(seed).uniform(0, 255, (160, 200, 3)).astype(np.float32)
    last = blurriness(img)
    for _ in range(4):
        img = cv2.GaussianBlur(img, (0, 0), 1.5)
        score = blurriness(img)
        assert score < last
        last = score


@pytest.mark.parametrize("seed", range(5))
def test_whole_pixel_shift_barely_changes_score(seed):
    img = texture(seed)
    base = blurriness(img)
    for dy, dx in ((1, 0), (0, 3), (5, 7), (-2, 11)):
        assert abs(blurriness(np.roll(img, (dy, dx), axis=(0, 1))) - base) < 0.05


def test_blur_and_yaw_buckets():
    assert [blur_bucket(v) for v in (0.5, 1.0, 2.5, 3.0, 9.0)] == ["<1", "1-2", "2-3", ">3", ">3"]
    assert [yaw_bucket(v) for v in (0, -20, 30, 80)] == ["<15", "15-30", "30-45", ">45"]


# ---------------------------------------------------------------------------
# skeleton tree and scale

def test_default_tree_shape(tree):
    assert len(tree.edges) == 132
    for part, members in TREE_PARTS.items():
        assert len(tree.part_edges(part)) == len(members) - 1
    assert len(tree.part_edges(LINK)) == 5


def test_tree_validation_rejects_bad_graphs(tree):
    edges = list(tree.edges)
    with pytest.raises(StatsError):
        SkeletonTree(tuple(edges + [(0, 2, "body")]))
    with pytest.raises(StatsError):
        SkeletonTree(tuple(edges[1:]))
    with pytest.raises(StatsError):
        SkeletonTree(tuple(edges + [(0, 30, "body")]))
    with pytest.raises(StatsError):
        SkeletonTree.parse("0 1")
    with pytest.raises(StatsError):
        SkeletonTree.parse("0 x body")


def embed_tree(tree, length, rng):
    """Keypoints placing every tree edge at exactly ``length``."""
    adj = {}
    for a, b, _ in tree.edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    pos = {0: np.array([300.0, 300.0])}
    queue = deque([0])
    while queue:
        a = queue.popleft()
        for b in adj[a]:
            if b not in pos:
                t = rng.uniform(0, 2 * math.pi)
                pos[b] = pos[a] + length * np.array([math.cos(t), math.sin(t)])
                queue.append(b)
    kps = np.zeros((133, 3))
    for i, p in pos.items():
        kps[i] = [p[0], p[1], 2]
    return kps


def one_instance_dataset(kps):
    inst = make_instance(1, 1, kps, person_box=Box(0, 0, 600, 600))
    return Dataset(images=(ImageInfo(1, 1000, 1000),), instances=(inst,))


def test_equal_edges_give_that_mean(tree):
    kps = embed_tree(tree, 10.0, np.random.default_rng(1))
    hists = scale_distribution(one_instance_dataset(kps), tree)
    assert np.allclose(hists["body"].values, [10.0])
    assert np.allclose(hists["hand"].values, [10.0, 10.0])
    assert hists["body"].counts[1] == 1


def test_scaling_moves_histogram_mass(tree):
    d = make_dataset(n_images=3, seed=4)
    small = d.with_instances([i.with_keypoints(np.column_stack([i.keypoints[:, :2] / 10, i.keypoints[:, 2]]))
                              for i in d.instances])
    big, tiny = scale_distribution(d, tree), scale_distribution(small, tree)
    for part in SCALE_PARTS:
        assert np.allclose(tiny[part].values * 10, big[part].values)


def test_scale_matches_per_edge_recomputation(tree):
    d = make_dataset(n_images=4, seed=5, drop_body=0.4, invalid_parts=0.3)
    hists = scale_distribution(d, tree, bin_width=7.0)
    for part, tree_parts in SCALE_PARTS.items():
        expected = []
        for inst in d.instances:
            for tp in tree_parts:
                lengths = [math.dist(inst.keypoints[a, :2], inst.keypoints[b, :2])
                           for a, b, p in tree.edges if p == tp
                           and inst.keypoints[a, 2] > 0 and inst.keypoints[b, 2] > 0]
                if lengths:
                    expected.append(sum(lengths) / len(lengths))
        assert np.allclose(hists[part].values, expected)
        assert hists[part].total == len(expected)
        assert np.all(np.diff(hists[part].edges) == 7.0) and hists[part].edges[0] == 0


def test_instance_without_usable_edge_is_excluded():
    assert mean_edge_length(np.zeros((133, 3)), np.array([[0, 1]])) is None
    with pytest.raises(StatsError):
        scale_distribution(Dataset(), bin_width=0)


# ---------------------------------------------------------------------------
# hand poses

def random_hand(rng):
    kps = rng.uniform(0, 100, (21, 2))
    kps[9] = kps[0] + [rng.uniform(10, 30), rng.uniform(10, 30)]
    return kps


def similarity(pts, angle, scale, shift):
    c, s = math.cos(angle), math.sin(angle)
    return pts @ (scale * np.array([[c, -s], [s, c]])).T + shift


def test_normalized_pose_is_fixed_point():
    rng = np.random.default_rng(0)
    pose = normalize_hand_pose(random_hand(rng))
    assert np.allclose(pose.reshape(21, 2)[[0, 9]], [[0, 0], [0, 1]], atol=1e-12)
    assert np.allclose(normalize_hand_pose(pose.reshape(21, 2)), pose, atol=1e-12)


def test_rotation_and_scale_do_not_change_pose():
    kps = random_hand(np.random.default_rng(1))
    turned = similarity(kps, math.pi / 2, 3.0, np.zeros(2))
    assert np.allclose(normalize_hand_pose(turned), normalize_hand_pose(kps), atol=1e-9)


def test_similarity_invariance_over_many_transforms():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        kps = random_hand(rng)
        moved = similarity(kps, rng.uniform(-math.pi, math.pi), rng.uniform(0.1, 10), rng.uniform(-500, 500, 2))
        assert np.max(np.abs(normalize_hand_pose(moved) - normalize_hand_pose(kps))) < 1e-9


def test_degenerate_and_unlabeled_hands_rejected():
    kps = np.zeros((21, 3))
    kps[:, 2] = 2
    with pytest.raises(StatsError):
        normalize_hand_pose(kps)
    kps[9] = [0, 5, 0]
    with pytest.raises(StatsError):
        normalize_hand_pose(kps)
    with pytest.raises(StatsError):
        normalize_hand_pose(np.zeros((20, 2)))


def archetypes():
    """Normalized poses: curled fingers, splayed fingers and a pointing hand."""
    fist = np.zeros((21, 2))
    palm = np.zeros((21, 2))
    point = np.zeros((21, 2))
    for f in range(5):
        angle = math.radians(-40 + 20 * f)
        direction = np.array([math.sin(angle), math.cos(angle)])
        for j in range(4):
            i = 1 + 4 * f + j
            palm[i] = direction * (0.5 + 0.5 * j)
            fist[i] = direction * (0.4 + 0.1 * j) * (1 - 0.2 * j)
            point[i] = palm[i] if f == 1 else fist[i]
    shapes = {"fist": fist, "palm": palm, "others": point}
    out = {}
    for name, pts in shapes.items():
        pts = np.array(pts)
        pts[9] = [0, 1]
        out[name] = pts.ravel()
    return out


def gesture_corpus(seed=0, n=100, noise=0.02):
    rng = np.random.default_rng(seed)
    poses, truth = [], []
    for name, base in archetypes().items():
        for _ in range(n):
            poses.append(base + rng.normal(0, noise, 42))
            truth.append(name)
    return np.array(poses), truth


def test_archetypes_cluster_purely():
    poses, truth = gesture_corpus()
    clusters = cluster_gestures(poses)
    assert set(clusters.names) == set(GESTURES)
    agree = np.mean([a == b for a, b in zip(clusters.labels, truth)])
    assert agree >= 0.99


def test_permuted_input_gives_same_partition():
    poses, _ = gesture_corpus(1)
    ref = cluster_gestures(poses).labels
    for seed in range(3):
        perm = np.random.default_rng(seed).permutation(len(poses))
        labels = cluster_gestures(poses[perm]).labels
        assert [labels[np.flatnonzero(perm == i)[0]] for i in range(len(poses))] == ref


def test_identical_poses_share_one_cluster():
    pose = archetypes()["palm"]
    poses = np.tile(pose, (30, 1))
    a = cluster_gestures(poses)
    b = cluster_gestures(poses)
    assert len(set(a.assignments.tolist())) == 1
    assert a.labels == b.labels


def test_cluster_argument_checks():
    poses, _ = gesture_corpus(n=2)
    with pytest.raises(StatsError):
        cluster_gestures(poses[:2])
    with pytest.raises(StatsError):
        cluster_gestures(poses, k=1)
    with pytest.raises(StatsError):
        cluster_gestures(poses[:, :40])


def test_fingertip_spread_orders_archetypes():
    a = archetypes()
    assert fingertip_spread(a["fist"]) < fingertip_spread(a["others"]) < fingertip_spread(a["palm"])


# ---------------------------------------------------------------------------
# counts

def test_empty_counts_are_zero():
    c = count_annotations(Dataset())
    assert c.total_boxes == 0 and c.total_keypoints == 0


def test_single_full_instance_counts():
    d = make_dataset(n_images=1, per_image=(1, 1), seed=0)
    c = count_annotations(d)
    assert c.boxes == {"body": 1, "face": 1, "left_hand": 1, "right_hand": 1}
    assert c.keypoints == {"body": 17, "foot": 6, "face": 68, "left_hand": 21, "right_hand": 21}
    assert c.hand_keypoints == 42 and c.hand_boxes == 2
    assert c.rows()[-1] == ("total", 4, 133)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 1000))
def test_counts_are_additive(seed_a, seed_b):
    a = make_dataset(n_images=2, seed=seed_a, invalid_parts=0.3, drop_body=0.2)
    b = make_dataset(n_images=3, seed=seed_b, invalid_parts=0.3, drop_body=0.2)
    shifted = [type(i)(**{**i.__dict__, "id": i.id + 1000, "image_id": i.image_id + 100}) for i in b.instances]
    both = Dataset(images=a.images + tuple(ImageInfo(x.id + 100, x.width, x.height) for x in b.images),
                   instances=a.instances + tuple(shifted))
    total = count_annotations(a) + count_annotations(b)
    assert count_annotations(both) == total
    assert isinstance(total, AnnotationCounts)
