import pytest

from ltedsim.policies import (BASELINES, DETECT, TRACK, DeviationThreshold, EdgeDetectionOnly, FixedInterval,
                              LocalTrackingOnly, ParallelTrackDetect, RandomChoice, make_baseline)
from ltedsim.scene import ChannelConfig, SceneConfig
from ltedsim.timing import DecisionState, DeviceConfig, run_episode

EPS = 1e-9


def state(o_x=0.0, o_y=0.0, finv=1, qlen=0):
    return DecisionState(o_x, o_y, finv, qlen, 88.5e6, 88.5e6)


def heavy(frames=120, interval=0.7):
    return DeviceConfig(0, interval, 0.5, 1.0, num_frames=frames)


def episode(policy, frames=120, interval=0.7, seed=0):
    return run_episode([heavy(frames, interval)], ChannelConfig(), SceneConfig(num_frames=frames),
                       {0: policy}, seed=seed)


def test_first_frame_is_always_detected():
    for name in BASELINES:
        assert make_baseline(name).decide(state(), 1) == DETECT


def test_fixed_rules():
    assert LocalTrackingOnly().decide(state(finv=100), 5) == TRACK
    assert EdgeDetectionOnly().decide(state(finv=0), 5) == DETECT
    intv = FixedInterval(15)
    assert intv.decide(state(finv=14), 20) == TRACK
    assert intv.decide(state(finv=15), 20) == DETECT


def test_deviation_threshold_uses_euclidean_norm():
    dev = DeviationThreshold(10.0)
    assert dev.decide(state(6.0, 8.0), 3) == TRACK  # norm exactly 10
    assert dev.decide(state(6.0, 8.1), 3) == DETECT
    assert dev.decide(state(-11.0, 0.0), 3) == DETECT


@pytest.mark.parametrize("bad", [lambda: FixedInterval(0), lambda: DeviationThreshold(-1),
                                 lambda: RandomChoice(1.5), lambda: make_baseline("nope")])
def test_invalid_parameters(bad):
    with pytest.raises(ValueError):
        bad()


def test_interval_policy_detects_every_fifteen_frames():
    tls = episode(FixedInterval(15), frames=80)
    assert [t.frame for t in tls if t.action == DETECT] == [1, 16, 31, 46, 61, 76]
    assert all(t.keyframe == 16 for t in tls if 16 < t.frame < 31)


def test_random_policy_is_seeded():
    def draws(seed):
        pol = make_baseline("lted_rand", seed=seed)
        return [pol.decide(state(), f) for f in range(2, 2000)]
    a, b, c = draws(3), draws(3), draws(4)
    assert a == b != c
    assert 0.45 < sum(a) / len(a) < 0.55
    assert all(RandomChoice(0.0).decide(state(), f) == DETECT for f in range(2, 50))
    assert all(RandomChoice(1.0).decide(state(), f) == TRACK for f in range(2, 50))


def test_baseline_episodes_reproducible():
    for name in BASELINES:
        a = episode(make_baseline(name, seed=1), frames=60)
        b = episode(make_baseline(name, seed=1), frames=60)
        assert [t.row() for t in a] == [t.row() for t in b]


def test_tracking_only_never_offloads_again():
    tls = episode(LocalTrackingOnly())
    assert all(t.action == TRACK for t in tls[1:])
    assert all(t.W == 0.0 for t in tls[2:] if t.w == 0.0)


def test_parallel_keeps_one_detection_in_flight():
    tls = episode(ParallelTrackDetect(), frames=150)
    dets = [t for t in tls if t.action == DETECT]
    assert len(dets) > 10
    # the next detection is only offloaded after the previous result is back
    for a, b in zip(dets, dets[1:]):
        assert b.tau0 - b.d_up >= a.T - EPS
        assert b.w == 0.0
    # a detected frame is the arrival right after the previous result
    for a, b in zip(dets, dets[1:]):
        arrivals_between = [t for t in tls if a.tau < t.tau < b.tau]
        assert all(t.tau < a.T + EPS for t in arrivals_between)
    # tracked frames use the latest keyframe whose result had returned
    done = {t.frame: t.T for t in dets}
    for t in tls:
        if t.action == TRACK:
            start = t.T - t.d_trk
            assert done[t.keyframe] <= start + EPS
            newer = [f for f, T in done.items() if f > t.keyframe and T <= t.decision_time - EPS]
            assert not newer


def test_parallel_tracker_is_sequential():
    tls = [t for t in episode(ParallelTrackDetect(), frames=150) if t.action == TRACK]
    for a, b in zip(tls, tls[1:]):
        assert b.T - b.d_trk >= a.T - EPS
