import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import naive_weighted_sum
from securefl.errors import EmptyRound, InvalidHyperparameter, ShapeMismatch
from securefl.optim import (
    ADAPTIVE,
    ClientUpdate,
    OptimizerKind,
    aggregate,
    init_state,
    server_step,
    weighted_mean,
)
from securefl.params import Group, ParameterSet

# hand evaluations of the adaptive rules on a single step, delta = [3], zero slots
ADAGRAD_BETA0_STEP = 0.9996667777407531  # 3 / (sqrt(9) + 1e-3)
ADAGRAD_DEFAULT_STEP = 0.09996667777407531  # 0.3 / (sqrt(9) + 1e-3)
ADAM_DEFAULT_STEP = 0.9966777408637874  # 0.3 / (sqrt(0.09) + 1e-3)


def vec(values, name="w"):
    return ParameterSet([(name, Group.DECAY, [len(values)], values)])


def two_entry(a, b):
    return ParameterSet([("w", Group.DECAY, [len(a)], a), ("b", Group.BIAS, [len(b)], b)])


def test_aggregate_weighted_mean_example():
    out = aggregate([ClientUpdate(0, vec([4.0]), 1), ClientUpdate(1, vec([0.0]), 3)])
    assert out.flat.tolist() == [1.0]


def test_aggregate_single_client_identity():
    d = vec([0.1, -2.5, 3.75])
    assert aggregate([ClientUpdate(7, d, 13)]) == d


def test_aggregate_matches_naive_loop():
    rng = np.random.default_rng(11)
    deltas = [rng.normal(size=10) for _ in range(5)]
    counts = [int(c) for c in rng.integers(1, 500, 5)]
    got = aggregate([ClientUpdate(i, vec(d), n) for i, (d, n) in enumerate(zip(deltas, counts))]).flat
    want = np.array(naive_weighted_sum(deltas, counts))
    assert np.all(np.abs(got - want) <= 1e-12 * np.maximum(1.0, np.abs(want)))


def test_aggregate_errors():
    with pytest.raises(EmptyRound):
        aggregate([])
    with pytest.raises(ShapeMismatch):
        aggregate([ClientUpdate(0, vec([1.0]), 1), ClientUpdate(1, vec([1.0, 2.0]), 1)])
    with pytest.raises(ValueError):
        ClientUpdate(0, vec([1.0]), 0)


@st.composite
def rounds(draw, max_clients=6, max_len=8):
    m = draw(st.integers(1, max_clients))
    k = draw(st.integers(1, max_len))
    floats = st.floats(-1e3, 1e3, allow_nan=False)
    deltas = [draw(st.lists(floats, min_size=k, max_size=k)) for _ in range(m)]
    counts = draw(st.lists(st.integers(1, 1000), min_size=m, max_size=m))
    return [ClientUpdate(i, vec(d), n) for i, (d, n) in enumerate(zip(deltas, counts))]


@given(rounds(), st.randoms(use_true_random=False))
def test_aggregate_permutation_invariant(updates, rnd):
    shuffled = list(updates)
    rnd.shuffle(shuffled)
    assert aggregate(shuffled) == aggregate(updates)


@given(rounds(), st.integers(2, 50))
def test_aggregate_scale_invariant_counts(updates, c):
    scaled = [ClientUpdate(u.client_id, u.delta, c * u.sample_count) for u in updates]
    a, b = aggregate(updates).flat, aggregate(scaled).flat
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_fedavgm_reduction_example():
    w = vec([10.0])
    for kind, kw in (("fedavg", {}), ("fedavgm", {"beta": 0.0, "eta": 1.0})):
        new_w, _ = server_step(init_state(kind, w, **kw), w, vec([2.0]))
        assert new_w.flat.tolist() == [8.0]


def test_fedavgm_two_rounds_by_hand():
    w = vec([10.0])
    s = init_state("fedavgm", w, eta=1.0, beta=0.5)
    w, s = server_step(s, w, vec([2.0]))
    assert s.velocity.flat.tolist() == [2.0] and w.flat.tolist() == [8.0]
    w, s = server_step(s, w, vec([0.0]))
    assert s.velocity.flat.tolist() == [1.0] and w.flat.tolist() == [7.0]


def test_fedadagrad_single_step():
    w = vec([0.0])
    s = init_state("fedadagrad", w, eta=1.0, beta=0.0, tau=1e-3)
    new_w, s2 = server_step(s, w, vec([3.0]))
    assert s2.second_moment.flat.tolist() == [9.0]
    assert new_w.flat[0] == pytest.approx(-ADAGRAD_BETA0_STEP, rel=1e-15)
    new_w, s2 = server_step(init_state("fedadagrad", w), w, vec([3.0]))
    assert s2.velocity.flat[0] == pytest.approx(0.3, rel=1e-15)
    assert new_w.flat[0] == pytest.approx(-ADAGRAD_DEFAULT_STEP, rel=1e-15)


@pytest.mark.parametrize("kind", ["fedadam", "fedyogi"])
def test_adam_and_yogi_first_step(kind):
    w = vec([0.0])
    new_w, s = server_step(init_state(kind, w), w, vec([3.0]))
    assert s.second_moment.flat[0] == pytest.approx(0.09, rel=1e-15)
    assert new_w.flat[0] == pytest.approx(-ADAM_DEFAULT_STEP, rel=1e-14)


def test_yogi_second_moment_moves_toward_delta_squared():
    w = vec([0.0, 0.0])
    s = init_state("fedyogi", w)
    s = type(s)(**{**s.__dict__, "second_moment": vec([1.0, 100.0])})
    _, s2 = server_step(s, w, vec([3.0, 3.0]))
    # below 9 grows by (1 - beta2) * 9, above 9 shrinks by the same amount
    assert s2.second_moment.flat.tolist() == pytest.approx([1.09, 99.91], rel=1e-14)


@pytest.mark.parametrize("kind,kw", [
    ("fedavgm", {"beta": 1.0}),
    ("fedavgm", {"beta": -0.1}),
    ("fedavgm", {"eta": 0.0}),
    ("fedadam", {"tau": 0.0}),
    ("fedadam", {"beta2": 1.0}),
])
def test_invalid_hyperparameters(kind, kw):
    with pytest.raises(InvalidHyperparameter):
        init_state(kind, vec([0.0]), **kw)


def test_unknown_kind():
    with pytest.raises(ValueError):
        OptimizerKind.parse("sgd")


def test_shape_mismatch_in_step():
    s = init_state("fedavgm", vec([0.0]), beta=0.5)
    with pytest.raises(ShapeMismatch):
        server_step(s, vec([0.0]), vec([1.0, 2.0]))


@pytest.mark.parametrize("kind", list(OptimizerKind))
def test_zero_gradient_keeps_weights(kind):
    w = two_entry([1.5, -2.0], [0.25])
    new_w, _ = server_step(init_state(kind, w), w, w.zeros_like())
    assert new_w == w


@pytest.mark.parametrize("kind", list(OptimizerKind))
def test_step_is_pure_and_deterministic(kind):
    rng = np.random.default_rng(3)
    w = two_entry(rng.normal(size=4), rng.normal(size=2))
    s = init_state(kind, w, beta=0.5 if kind not in ADAPTIVE else None)
    s = server_step(s, w, w.with_flat(rng.normal(size=6)))[1]
    g = w.with_flat(rng.normal(size=6))
    snapshot = (w.flat.copy(), g.flat.copy(), s.velocity.flat.copy(), s.second_moment.flat.copy())
    a = server_step(s, w, g)
    b = server_step(s, w, g)
    assert a[0] == b[0] and a[1].velocity == b[1].velocity and a[1].second_moment == b[1].second_moment
    for before, after in zip(snapshot, (w.flat, g.flat, s.velocity.flat, s.second_moment.flat)):
        assert np.array_equal(before, after)


@given(st.lists(rounds(max_clients=4, max_len=5), min_size=1, max_size=6))
def test_fedavgm_beta0_eta1_is_fedavg_bitwise(round_seq):
    k = round_seq[0][0].delta.numel
    round_seq = [r for r in round_seq if r[0].delta.numel == k]
    w0 = vec([0.5] * k)
    a, sa = w0, init_state("fedavg", w0)
    b, sb = w0, init_state("fedavgm", w0, eta=1.0, beta=0.0)
    for updates in round_seq:
        g = aggregate(updates)
        a, sa = server_step(sa, a, g)
        b, sb = server_step(sb, b, g)
        assert a.flat.tobytes() == b.flat.tobytes()


def test_weighted_mean():
    assert weighted_mean([1.0, 3.0], [1, 3]) == 2.5
