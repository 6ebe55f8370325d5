import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from riskscope.stl import (
    And,
    Always,
    EmptyWindow,
    Eventually,
    Not,
    Or,
    Predicate,
    Signal,
    StlSyntaxError,
    TrueF,
    UnboundCoordinate,
    Until,
    parse,
    robustness,
    robustness_batch,
)

GOAL = "F[0,10] (5 - max(abs(35 - y[0]), abs(5 - y[1])) > 0)"
TIMES = np.round(np.arange(101) * 0.1, 10)


def constant(point):
    return Signal(TIMES, np.tile(point, (len(TIMES), 1)))


def test_parse_goal_formula():
    phi = parse(GOAL)
    assert isinstance(phi, Eventually)
    assert isinstance(phi.arg, Predicate)


def test_parse_conjunction():
    phi = parse("G[0,2] (y[0] < 1) & F[0,2] (y[1] > 0)")
    assert isinstance(phi, And)
    assert isinstance(phi.left, Always) and isinstance(phi.right, Eventually)


def test_parse_rejects_reversed_interval():
    with pytest.raises(StlSyntaxError):
        parse("F[2,1] (y[0] > 0)")


@pytest.mark.parametrize("text", ["y[0] >", "F[0,1] y[0] > 0 )", "(y[0] > 1", "y[0] = 1", ""])
def test_parse_errors_carry_position(text):
    with pytest.raises(StlSyntaxError) as err:
        parse(text)
    assert err.value.pos >= 0


@pytest.mark.parametrize("text", [
    GOAL,
    "G[0,2] (y[0] < 1) & F[0,2] (y[1] > 0)",
    "!(y[0] > 1) | (y[1] < -2.5)",
    "(y[0] > 0) U[1,3] (y[1] > 2 * y[0] + 1)",
    "G[0,1] F[0.5,2] (min(y[0], -y[1]) > 0)",
    "true & !false",
])
def test_pretty_print_round_trip(text):
    phi = parse(text)
    assert parse(str(phi)) == phi


def test_goal_at_goal_is_five():
    assert robustness(parse(GOAL), constant([35.0, 5.0])) == 5.0


def test_goal_at_edge_is_zero():
    assert robustness(parse(GOAL), constant([30.0, 5.0])) == 0.0


def test_goal_on_linear_signal():
    y = np.stack([4.0 * TIMES, 1.0 * TIMES], axis=1)
    # exhaustive evaluation over all 101 samples gives 2.0
    assert robustness(parse(GOAL), Signal(TIMES, y)) == pytest.approx(2.0, abs=1e-12)


def test_unbound_coordinate():
    with pytest.raises(UnboundCoordinate):
        robustness(parse("y[2] > 0"), constant([0.0, 0.0]))


def test_empty_window():
    with pytest.raises(EmptyWindow):
        robustness(parse("F[20,30] (y[0] > 0)"), constant([0.0, 0.0]))


def test_signal_validation():
    with pytest.raises(ValueError):
        Signal(np.array([0.0, 0.0]), np.zeros((2, 1)))


def test_batch_matches_single():
    r = np.random.default_rng(0)
    vals = r.normal(size=(6, len(TIMES), 2)).cumsum(axis=1)
    phi = parse("G[0,3] (y[0] > -4) & F[1,5] (y[1] < y[0])")
    batch = robustness_batch(phi, TIMES, vals)
    single = [robustness(phi, Signal(TIMES, v)) for v in vals]
    np.testing.assert_allclose(batch, single, rtol=0, atol=0)


# --- randomized semantic identities ---------------------------------------------

ATOMS = ["y[0] > 0.3", "y[1] < y[0]", "abs(y[0] - y[1]) < 1", "max(y[0], y[1]) > -0.5"]
short_times = np.round(np.arange(31) * 0.1, 10)


@st.composite
def formulas(draw, depth=2):
    if depth == 0 or draw(st.booleans()):
        return "(" + draw(st.sampled_from(ATOMS)) + ")"
    op = draw(st.sampled_from(["!", "&", "|", "F", "G", "U"]))
    a = draw(formulas(depth=depth - 1))
    if op == "!":
        return f"!{a}"
    if op in "FG":
        lo = draw(st.sampled_from([0, 0.2, 0.5]))
        return f"{op}[{lo},{lo + draw(st.sampled_from([0.3, 1.0]))}] {a}"
    b = draw(formulas(depth=depth - 1))
    if op == "U":
        return f"({a} U[0,0.8] {b})"
    return f"({a} {op} {b})"


signals = st.integers(0, 2**31).map(
    lambda s: np.random.default_rng(s).normal(scale=0.5, size=(len(short_times), 2)).cumsum(0)
)


@given(formulas(), signals)
def test_negation_flips_sign(text, vals):
    phi = parse(text)
    y = Signal(short_times, vals)
    assert robustness(Not(phi), y) == -robustness(phi, y)


@given(formulas(), formulas(), signals)
def test_and_or_are_min_max(t1, t2, vals):
    p, q = parse(t1), parse(t2)
    y = Signal(short_times, vals)
    rp, rq = robustness(p, y), robustness(q, y)
    assert robustness(And(p, q), y) == min(rp, rq)
    assert robustness(Or(p, q), y) == max(rp, rq)


@given(formulas(depth=1), signals)
def test_eventually_is_until_with_true(text, vals):
    phi = parse(text)
    y = Signal(short_times, vals)
    assert robustness(Eventually(0.2, 1.0, phi), y) == robustness(Until(0.2, 1.0, TrueF(), phi), y)


@given(signals, st.floats(0.0, 3.0))
def test_less_than_predicate_is_antitone(vals, shift):
    phi = parse("G[0,2] (y[0] < 1)")
    lo = robustness(phi, Signal(short_times, vals))
    hi = robustness(phi, Signal(short_times, vals + np.array([shift, 0.0])))
    assert hi <= lo
