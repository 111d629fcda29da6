"""Exactness and formatting of the currency layer."""

from fractions import Fraction

import pytest

from iotmarket.currency import ZERO, fmt_money, money


def test_money_accepts_int_str_fraction():
    assert money(3) == Fraction(3)
    assert money("0.02") == Fraction(1, 50)
    assert money("10") == Fraction(10)
    assert money(Fraction(7, 4)) == Fraction(7, 4)
    assert money("1/3") == Fraction(1, 3)


def test_money_rejects_float_and_bool():
    with pytest.raises(TypeError):
        money(0.02)
    with pytest.raises(TypeError):
        money(True)
    with pytest.raises(ValueError):
        money("not-a-number")
    with pytest.raises(TypeError):
        money(None)


def test_money_is_exact_not_binary():
    # 0.1 + 0.2 == 0.3 only in exact arithmetic
    assert money("0.1") + money("0.2") == money("0.3")
    assert money("0.02") * 1488 == money("29.76")


def test_fmt_money_decimal_forms():
    assert fmt_money(money("29.76")) == "29.76"
    assert fmt_money(money("0.02")) == "0.02"
    assert fmt_money(money("2")) == "2"
    assert fmt_money(ZERO) == "0"
    assert fmt_money(money("-0.1")) == "-0.1"
    assert fmt_money(Fraction(1, 8)) == "0.125"
    assert fmt_money(Fraction(1, 5)) == "0.2"


def test_fmt_money_non_decimal_denominator_falls_back():
    assert fmt_money(Fraction(1, 3)) == "1/3"
    assert fmt_money(Fraction(-5, 7)) == "-5/7"


def test_fmt_money_round_trips_through_money():
    values = [
        Fraction(0),
        Fraction(1, 50),
        Fraction(2976, 100),
        Fraction(-21, 10),
        Fraction(1, 3),
        Fraction(12345, 16),
        Fraction(7, 10**9),
    ]
    for v in values:
        assert money(fmt_money(v)) == v
