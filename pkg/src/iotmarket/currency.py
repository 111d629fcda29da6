"""Exact currency arithmetic.

All monetary amounts in the simulator are `fractions.Fraction` values so that
settlement invoices, deposits, fees and the global conservation audit come out
exact, with no float drift. Floats are rejected at the boundary: scenario
files carry money as decimal strings.
"""

from __future__ import annotations

from fractions import Fraction

Money = Fraction

ZERO = Fraction(0)


def money(value: int | str | Fraction) -> Fraction:
    """Parse a currency amount. Accepts ints, Fractions and decimal strings ("0.02")."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("bool is not a currency amount")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        try:
            return Fraction(value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"not a currency amount: {value!r}") from exc
    if isinstance(value, float):
        raise TypeError(f"float {value!r} is not exact; pass a decimal string instead")
    raise TypeError(f"cannot interpret {type(value).__name__} as currency")


def fmt_money(amount: Fraction) -> str:
    """Render an amount as an exact decimal string when the denominator allows it.

    Amounts whose reduced denominator has prime factors other than 2 and 5
    (which never arise from decimal-string inputs) fall back to "p/q" form.
    """
    num, den = amount.numerator, amount.denominator
    if den == 1:
        return str(num)
    twos = fives = 0
    d = den
    while d % 2 == 0:
        d //= 2
        twos += 1
    while d % 5 == 0:
        d //= 5
        fives += 1
    if d != 1:
        return f"{num}/{den}"
    digits = max(twos, fives)
    scaled = num * 10**digits // den
    sign = "-" if scaled < 0 else ""
    text = str(abs(scaled)).rjust(digits + 1, "0")
    whole, frac = text[:-digits], text[-digits:]
    return f"{sign}{whole}.{frac}"
