"""Hypothesis strategies for canonical observations of all six kinds."""

from __future__ import annotations

from datetime import datetime, timezone

from hypothesis import strategies as st

from blockiot.core import (
    KINDS,
    CanonicalObservation,
    Code,
    ContentAddress,
    DeviceIdentity,
    EventState,
    Scalar,
    String,
    Vector,
    VectorComponent,
    Waveform,
)

UNITS = ["mg/dL", "mm[Hg]", "kg", "Cel", "/min", "%", "L", "L/min", "U"]

labels = st.text("abcdefghijklmnopqrstuvwxyz-", min_size=1, max_size=10)
idents = st.text("ABCDEFGHJKLMNPQRSTUVWXYZ0123456789", min_size=1, max_size=6)
magnitudes = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)
free_text = st.text(st.characters(blacklist_categories=("Cs", "Cc")), min_size=1, max_size=20)

times = st.datetimes(
    min_value=datetime(2000, 1, 1), max_value=datetime(2035, 12, 31)
).map(lambda d: d.replace(microsecond=(d.microsecond // 1000) * 1000, tzinfo=timezone.utc))


def values(kind: str):
    if kind == "scalar":
        return st.builds(Scalar, magnitudes, st.sampled_from(UNITS))
    if kind == "vector":
        comps = st.lists(st.builds(VectorComponent, labels, magnitudes, st.sampled_from(UNITS)), min_size=2, max_size=4, unique_by=lambda c: c.label)
        return comps.map(lambda cs: Vector(tuple(cs)))
    if kind == "code":
        return st.builds(Code, st.text("ABCDEFGHIJKLMNOPQRSTUVWXYZ_", min_size=1, max_size=12))
    if kind == "event_state":
        return st.builds(EventState, st.text("abcdefghijklmnopqrstuvwxyz_", min_size=1, max_size=16), st.booleans())
    if kind == "waveform":
        return st.builds(
            Waveform,
            st.floats(min_value=0.5, max_value=2000, allow_nan=False),
            st.lists(magnitudes, min_size=1, max_size=16).map(tuple),
            st.lists(st.sampled_from("pqrst"), max_size=5, unique=True).map(tuple),
        )
    return st.builds(String, free_text)


@st.composite
def observations(draw, kind: str | None = None):
    kind = kind or draw(st.sampled_from(KINDS))
    return CanonicalObservation(
        subject=draw(st.binary(min_size=32, max_size=32)),
        device=DeviceIdentity(draw(idents), draw(idents), draw(st.integers(0, 2**31 - 1))),
        effective_time=draw(times),
        kind=kind,
        value=draw(values(kind)),
        code_binding=draw(labels),
        provenance=ContentAddress(draw(st.binary(min_size=32, max_size=32))),
        flags=(),
    )
