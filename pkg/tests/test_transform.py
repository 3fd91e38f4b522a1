"""Transform tests: forward/reverse identity, scale errors, regrouping."""

from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from simbridge import envelope as ev
from simbridge.transform import (
    Regrouper, TransformError, TransformRule, forward, forward_request,
    identity_rule, regroup, reverse, reverse_response, rule_from_document,
    rule_to_document,
)


def stream_env(seq, kind=ev.STREAM_DATA, payload=None):
    header = ev.EnvelopeHeader(
        message_id=f"m{seq}", request_id="r1", sim_type="st", kind=kind,
        source_id="agent", seq=seq, issued_at=0)
    return ev.Envelope(header=header, payload=payload or {"v": float(seq)})


class TestForward:
    def test_empty_rule_is_identity(self):
        payload = {"temp": 20.0, "time": 1.5}
        assert forward(identity_rule(), payload) == payload

    def test_rename_and_scale(self):
        rule = TransformRule(sim_type="st", renames=(("temp", "temperature"),),
                             scales=(("time", 1000.0),))
        out = forward(rule, {"temp": 20.0, "time": 1.5})
        assert out == {"temperature": 20.0, "time": 1500.0}

    def test_untouched_fields_pass_through(self):
        rule = TransformRule(sim_type="st", renames=(("a", "b"),))
        out = forward(rule, {"a": 1, "other": "keep"})
        assert out == {"b": 1, "other": "keep"}

    def test_absent_fields_skipped(self):
        rule = TransformRule(sim_type="st", renames=(("missing", "x"),),
                             scales=(("also-missing", 2.0),))
        assert forward(rule, {"y": 3.0}) == {"y": 3.0}

    def test_scale_on_string_raises(self):
        rule = TransformRule(sim_type="st", scales=(("time", 1000.0),))
        with pytest.raises(TransformError, match="time"):
            forward(rule, {"time": "soon"})

    def test_rename_collision_raises(self):
        rule = TransformRule(sim_type="st", renames=(("a", "b"),))
        with pytest.raises(TransformError, match="b"):
            forward(rule, {"a": 1, "b": 2})

    def test_swap_renames(self):
        rule = TransformRule(sim_type="st", renames=(("a", "b"), ("b", "a")))
        assert forward(rule, {"a": 1, "b": 2}) == {"a": 2, "b": 1}


class TestReverse:
    def test_exact_inverse_for_dyadic_factors(self):
        rule = TransformRule(sim_type="st", renames=(("t", "time"),),
                             scales=(("t", 1024.0),))
        payload = {"t": 1.5, "other": 7}
        assert reverse(rule, forward(rule, payload)) == payload

    def test_division_example(self):
        rule = TransformRule(sim_type="st", scales=(("time", 1000.0),))
        assert reverse(rule, {"time": 1500.0}) == {"time": 1.5}

    def test_roundtrip_1000_random_pairs(self):
        rng = random.Random(42)
        for _ in range(1000):
            n_renames = rng.randint(0, 3)
            dt_names = [f"f{i}" for i in range(6)]
            rng.shuffle(dt_names)
            renames = tuple((dt_names[i], f"agent_{dt_names[i]}") for i in range(n_renames))
            dyadic = rng.random() < 0.5
            scales = []
            for name in dt_names[: rng.randint(0, 3)]:
                factor = 2.0 ** rng.randint(-8, 8) if dyadic else rng.uniform(0.25, 64.0)
                scales.append((name, factor))
            rule = TransformRule(sim_type="st", renames=renames, scales=tuple(scales))
            payload = {name: rng.uniform(-1e4, 1e4) for name in dt_names[: rng.randint(0, 6)]}
            back = reverse(rule, forward(rule, payload))
            assert set(back) == set(payload)
            for key, value in payload.items():
                if dyadic:
                    assert back[key] == value
                else:
                    assert back[key] == pytest.approx(value, abs=math.ulp(value) * 2)

    # Scaled values must stay in the normal double range: subnormal
    # intermediates round and break dyadic exactness.
    _normal_floats = st.floats(-1e6, 1e6, allow_nan=False).filter(
        lambda x: x == 0.0 or abs(x) > 1e-6)

    @settings(max_examples=200, deadline=None)
    @given(st.dictionaries(st.sampled_from("abcdef"), _normal_floats, max_size=6),
           st.integers(-10, 10))
    def test_dyadic_roundtrip_property(self, payload, exponent):
        rule = TransformRule(sim_type="st", renames=(("a", "alpha"), ("b", "beta")),
                             scales=(("a", 2.0 ** exponent), ("c", 0.5)))
        assert reverse(rule, forward(rule, payload)) == payload


class TestRuleValidation:
    def test_zero_factor_rejected(self):
        with pytest.raises(ValueError, match="non-zero"):
            TransformRule(sim_type="st", scales=(("x", 0.0),))

    def test_non_bijective_renames_rejected(self):
        with pytest.raises(ValueError, match="bijection"):
            TransformRule(sim_type="st", renames=(("a", "x"), ("b", "x")))
        with pytest.raises(ValueError, match="bijection"):
            TransformRule(sim_type="st", renames=(("a", "x"), ("a", "y")))

    def test_composite_size_iff_composite(self):
        with pytest.raises(ValueError, match="composite_size"):
            TransformRule(sim_type="st", granularity="composite")
        with pytest.raises(ValueError, match="composite_size"):
            TransformRule(sim_type="st", composite_size=3)

    def test_document_roundtrip(self):
        rule = TransformRule(sim_type="st", renames=(("a", "b"),),
                             scales=(("t", 1000.0),),
                             granularity="composite", composite_size=3)
        assert rule_from_document("st", rule_to_document(rule)) == rule


class TestRegroup:
    def test_atomic_is_identity(self):
        stream = [stream_env(i) for i in range(1, 6)]
        stream.append(stream_env(6, kind=ev.STREAM_END, payload={"final": True}))
        rule = identity_rule("st")
        assert regroup(rule, stream) == stream

    def test_composite_groups_of_three_with_partial(self):
        rule = TransformRule(sim_type="st", granularity="composite", composite_size=3)
        stream = [stream_env(i) for i in range(1, 8)]
        stream.append(stream_env(8, kind=ev.STREAM_END, payload={"final": True}))
        out = regroup(rule, stream)
        kinds = [e.header.kind for e in out]
        assert kinds == [ev.STREAM_DATA] * 3 + [ev.STREAM_END]
        assert [e.header.seq for e in out] == [3, 6, 7, 8]
        assert [len(e.payload["samples"]) for e in out[:-1]] == [3, 3, 1]

    def test_composite_exact_multiple_end_carries_no_data(self):
        rule = TransformRule(sim_type="st", granularity="composite", composite_size=3)
        stream = [stream_env(i) for i in range(1, 7)]
        end = stream_env(7, kind=ev.STREAM_END, payload={"final": True})
        out = regroup(rule, stream + [end])
        assert [e.header.seq for e in out] == [3, 6, 7]
        assert out[-1] is end

    def test_value_count_and_order_preserved(self):
        rng = random.Random(7)
        for _ in range(50):
            k = rng.randint(1, 5)
            n = rng.randint(0, 20)
            rule = TransformRule(sim_type="st", granularity="composite", composite_size=k)
            stream = [stream_env(i, payload={"v": float(i)}) for i in range(1, n + 1)]
            stream.append(stream_env(n + 1, kind=ev.STREAM_END, payload={"final": True}))
            out = regroup(rule, stream)
            values = []
            for env in out:
                if env.header.kind == ev.STREAM_END:
                    continue
                values.extend(p["v"] for p in env.payload["samples"])
            assert values == [float(i) for i in range(1, n + 1)]

    def test_strictly_increasing_seq_required(self):
        rule = identity_rule("st")
        with pytest.raises(ValueError, match="strictly increasing"):
            regroup(rule, [stream_env(2), stream_env(2)])

    def test_incremental_regrouper(self):
        rule = TransformRule(sim_type="st", granularity="composite", composite_size=2)
        grouper = Regrouper(rule)
        assert grouper.offer(stream_env(1)) == []
        out = grouper.offer(stream_env(2))
        assert len(out) == 1 and out[0].header.seq == 2


class TestPayloadHelpers:
    def test_forward_request_touches_inputs_and_outputs(self):
        rule = TransformRule(sim_type="st", renames=(("temp", "temperature"),),
                             scales=(("time", 1000.0),))
        payload = {"model": "m", "mode": "batch", "model_params": {},
                   "inputs": {"temp": 20.0, "time": 1.5}, "outputs": ["temp", "other"]}
        out = forward_request(rule, payload)
        assert out["inputs"] == {"temperature": 20.0, "time": 1500.0}
        assert out["outputs"] == ["temperature", "other"]
        assert out["model"] == "m"

    def test_reverse_response_touches_values(self):
        rule = TransformRule(sim_type="st", renames=(("temp", "temperature"),),
                             scales=(("time", 1000.0),))
        payload = {"request_id": "r", "status": "ok", "final": True,
                   "values": {"temperature": 20.0, "time": 1500.0}}
        out = reverse_response(rule, payload)
        assert out["values"] == {"temp": 20.0, "time": 1.5}

    def test_request_response_composition_is_identity(self):
        rule = TransformRule(sim_type="st", renames=(("t", "time"),),
                             scales=(("t", 8.0),))
        inputs = {"t": 2.5, "x0": 1.0}
        request = {"inputs": dict(inputs), "outputs": ["t"]}
        forwarded = forward_request(rule, request)
        response = {"values": dict(forwarded["inputs"])}
        back = reverse_response(rule, response)
        assert back["values"] == inputs
