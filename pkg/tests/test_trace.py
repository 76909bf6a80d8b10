import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_trace
from visreflect.errors import TraceParseError, TraceValidationError
from visreflect.trace import (
    OTHER_ID,
    AttentionStep,
    AttentionTrace,
    DistributionPair,
    ReasoningSample,
    TokenPartition,
    read_samples,
    read_trace,
    sample_to_jsonl,
    write_trace,
)


def minimal_doc(**overrides):
    doc = {
        "sample_id": "s1",
        "layer_ids": [27],
        "partition": {"visual_span": [0, 2], "question_span": [2, 6], "response_start": 6, "response_len": 5},
        "steps": [{"n": 1, "attn": [[0.25, 0.5]], "dist_pair": None}],
    }
    doc.update(overrides)
    return doc


def test_minimal_document_reads():
    trace = read_trace(json.dumps(minimal_doc()).encode())
    assert trace.response_len == 5
    assert trace.num_layers_recorded == 1
    assert trace.steps[0].attn == ((0.25, 0.5),)


def test_weight_out_of_range():
    doc = minimal_doc(steps=[{"n": 1, "attn": [[1.3, 0.5]], "dist_pair": None}])
    with pytest.raises(TraceValidationError, match=r"weight out of \[0,1\]") as info:
        read_trace(json.dumps(doc))
    assert info.value.field == "steps[0].attn[0]"


def test_steps_must_increase():
    doc = minimal_doc(
        steps=[{"n": 3, "attn": [[0.1, 0.1]], "dist_pair": None}, {"n": 2, "attn": [[0.1, 0.1]], "dist_pair": None}]
    )
    with pytest.raises(TraceValidationError, match="steps not strictly increasing"):
        read_trace(json.dumps(doc))


def test_malformed_json_reports_byte_offset():
    text = '{"sample_id": "é", "layer_ids": [1,, 2]}'
    with pytest.raises(TraceParseError) as info:
        read_trace(text.encode())
    # the error sits after a two-byte character
    assert info.value.offset == text.index(",,") + 1 + 1


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda d: d.pop("layer_ids"), "layer_ids"),
        (lambda d: d["partition"].update(response_len=0), "partition.response_len"),
        (lambda d: d["partition"].update(visual_span=[0, 3]), "partition"),
        (lambda d: d["partition"].update(question_span=[2, 9]), "partition.question_span"),
        (lambda d: d.update(layer_ids=[5, 5]), "layer_ids"),
        (lambda d: d["steps"][0].update(n=6), "steps[0].n"),
        (lambda d: d["steps"][0].update(n=0), "steps[0].n"),
        (lambda d: d["steps"][0].update(attn=[[0.1]]), "steps[0].attn[0]"),
        (lambda d: d["steps"][0].update(attn=[[0.1, 0.1], [0.1, 0.1]]), "steps[0].attn"),
        (lambda d: d["steps"][0].update(attn=[[0.1, True]]), "steps[0].attn[0]"),
        (
            lambda d: d["steps"][0].update(
                dist_pair={"support_ids": [1, 2], "with_visual": [0.5, 0.5], "without_visual": [0.5, 0.5]}
            ),
            "steps[0].dist_pair.support_ids",
        ),
        (
            lambda d: d["steps"][0].update(
                dist_pair={"support_ids": [1, -1], "with_visual": [0.5, 0.6], "without_visual": [0.5, 0.5]}
            ),
            "steps[0].dist_pair.with_visual",
        ),
        (
            lambda d: d["steps"][0].update(
                dist_pair={"support_ids": [1, -1], "with_visual": [0.5, 0.5], "without_visual": [1.5, -0.5]}
            ),
            "steps[0].dist_pair.without_visual",
        ),
    ],
)
def test_validation_names_the_field(mutate, field):
    doc = minimal_doc()
    mutate(doc)
    with pytest.raises(TraceValidationError) as info:
        read_trace(json.dumps(doc))
    assert info.value.field == field


def test_partition_allows_empty_question_span():
    TokenPartition((0, 4), (4, 4), 4, 1)


def test_distribution_pair_other_bucket_required_once():
    with pytest.raises(TraceValidationError):
        DistributionPair((OTHER_ID, OTHER_ID), (0.5, 0.5), (0.5, 0.5))
    pair = DistributionPair((7, OTHER_ID), (0.75, 0.25), (1.0, 0.0))
    assert pair.other_index == 1


def test_sparse_steps_round_trip():
    steps = tuple(AttentionStep(n, ((0.1, 0.2),)) for n in (1, 50, 300))
    trace = AttentionTrace("sparse", (27,), TokenPartition((0, 2), (2, 6), 6, 300), steps)
    back = read_trace(write_trace(trace))
    assert [s.n for s in back.steps] == [1, 50, 300]
    assert back == trace


def test_other_bucket_probabilities_survive_exactly():
    probs = (0.1234567890123456789, 0.3, 1 - 0.1234567890123456789 - 0.3)
    pair = DistributionPair((11, 12, OTHER_ID), probs, (1 / 3, 1 / 3, 1 / 3))
    trace = AttentionTrace("other", (27,), TokenPartition((0, 2), (2, 6), 6, 5), (AttentionStep(1, ((0.25, 0.5),), pair),))
    back = read_trace(write_trace(trace))
    assert back.steps[0].dist_pair.with_visual == probs
    assert back == trace


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_identity(seed):
    trace = random_trace(np.random.default_rng(seed), max_len=60)
    assert read_trace(write_trace(trace)) == trace


def test_metadata_round_trips():
    doc = minimal_doc(metadata={"profile": {"spike_positions": [3, 4]}, "noise": 0.0})
    trace = read_trace(json.dumps(doc))
    assert read_trace(write_trace(trace)).metadata == doc["metadata"]


def test_reasoning_sample_jsonl_round_trip():
    s = ReasoningSample(
        "id1", "img.png", "Q?", "Let's check the image again. \\boxed{B}", "B", "B", 2,
        ({"round": 1, "role": "requester", "text": "x"},), {"llm_model": "m"},
    )
    line = sample_to_jsonl(s)
    assert line.endswith("\n") and line.count("\n") == 1
    assert list(json.loads(line)) == [
        "sample_id", "image_ref", "question", "reasoning", "final_answer",
        "ground_truth", "rounds", "transcript", "provenance",
    ]
    assert read_samples([line]) == [s]
