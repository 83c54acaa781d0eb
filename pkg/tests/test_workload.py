import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdsim.cli import bundled_path
from pdsim.core import ConfigError, ContractViolation, IngestionError, ValidationError
from pdsim.workload import (
    LengthDist,
    PhasedSpec,
    PoissonSegment,
    PoissonSpec,
    TraceSpec,
    generate,
    load_trace,
    lognormal_params,
    sample_lengths,
    summarize,
    workload_from_dict,
    workload_to_dict,
    write_trace,
)

# dataset length statistics (mean, std) for prompts and outputs
SHAREGPT = {"input": (280.27, 375.58), "output": (190.90, 209.15)}
LMSYS = {"input": (78.40, 133.29), "output": (174.57, 166.13)}


@pytest.mark.parametrize("mean, std", [SHAREGPT["input"], LMSYS["input"]])
def test_lognormal_params_closed_form(mean, std):
    mu, sigma = lognormal_params(mean, std)
    # moments of the fitted lognormal
    assert math.exp(mu + sigma**2 / 2) == pytest.approx(mean, rel=1e-12)
    assert math.sqrt((math.exp(sigma**2) - 1) * math.exp(2 * mu + sigma**2)) == pytest.approx(std, rel=1e-12)


@pytest.mark.parametrize("mean, std", [SHAREGPT["input"], LMSYS["input"]])
def test_lognormal_params_monte_carlo(mean, std):
    mu, sigma = lognormal_params(mean, std)
    draws = np.random.default_rng(1).lognormal(mu, sigma, size=1_000_000)
    assert draws.mean() == pytest.approx(mean, rel=0.02)
    assert draws.std() == pytest.approx(std, rel=0.02)


def test_lognormal_params_degenerate_spike():
    mu, sigma = lognormal_params(512.0, 0.0)
    assert sigma == 0.0
    assert mu == pytest.approx(math.log(512.0))


def test_lognormal_params_rejects_non_positive_mean():
    with pytest.raises(ContractViolation):
        lognormal_params(0.0, 1.0)


def test_poisson_count_within_three_sigma():
    seg = PoissonSegment(10, 100, LengthDist.fixed(10), LengthDist.fixed(10))
    counts = [len(generate(PoissonSpec(seg, seed))) for seed in range(5)]
    assert all(abs(c - 1000) <= 3 * math.sqrt(1000) for c in counts)


def test_fixed_lengths_identical():
    reqs = generate(PoissonSpec(PoissonSegment(20, 10, LengthDist.fixed(512), LengthDist.fixed(128)), 0))
    assert reqs and {(r.input_len, r.output_len) for r in reqs} == {(512, 128)}


def test_generate_is_seeded():
    seg = PoissonSegment(10, 30, LengthDist.lognormal(*SHAREGPT["input"]), LengthDist.lognormal(*SHAREGPT["output"]))
    assert generate(PoissonSpec(seg, 7)) == generate(PoissonSpec(seg, 7))
    assert generate(PoissonSpec(seg, 7)) != generate(PoissonSpec(seg, 8))


def test_ids_dense_and_arrivals_sorted():
    reqs = generate(PoissonSpec(PoissonSegment(50, 20, LengthDist.fixed(1), LengthDist.fixed(1)), 3))
    assert [r.id for r in reqs] == list(range(len(reqs)))
    assert all(a.arrival_ms <= b.arrival_ms for a, b in zip(reqs, reqs[1:]))


@given(st.floats(5, 500), st.floats(0, 1000), st.floats(0, 1), st.floats(1, 3), st.integers(0, 2**32 - 1))
def test_truncated_lengths_within_bounds(mean, std, lo_frac, hi_mult, seed):
    dist = LengthDist.lognormal(mean, std, max(1, int(mean * lo_frac)), int(mean * hi_mult) + 1)
    x = sample_lengths(dist, 200, np.random.default_rng(seed))
    assert x.min() >= dist.min and x.max() <= dist.max


def test_truncation_window_without_mass_rejected():
    with pytest.raises(ValidationError, match="no mass"):
        LengthDist.lognormal(5, 0, 50, 100)
    with pytest.raises(ValidationError, match="no mass"):
        LengthDist.lognormal(10, 1, 5000, 6000)


def test_phased_ratio_alternates():
    long_in = PoissonSegment(10, 300, LengthDist.lognormal(2000, 1000, 64, 8192), LengthDist.lognormal(16, 8, 1, 64))
    long_out = PoissonSegment(10, 300, LengthDist.lognormal(64, 32, 1, 256), LengthDist.lognormal(400, 200, 16, 2048))
    spec = PhasedSpec((long_in, long_out, long_in, long_out), seed=2)
    reqs = generate(spec)
    ratios = []
    for a, b in spec.boundaries_ms():
        seg = [r for r in reqs if a <= r.arrival_ms < b]
        ratios.append(sum(r.input_len for r in seg) / sum(r.output_len for r in seg))
    assert ratios[0] > 1 > ratios[1] and ratios[2] > 1 > ratios[3]


def test_phased_segments_are_contiguous():
    seg = PoissonSegment(30, 5, LengthDist.fixed(1), LengthDist.fixed(1))
    spec = PhasedSpec((seg,) * 4, seed=0)
    reqs = generate(spec)
    bounds = spec.boundaries_ms()
    assert bounds[0][0] == 0 and all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))
    assert all(a.arrival_ms <= b.arrival_ms for a, b in zip(reqs, reqs[1:]))
    for a, b in bounds:
        assert any(a <= r.arrival_ms < b for r in reqs)
    assert reqs[-1].arrival_ms < bounds[-1][1]


# ------------------------------------------------------------------ traces


def _write(tmp_path, lines):
    path = tmp_path / "trace.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_load_trace_three_lines(tmp_path):
    path = _write(tmp_path, [
        '{"arrival_ms": 0, "input_len": 10, "output_len": 2}',
        '{"arrival_ms": 5.5, "input_len": 20, "output_len": 3}',
        '{"arrival_ms": 9, "input_len": 30, "output_len": 4}',
    ])
    reqs = load_trace(path)
    assert [(r.id, r.arrival_ms, r.input_len) for r in reqs] == [(0, 0.0, 10), (1, 5.5, 20), (2, 9.0, 30)]


def test_load_trace_rejects_zero_output(tmp_path):
    path = _write(tmp_path, ['{"arrival_ms": 0, "input_len": 10, "output_len": 2}',
                             '{"arrival_ms": 1, "input_len": 10, "output_len": 0}'])
    with pytest.raises(IngestionError, match=":2:"):
        load_trace(path)


def test_load_trace_sorts_unsorted(tmp_path):
    path = _write(tmp_path, ['{"id": 4, "arrival_ms": 30, "input_len": 1, "output_len": 1}',
                             '{"id": 9, "arrival_ms": 10, "input_len": 2, "output_len": 1}'])
    assert [r.id for r in load_trace(path)] == [9, 4]


@pytest.mark.parametrize("line", ["not json", "[1, 2]", '{"arrival_ms": 0, "input_len": 1.5, "output_len": 1}',
                                  '{"arrival_ms": 0, "output_len": 1}'])
def test_load_trace_malformed_line(tmp_path, line):
    path = _write(tmp_path, ['{"arrival_ms": 0, "input_len": 1, "output_len": 1}', line])
    with pytest.raises(IngestionError, match=":2:"):
        load_trace(path)


def test_load_trace_missing_file(tmp_path):
    with pytest.raises(IngestionError):
        load_trace(tmp_path / "absent.jsonl")


def test_trace_roundtrip(tmp_path):
    reqs = generate(PoissonSpec(PoissonSegment(10, 10, LengthDist.lognormal(100, 50), LengthDist.fixed(5)), 1))
    write_trace(reqs, tmp_path / "t.jsonl")
    assert load_trace(tmp_path / "t.jsonl") == reqs
    assert generate(TraceSpec(str(tmp_path / "t.jsonl"))) == reqs


# ------------------------------------------------------------ JSON specs


@pytest.mark.parametrize("name, stats", [("sharegpt_like", SHAREGPT), ("lmsys_like", LMSYS)])
def test_bundled_specs_carry_dataset_statistics(name, stats):
    doc = json.loads(bundled_path(f"{name}.json").read_text())
    for side in ("input", "output"):
        assert (doc[side]["mean"], doc[side]["std"]) == stats[side]
    spec = workload_from_dict(doc)
    assert isinstance(spec, PoissonSpec)


def test_spec_dict_roundtrip():
    doc = json.loads(bundled_path("sharegpt_like.json").read_text())
    spec = workload_from_dict(doc)
    assert workload_from_dict(workload_to_dict(spec)) == spec


@pytest.mark.parametrize(
    "doc, path",
    [
        ({"kind": "bogus"}, "workload.kind"),
        ({"kind": "poisson", "rps": 1, "duration_s": 1, "input": {"family": "fixed", "value": 1}}, "workload.output"),
        ({"kind": "poisson", "rps": -1, "duration_s": 1, "input": {"family": "fixed", "value": 1},
          "output": {"family": "fixed", "value": 1}}, "workload"),
        ({"kind": "phased", "segments": []}, "workload.segments"),
        ({"kind": "poisson", "rps": 1, "duration_s": 1, "input": {"family": "lognormal", "mean": 5},
          "output": {"family": "fixed", "value": 1}}, "workload.input.std"),
    ],
)
def test_spec_errors_name_the_field(doc, path):
    with pytest.raises(ConfigError) as info:
        workload_from_dict(doc)
    assert info.value.path == path


def test_summarize():
    reqs = generate(PoissonSpec(PoissonSegment(20, 10, LengthDist.fixed(7), LengthDist.fixed(3)), 0))
    s = summarize(reqs)
    assert (s["count"], s["input_mean"], s["input_std"], s["output_mean"]) == (len(reqs), 7.0, 0.0, 3.0)
    assert summarize([])["count"] == 0
