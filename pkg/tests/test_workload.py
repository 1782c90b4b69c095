import numpy as np
import pytest

from tierkv.workload import (Request, assign_poisson_arrivals, load_workload,
                             make_requests)


def test_request_validation():
    with pytest.raises(ValueError):
        Request("r", 0, 8)
    with pytest.raises(ValueError):
        Request("r", 8, 0)
    with pytest.raises(ValueError):
        Request("r", 8, 8, arrival_time_s=-1.0)


def test_request_page_math():
    r = Request("r", 33, 10)
    assert r.prompt_pages(16) == 3
    assert r.max_total_pages(16) == 3  # 43 tokens
    assert Request("r2", 16, 17).max_total_pages(16) == 3


def test_make_requests_fixed():
    reqs = make_requests(3, 128, 16, seed=0)
    assert [r.id for r in reqs] == ["r0000", "r0001", "r0002"]
    assert all(r.prompt_tokens == 128 and r.max_output_tokens == 16
               for r in reqs)
    assert all(r.arrival_time_s == 0.0 for r in reqs)


def test_make_requests_ranges_reproducible():
    a = make_requests(20, (64, 256), (8, 32), seed=5)
    b = make_requests(20, (64, 256), (8, 32), seed=5)
    assert [(r.prompt_tokens, r.max_output_tokens) for r in a] == \
           [(r.prompt_tokens, r.max_output_tokens) for r in b]
    assert all(64 <= r.prompt_tokens <= 256 for r in a)
    assert all(8 <= r.max_output_tokens <= 32 for r in a)
    assert len({r.prompt_tokens for r in a}) > 1


def test_poisson_arrivals_sorted_and_seeded():
    reqs = make_requests(50, 64, 8, seed=1)
    a = assign_poisson_arrivals(reqs, 10.0, seed=2)
    b = assign_poisson_arrivals(reqs, 10.0, seed=2)
    times = [r.arrival_time_s for r in a]
    assert times == sorted(times)
    assert times[0] > 0.0
    assert times == [r.arrival_time_s for r in b]
    # mean gap should be in the vicinity of 1/rate
    gaps = np.diff([0.0] + times)
    assert 0.05 < gaps.mean() < 0.2


def test_load_workload(tmp_path):
    path = tmp_path / "w.txt"
    path.write_text("# prompt output [arrival]\n128 16\n256 32 1.5\n")
    reqs = load_workload(path)
    assert len(reqs) == 2
    assert reqs[0].prompt_tokens == 128 and reqs[0].arrival_time_s == 0.0
    assert reqs[1].arrival_time_s == 1.5
