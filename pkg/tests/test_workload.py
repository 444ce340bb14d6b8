import itertools
from collections import Counter

import pytest

from iovsim.workload import (
    PRESETS, WorkloadError, WorkloadSpec, block_pattern, gen_requests, preset,
)


def take(it, n):
    return list(itertools.islice(it, n))


def test_eight_presets():
    assert len(PRESETS) == 8
    for name, spec in PRESETS.items():
        assert spec.label == name


def test_sequential_wraps():
    spec = WorkloadSpec(rw="read")
    got = [v for _, v, _ in take(gen_requests(spec, 0, 10, 4096), 11)]
    assert got == list(range(10)) + [0]


def test_sequential_jobs_spread():
    spec = WorkloadSpec(rw="write", numjobs=4)
    starts = [next(gen_requests(spec, 0, 100, 4096, job=j))[1] for j in range(4)]
    assert starts == [0, 25, 50, 75]
    assert next(gen_requests(spec, 0, 100, 4096))[0] == "write"


def test_random_deterministic_and_independent():
    spec = WorkloadSpec(seed=7)
    a = take(gen_requests(spec, 0, 1 << 20, 4096), 50)
    assert a == take(gen_requests(spec, 0, 1 << 20, 4096), 50)
    assert a != take(gen_requests(spec, 1, 1 << 20, 4096), 50)
    assert a != take(gen_requests(spec.with_(seed=8), 0, 1 << 20, 4096), 50)


def test_large_blocks_aligned():
    spec = preset("seqread-128k-4-128").with_(rw="randread")
    for _, vlba, n in take(gen_requests(spec, 0, 1000, 4096), 200):
        assert n == 32 and vlba % 32 == 0 and vlba + n <= 1000


def test_uniformity_chi_square():
    blocks = 2_621_440
    bins = 64
    draws = 100_000
    counts = Counter(v * bins // blocks
                     for _, v, _ in take(gen_requests(WorkloadSpec(seed=3), 0, blocks, 4096), draws))
    exp = draws / bins
    chi2 = sum((counts[b] - exp) ** 2 / exp for b in range(bins))
    assert chi2 < 110  # 63 dof, p ~ 1e-4


def test_bs_exceeds_capacity():
    with pytest.raises(WorkloadError):
        next(gen_requests(WorkloadSpec(bs=8192), 0, 1, 4096))
    with pytest.raises(WorkloadError):
        next(gen_requests(WorkloadSpec(bs=1000), 0, 10, 4096))


def test_spec_validation():
    with pytest.raises(WorkloadError):
        WorkloadSpec(rw="trim")
    with pytest.raises(WorkloadError):
        WorkloadSpec(total_ops=None)
    with pytest.raises(WorkloadError):
        WorkloadSpec(duration_ns=1e6)
    spec = WorkloadSpec.from_dict({"duration_ns": 1e6})
    assert spec.total_ops is None
    with pytest.raises(WorkloadError):
        WorkloadSpec.from_dict({"bogus": 1})
    with pytest.raises(WorkloadError):
        preset("nope")
    assert WorkloadSpec.from_dict(PRESETS["randwrite-4k-1-1"].to_dict()) == PRESETS["randwrite-4k-1-1"]


def test_block_pattern():
    p = block_pattern(3, 17, 9, 4096)
    assert len(p) == 4096 and p != block_pattern(3, 17, 10, 4096)
