from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from offload import bench


def test_nop_report(cluster):
    ctx, ds = cluster(2)
    report = bench.bench_nop(ctx, iters=20, daemons=ds)
    d = report.to_dict()
    assert d["bench"] == "nop" and d["n_iters"] == 40 and d["ok"]
    assert d["min_ns"] <= d["avg_ns"] and d["min_ns"] <= d["p99_ns"]
    assert set(d["extra"]["per_server"]) == {0, 1}
    assert d["extra"]["reference_overhead_us"] == 60
    assert set(d["bytes"]) == {"client_in", "client_out", "peer_total"}


def test_report_json_lines(cluster, tmp_path):
    ctx, _ = cluster(1)
    path = tmp_path / "out.jsonl"
    for _ in range(2):
        bench.bench_nop(ctx, iters=3).write(str(path))
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 2
    assert set(rows[0]) == {"bench", "params", "n_iters", "min_ns", "avg_ns", "p99_ns", "bytes", "ok", "extra"}


def test_migration_needs_two_servers(cluster):
    ctx, _ = cluster(1)
    with pytest.raises(bench.Requires2Servers):
        bench.bench_migration(ctx, iters=2)


def test_migration_counter(cluster):
    ctx, ds = cluster(2)
    report = bench.bench_migration(ctx, iters=25, daemons=ds)
    assert report.extra["final_value"] == 50
    assert report.extra["migrations"] == 49
    assert report.extra["pushes"] == 49
    assert report.extra["client_bytes_per_migration"] < 1024


def test_split_rows():
    assert bench.split_rows(7, 3) == [(0, 3), (3, 2), (5, 2)]
    assert bench.split_rows(2, 4) == [(0, 1), (1, 1), (2, 0), (2, 0)]


@given(st.integers(0, 300), st.integers(1, 8))
def test_split_rows_partition(n, parts):
    split = bench.split_rows(n, parts)
    assert sum(c for _, c in split) == n
    assert all(s0 + c0 == s1 for (s0, c0), (s1, _) in zip(split, split[1:]))
    counts = [c for _, c in split]
    assert max(counts) - min(counts) <= 1


def test_matmul_identity(cluster):
    ctx, _ = cluster(2)
    a = np.random.default_rng(3).uniform(-1, 1, (8, 8)).astype(np.float32)
    report = bench.bench_matmul(ctx, 8, a=a, b=np.eye(8, dtype=np.float32), iters=1)
    assert report.result.tobytes() == a.tobytes()


def test_matmul_uneven_split(cluster):
    ctx, _ = cluster(3)
    report = bench.bench_matmul(ctx, 7, iters=1)
    assert report.extra["row_split"] == [3, 2, 2]


def test_matmul_same_on_one_and_three(cluster):
    one, _ = cluster(1)
    three, _ = cluster(3)
    r1 = bench.bench_matmul(one, 64, iters=1, seed=5)
    r3 = bench.bench_matmul(three, 64, iters=1, seed=5)
    assert r1.result.tobytes() == r3.result.tobytes()


def test_stencil_split_matches_single(cluster):
    one, _ = cluster(1)
    three, ds = cluster(3)
    r1 = bench.bench_stencil(one, 12, steps=10, seed=2)
    r3 = bench.bench_stencil(three, 12, steps=10, seed=2, daemons=ds)
    assert r1.result.tobytes() == r3.result.tobytes()
    assert r3.extra["pushes_per_step"] == [4] * 10


def test_stencil_zero_steps(cluster):
    ctx, _ = cluster(2)
    init = np.arange(8, dtype=np.float32)
    report = bench.bench_stencil(ctx, 8, steps=0, initial=init)
    assert report.result.tobytes() == init.tobytes()


def test_stencil_constant_field(cluster):
    ctx, _ = cluster(2)
    init = np.full(16, 0.5, dtype=np.float32)
    report = bench.bench_stencil(ctx, 16, steps=7, initial=init, left=0.5, right=0.5)
    assert report.result.tobytes() == init.tobytes()


def test_stencil_indivisible(cluster):
    ctx, _ = cluster(3)
    with pytest.raises(bench.IndivisibleDomain):
        bench.bench_stencil(ctx, 10, steps=1)


def test_percentile():
    assert bench.percentile([5, 1, 3], 50) == 3
    assert bench.percentile(list(range(1, 101)), 99) == 99
    assert bench.percentile([7], 99) == 7
    with pytest.raises(ValueError):
        bench.percentile([], 50)
