import numpy as np
import pytest

from exitwise.backbone import Backbone, BackboneConfig
from exitwise.checkpoint import read_tensor_file
from exitwise.errors import BudgetInfeasibleError, ConfigError, ContractError
from exitwise.exits import ExitSpec, attach_exits
from exitwise.runtime import (
    Budget,
    ExitCatalog,
    ExitEntry,
    bench,
    bench_table,
    build_catalog,
    count_params,
    estimate_flops,
    fuse,
    predict_at_exit,
    select_exit,
)


def tiny_config(**kws):
    base = dict(num_layers=4, hidden=8, heads=2, ff_dim=16, head_dims=(6, 7),
                encoder_convs=[(8, 5, 3), (8, 5, 3)])
    base.update(kws)
    return BackboneConfig(**base)


def model_with_exits(exits=(1, 2), seed=1):
    return attach_exits(Backbone(tiny_config(), seed=seed), [ExitSpec(a) for a in exits], seed=seed + 1)


def paper_scale_catalog():
    # the published parameter column: 36.2M / 71.6M / 85.8M / 100.0M
    return ExitCatalog(entries=[
        ExitEntry("layer3", 3, 36_200_000, 10),
        ExitEntry("layer8", 8, 71_600_000, 20),
        ExitEntry("layer10", 10, 85_800_000, 30),
        ExitEntry("teacher", 12, 100_000_000, 40),
    ])


def test_select_exit_published_catalog():
    catalog = paper_scale_catalog()
    assert select_exit(catalog, Budget("params", 80_000_000)) == "layer8"


def test_select_exit_boundary_inclusive():
    catalog = paper_scale_catalog()
    assert select_exit(catalog, Budget("params", 85_800_000)) == "layer10"


def test_select_exit_infeasible_names_cheapest():
    catalog = paper_scale_catalog()
    with pytest.raises(BudgetInfeasibleError, match="layer3"):
        select_exit(catalog, Budget("params", 10_000_000))


def test_select_exit_brute_force_oracle_random_catalogs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        layers = sorted(rng.choice(np.arange(1, 13), size=rng.integers(2, 5), replace=False))
        costs = np.sort(rng.integers(1, 10**6, size=len(layers)))
        costs = costs + np.arange(len(costs))  # force strictly increasing
        entries = [ExitEntry(f"layer{l}", int(l), int(c), int(c)) for l, c in zip(layers, costs)]
        catalog = ExitCatalog(entries=entries)
        budget = Budget("params", int(rng.integers(1, 1.2 * 10**6)))
        feasible = [e for e in entries if e.param_count <= budget.limit]
        if not feasible:
            with pytest.raises(BudgetInfeasibleError):
                select_exit(catalog, budget)
        else:
            want = max(feasible, key=lambda e: e.layer_index).exit_id
            assert select_exit(catalog, budget) == want


def test_budget_validation():
    with pytest.raises(ConfigError):
        Budget("weight", 10)
    with pytest.raises(ConfigError):
        Budget("params", 0)


def test_catalog_requires_monotone_params():
    with pytest.raises(ConfigError):
        ExitCatalog(entries=[ExitEntry("layer1", 1, 100, 1), ExitEntry("layer2", 2, 90, 2)])


def test_catalog_roundtrip(tmp_path):
    catalog = paper_scale_catalog()
    catalog.entries[0].latency_us = 123.5
    path = tmp_path / "catalog.json"
    catalog.save(path)
    loaded = ExitCatalog.load(path)
    assert loaded.to_dict() == catalog.to_dict()


def test_fuse_identity_symmetry_simplex():
    p = np.array([[0.2, 0.8]])
    np.testing.assert_array_equal(fuse([p]), p)
    a, b = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    np.testing.assert_allclose(fuse([a, b]), [[0.5, 0.5]])
    rng = np.random.default_rng(1)
    probs = []
    for _ in range(3):
        raw = rng.random((4, 7))
        probs.append(raw / raw.sum(axis=1, keepdims=True))
    fused = fuse(probs)
    np.testing.assert_allclose(fused.sum(axis=1), 1.0, atol=1e-6)
    assert (fused >= 0).all()
    with pytest.raises(ContractError):
        fuse([])


def test_fuse_vote():
    a = np.array([[0.9, 0.1], [0.2, 0.8]])
    b = np.array([[0.6, 0.4], [0.7, 0.3]])
    c = np.array([[0.1, 0.9], [0.8, 0.2]])
    out = fuse([a, b, c], method="vote")
    np.testing.assert_array_equal(out, [[1.0, 0.0], [1.0, 0.0]])


def test_predict_at_exit_layer_counts():
    model = model_with_exits(exits=(1, 2))
    x = np.random.default_rng(2).normal(0, 0.3, (2, 64)).astype(np.float32)
    counts = {}
    for exit_id, want in [("layer1", 1), ("layer2", 2), ("teacher", 4)]:
        before = model.backbone.layer_calls
        probs = predict_at_exit(model, x, exit_id)
        counts[exit_id] = model.backbone.layer_calls - before
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert counts[exit_id] == want
    assert counts["layer1"] < counts["layer2"] < counts["teacher"]


def test_predict_at_exit_unknown_exit():
    model = model_with_exits()
    x = np.zeros((1, 64), dtype=np.float32)
    with pytest.raises(ContractError):
        predict_at_exit(model, x, "layer3")


def test_predictions_stable_when_deeper_exits_added():
    base = model_with_exits(exits=(1,), seed=7)
    more = model_with_exits(exits=(1, 3), seed=7)
    # same seeds build identical backbones; copy exit-1 branch parameters over
    more.set_parameters({n: p.data for n, p in base.parameters().items() if n.startswith("exit.1.")})
    x = np.random.default_rng(3).normal(0, 0.3, (2, 64)).astype(np.float32)
    np.testing.assert_array_equal(
        predict_at_exit(base, x, "layer1"), predict_at_exit(more, x, "layer1")
    )


def test_count_params_linear_map_analytic():
    # a single 768 -> 256 linear map with bias: 768*256 + 256
    from exitwise.modules import Linear

    lin = Linear(768, 256, np.random.default_rng(0))
    assert sum(p.size for p in lin.parameters().values()) == 768 * 256 + 256 == 196_864


def test_count_params_monotone_and_checkpoint_walk_oracle(tmp_path):
    model = model_with_exits(exits=(1, 2, 3))
    counts = [count_params(model, f"layer{a}") for a in (1, 2, 3)] + [count_params(model, "teacher")]
    assert all(b > a for a, b in zip(counts, counts[1:]))

    path = tmp_path / "m.ckpt"
    model.save_checkpoint(path)
    _, _, table = read_tensor_file(path)

    def oracle(exit_id):
        if exit_id == "teacher":
            keep = lambda n: not n.startswith("exit.")
        else:
            ai = int(exit_id.removeprefix("layer"))
            def keep(n):
                if n.startswith("exit."):
                    return n.startswith(f"exit.{ai}.")
                if n.startswith("layer."):
                    return int(n.split(".")[1]) < ai
                return not n.startswith("head.")

        return sum(int(np.prod(arr.shape)) for n, arr in table.items() if keep(n))

    for exit_id in ("layer1", "layer2", "layer3", "teacher"):
        assert count_params(model, exit_id) == oracle(exit_id), exit_id


def test_full_count_equals_all_parameters():
    model = model_with_exits(exits=())
    assert count_params(model, "teacher") == model.num_params()


def test_estimate_flops_increases_with_depth():
    model = model_with_exits(exits=(1, 3))
    f1 = estimate_flops(model, "layer1", frames=16)
    f3 = estimate_flops(model, "layer3", frames=16)
    ft = estimate_flops(model, "teacher", frames=16)
    assert f1 < f3 < ft


def test_build_catalog_and_selection_end_to_end():
    model = model_with_exits(exits=(1, 2))
    catalog = build_catalog(model, frames=16)
    assert [e.exit_id for e in catalog.entries] == ["layer1", "layer2", "teacher"]
    top = select_exit(catalog, Budget("params", catalog.entries[-1].param_count))
    assert top == "teacher"
    assert select_exit(catalog, Budget("depth", 2)) == "layer2"


def test_bench_validates_repeats_and_roundtrips(tmp_path):
    model = model_with_exits(exits=(1,))
    with pytest.raises(ConfigError):
        bench(model, (1, 64), repeats=2)
    catalog = bench(model, (1, 64), repeats=3)
    assert all(e.latency_us is not None for e in catalog.entries)
    path = tmp_path / "catalog.json"
    catalog.save(path)
    again = ExitCatalog.load(path)
    assert again.to_dict() == catalog.to_dict()
