import json
import random

import numpy as np
import pytest

import sprune


def test_penalty_and_budget_epochs():
    assert sprune.sparsity_penalty([[1.0] * 6, [1.0] * 10], 0.5) == 0.25
    assert sprune.sparsity_penalty([[0.25, 0.75]], 0.5) == 0.0
    assert sprune.budget_epochs(160, 1000, 500) == 320
    with pytest.raises(sprune.SpruneError) as err:
        sprune.budget_epochs(160, 1000, 0)
    assert err.value.kind == "precondition"


def test_search_hits_budget_on_recount():
    arch = sprune.preset("resnet-tiny")
    widths = sprune.gated_widths(arch)
    full = sprune.count_flops(arch)
    rng = random.Random(7)
    converged = 0
    for _ in range(10):
        gates = [[rng.random() for _ in range(w)] for w in widths]
        r = sprune.search_structure(gates, arch, budget_ratio=0.5)
        assert sprune.count_flops(arch, r["kept_indices"]) == r["achieved_flops"]
        if r["converged"]:
            converged += 1
            budget = round(0.5 * full)
            assert abs(r["achieved_flops"] - budget) / budget <= 0.02
    assert converged > 0


def test_correlation_matches_numpy():
    rng = np.random.default_rng(3)
    rows = rng.random((5, 8))
    m = np.array(sprune.correlation_matrix(rows.tolist()))
    np.testing.assert_allclose(m, np.corrcoef(rows), atol=1e-10)
    np.testing.assert_array_equal(m, m.T)
    np.testing.assert_array_equal(np.diag(m), np.ones(5))
    assert abs(sprune.pearson([1, 2, 3], [2, 4, 6.5]) - np.corrcoef([1, 2, 3], [2, 4, 6.5])[0, 1]) < 1e-12


def test_cifar_records():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 10, size=4, dtype=np.uint8)
    pixels = rng.integers(0, 256, size=(4, 3072), dtype=np.uint8)
    blob = np.concatenate([labels[:, None], pixels], axis=1).tobytes()
    images, got = sprune.parse_cifar10(blob)
    assert got == labels.tolist()
    assert images.shape == (4, 3, 32, 32)
    np.testing.assert_array_equal(images.reshape(4, -1), pixels.astype(np.float32) / 255.0)
    with pytest.raises(sprune.SpruneError) as err:
        sprune.parse_cifar10(blob[:-5])
    assert err.value.kind == "format"
    assert "offset" in str(err.value)


def test_prune_and_inspect(tmp_path):
    cfg = json.loads(sprune.default_config())
    cfg["synth"]["per_class"] = 60
    cfg["val_per_class"] = 20
    cfg["test_per_class"] = 20
    cfg["importance"]["epochs"] = 2
    cfg["schedule"]["base_epochs"] = 1
    cfg["out"] = str(tmp_path)
    out = sprune.prune(json.dumps(cfg), seed=4)
    assert out["search"]["converged"]
    assert 0.48 <= out["flops_ratio"] <= 0.52
    rec = sprune.load_run(out["record_path"])
    assert rec["search"]["kept_counts"] == out["search"]["kept_counts"]
    assert rec["failed_stage"] == ""
    code, text, _ = sprune.run_cli(["inspect", out["record_path"]])
    assert code == 0
    assert "[kept_counts]" in text
