import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anydoor.perturbation import (
    PerturbationSpec,
    UniversalPerturbation,
    apply,
    build_mask,
    from_bytes,
    project,
    to_bytes,
)


def count_mask_cells(strategy, budget, H, W):
    # enumerate every cell against the geometric definition
    n = 0
    for r in range(H):
        for c in range(W):
            if strategy == "border":
                b = budget
                n += r < b or r >= H - b or c < b or c >= W - b
            elif strategy == "corner":
                p = budget
                n += (r < p or r >= H - p) and (c < p or c >= W - p)
            else:
                n += 1
    return n


def test_border_mask_count():
    m = build_mask(PerturbationSpec.border(6), 64, 64)
    assert int(m.sum()) == count_mask_cells("border", 6, 64, 64) == 1392


def test_corner_mask_count():
    m = build_mask(PerturbationSpec.corner(16), 64, 64)
    assert int(m.sum()) == count_mask_cells("corner", 16, 64, 64) == 1024


def test_pixel_mask_all_ones():
    assert int(build_mask(PerturbationSpec.pixel(), 64, 64).sum()) == 4096


@settings(max_examples=40)
@given(st.integers(4, 20), st.integers(4, 20), st.sampled_from(["border", "corner"]), st.integers(1, 10))
def test_mask_counts_property(H, W, strategy, budget):
    budget = min(budget, min(H, W) // 2)
    spec = PerturbationSpec(strategy, **{"border": {"border_width": budget}, "corner": {"patch_width": budget}}[strategy])
    m = build_mask(spec, H, W)
    assert int(m.sum()) == count_mask_cells(strategy, budget, H, W)
    if strategy == "border":
        assert int(m.sum()) == H * W - (H - 2 * budget) * (W - 2 * budget)
    else:
        assert int(m.sum()) == 4 * budget * budget


@pytest.mark.parametrize("spec", [PerturbationSpec.border(33), PerturbationSpec.corner(33)])
def test_budget_over_half_extent_rejected(spec):
    with pytest.raises(ValueError, match="exceeds half"):
        build_mask(spec, 64, 64)


def test_spec_defaults():
    assert PerturbationSpec.pixel().epsilon == 32 / 255
    assert PerturbationSpec.corner().patch_width == 32
    assert PerturbationSpec.border().border_width == 6


def test_spec_rejects_foreign_budget():
    with pytest.raises(ValueError, match="takes only"):
        PerturbationSpec("border", epsilon=0.1)
    with pytest.raises(ValueError):
        PerturbationSpec("pixel", epsilon=1.5)
    with pytest.raises(ValueError, match="unknown strategy"):
        PerturbationSpec("stripe")


# ----------------------------------------------------------------------------
# apply


def test_apply_zero_delta_identity():
    V = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
    out = apply(V, UniversalPerturbation.zeros(PerturbationSpec.border()))
    assert out.tobytes() == V.tobytes()


def test_apply_saturates_border():
    V = np.random.default_rng(1).random((64, 64, 3)).astype(np.float32)
    spec = PerturbationSpec.border(6)
    pert = UniversalPerturbation(np.full((64, 64, 3), 10.0), spec)
    out = apply(V, pert)
    m = pert.mask > 0
    assert np.all(out[m] == 1.0)
    assert out[~m].tobytes() == V[~m].tobytes()


@pytest.mark.parametrize("strategy", ["pixel", "corner", "border"])
def test_apply_matches_scalar_oracle(strategy):
    rng = np.random.default_rng(2)
    V = rng.random((16, 16, 3)).astype(np.float32)
    spec = PerturbationSpec(strategy, **{"pixel": {}, "corner": {"patch_width": 4}, "border": {"border_width": 3}}[strategy])
    mask = build_mask(spec, 16, 16)
    delta = project(rng.uniform(-0.3, 0.3, size=(16, 16, 3)).astype(np.float32), spec, mask)
    out = apply(V, UniversalPerturbation(delta, spec))
    for r in range(16):
        for c in range(16):
            for ch in range(3):
                if mask[r, c]:
                    want = min(1.0, max(0.0, float(V[r, c, ch] + delta[r, c, ch])))
                    assert abs(float(out[r, c, ch]) - want) < 1e-7
                else:
                    assert out[r, c, ch] == V[r, c, ch]


def test_apply_does_not_modify_input():
    V = np.random.default_rng(3).random((64, 64, 3)).astype(np.float32)
    before = V.copy()
    apply(V, UniversalPerturbation(np.ones((64, 64, 3)), PerturbationSpec.pixel()))
    assert V.tobytes() == before.tobytes()


def test_apply_batched():
    V = np.random.default_rng(4).random((5, 64, 64, 3)).astype(np.float32)
    pert = UniversalPerturbation(np.full((64, 64, 3), 0.1), PerturbationSpec.border())
    out = apply(V, pert)
    assert out.shape == V.shape
    assert out[3].tobytes() == apply(V[3], pert).tobytes()


def test_apply_shape_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        apply(np.zeros((32, 32, 3)), UniversalPerturbation.zeros(PerturbationSpec.border()))


# ----------------------------------------------------------------------------
# project


def test_project_pixel_clamps_to_epsilon():
    spec = PerturbationSpec.pixel()
    d = np.full((64, 64, 3), 0.5, dtype=np.float32)
    out = project(d, spec)
    assert abs(float(out[0, 0, 0]) - 32 / 255) < 1e-7
    assert float(out.max()) <= 32 / 255


def test_project_zeroes_outside_mask():
    spec = PerturbationSpec.corner(8)
    d = np.random.default_rng(5).normal(size=(64, 64, 3)).astype(np.float32)
    out = project(d, spec)
    mask = build_mask(spec, 64, 64)
    assert float(np.abs(out * (1 - mask[..., None])).sum()) == 0.0
    assert float(np.abs(out).max()) <= 1.0


@pytest.mark.parametrize("spec", [PerturbationSpec.pixel(), PerturbationSpec.border(), PerturbationSpec.corner()])
def test_project_idempotent(spec):
    d = np.random.default_rng(6).normal(size=(64, 64, 3)).astype(np.float32)
    once = project(d, spec)
    assert project(once, spec).tobytes() == once.tobytes()
    assert UniversalPerturbation(once, spec).is_feasible()


# ----------------------------------------------------------------------------
# artifact


@pytest.mark.parametrize("spec", [PerturbationSpec.pixel(16 / 255), PerturbationSpec.border(8), PerturbationSpec.corner(20)])
def test_artifact_roundtrip(spec, tmp_path):
    d = project(np.random.default_rng(7).normal(size=(64, 64, 3)).astype(np.float32), spec)
    pert = UniversalPerturbation(d, spec)
    pert.save(tmp_path / "p.anydoor")
    back = UniversalPerturbation.load(tmp_path / "p.anydoor")
    assert back.spec == spec and back.delta.tobytes() == pert.delta.tobytes()
    assert to_bytes(back) == to_bytes(pert)


def test_artifact_bad_header():
    with pytest.raises(ValueError, match="header"):
        from_bytes(b"NOPE\n")
