import numpy as np
import pytest

from divgate import tensor as T
from divgate.audits import run_audits
from divgate.fusion import UncertaintyFusion
from divgate.gradcheck import grad_check
from divgate.tensor import ParamStore, Tensor


def test_quadratic_matches_analytic():
    # float64 evaluation path: the 1e-5 comparison needs the headroom
    store = ParamStore()
    w = store.add("w", np.array([3.0], np.float64))
    rep = grad_check(lambda: T.mul(w, w), store, epsilon=1e-3, tolerance=1e-5)
    assert rep.passed
    assert rep.errors["w"] < 1e-5
    # analytic derivative of w^2 at 3 is 6
    store.zero_grad()
    T.mul(w, w).backward()
    assert w.grad[0] == pytest.approx(6.0)


def test_abs_kink_flagged_not_asserted():
    store = ParamStore()
    w = store.add("w", np.array([0.0], np.float64))
    rep = grad_check(lambda: T.absolute(w), store, epsilon=1e-3, tolerance=1e-5)
    assert rep.suspect["w"] == 1
    assert rep.checked["w"] == 0
    assert rep.passed  # the kink is excluded, not failed


def test_non_scalar_rejected():
    store = ParamStore()
    w = store.add("w", np.ones(3, np.float32))
    with pytest.raises(ValueError, match="scalar"):
        grad_check(lambda: T.mul(w, w), store)


def test_bad_epsilon_rejected():
    store = ParamStore()
    store.add("w", np.ones(1, np.float32))
    with pytest.raises(ValueError, match="epsilon"):
        grad_check(lambda: T.sum_(store["w"]), store, epsilon=0.0)


def test_sampled_subset_of_elements():
    store = ParamStore()
    w = store.add("w", np.random.default_rng(0).normal(size=(10, 10)))
    rep = grad_check(lambda: T.mean(T.mul(w, w)), store, epsilon=1e-3,
                     samples_per_param=7, rng=np.random.default_rng(1))
    assert rep.checked["w"] + rep.suspect["w"] == 7


def test_full_uncertainty_fusion_block_audit():
    # full bottleneck block on random 4x4-token features, 1e-3 tolerance
    rng = np.random.default_rng(5)
    store = ParamStore()
    v = store.add("v", rng.uniform(-1, 1, (1, 16, 8)).astype(np.float32))
    n = store.add("n", rng.uniform(-1, 1, (1, 16, 8)).astype(np.float32))
    block = UncertaintyFusion(store, "uafm", 8, 8, rng)
    for _, t in store.trainable_items():
        t.data = rng.uniform(-0.5, 0.5, t.data.shape).astype(np.float32)

    def fn():
        fused, u = block(v, n)
        return T.add(T.mean(T.mul(fused, fused)), T.mean(u))

    ref_store = ParamStore()
    for name, t in store.items():
        rt = ref_store.add(name, t.data)
        rt.data = rt.data.astype(np.float64)
    ref_block = UncertaintyFusion.__new__(UncertaintyFusion)
    ref_block.wq, ref_block.wk, ref_block.wv = ref_store["uafm.wq"], ref_store["uafm.wk"], ref_store["uafm.wv"]
    ref_block.wn, ref_block.wo = ref_store["uafm.wn"], ref_store["uafm.wo"]

    def ref_fn():
        fused, u = ref_block(ref_store["v"], ref_store["n"])
        return T.add(T.mean(T.mul(fused, fused)), T.mean(u))

    rep = grad_check(fn, store, epsilon=1e-6, tolerance=1e-3, reference=(ref_fn, ref_store))
    assert rep.passed, rep.lines()


def test_audit_suite_float64_tight():
    rep = run_audits(seed=1, tolerance=1e-5, dtype=np.float64,
                     cases=["elementwise", "matmul", "conv_s1p1", "group_norm", "softmax"])
    assert rep.passed, rep.lines()


def test_report_lines_format():
    store = ParamStore()
    store.add("w", np.array([2.0], np.float64))
    rep = grad_check(lambda: T.mul(store["w"], store["w"]), store)
    lines = rep.lines()
    assert any("PASS" in line for line in lines)
