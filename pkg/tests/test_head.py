import numpy as np
import pytest

from placevlad import autodiff as ad
from placevlad.autodiff import Tensor
from placevlad.geodata import DataError
from placevlad.head import (
    HeadParams,
    HeadTensors,
    adapter,
    attention,
    describe,
    embed,
    export_heatmap,
    init_head,
    kmeans,
    load_checkpoint,
    normalize_vlad,
    save_checkpoint,
    soft_assign,
    vlad,
    vlad_a1,
    vlad_a2,
    vlad_fused,
)

from oracles import (
    finite_diff_grad,
    rel_err,
    softmax_rows,
    vlad_a1_loops,
    vlad_a2_loops,
    vlad_loops,
)


def random_params(rng, din=3, d=3, k=2, mode="fused", intra=True) -> HeadParams:
    w = rng.normal(0.0, 0.05, size=(3, 3, din, d))
    if din == d:
        w[1, 1] += np.eye(din)
    return HeadParams(
        adapter_w=w,
        adapter_b=rng.normal(0.0, 0.05, size=d),
        attn_w=rng.normal(0.0, 0.3, size=d),
        attn_b=np.asarray(rng.normal(0.0, 0.3)),
        assign_w=rng.normal(0.0, 1.0, size=(d, k)),
        assign_b=rng.normal(0.0, 0.5, size=k),
        centers=rng.normal(0.5, 0.5, size=(k, d)),
        mode=mode,
        intra_norm=intra,
    )


# -- soft assignment -----------------------------------------------------------


def test_soft_assign_rows_sum_to_one():
    rng = np.random.default_rng(0)
    p = random_params(rng, k=4)
    a = soft_assign(Tensor(rng.normal(size=(7, 3))), HeadTensors(p)).data
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(a > 0.0)


def test_soft_assign_dominant_logit_saturates():
    p = HeadParams(
        adapter_w=np.zeros((3, 3, 2, 2)), adapter_b=np.zeros(2),
        attn_w=np.zeros(2), attn_b=np.zeros(()),
        assign_w=np.array([[10.0, 0.0], [0.0, 0.0]]), assign_b=np.zeros(2),
        centers=np.zeros((2, 2)),
    )
    a = soft_assign(Tensor([[1.0, 0.0]]), HeadTensors(p)).data
    assert a[0, 0] > 0.999


# -- VLAD variants against loop oracles ------------------------------------------


def test_vlad_one_descriptor_on_its_center_single_cluster():
    c = np.array([[0.3, -0.7, 1.1]])
    p = HeadParams(
        adapter_w=np.zeros((3, 3, 3, 3)), adapter_b=np.zeros(3),
        attn_w=np.zeros(3), attn_b=np.zeros(()),
        assign_w=np.zeros((3, 1)), assign_b=np.zeros(1), centers=c,
    )
    ht = HeadTensors(p)
    x = Tensor(c.copy())
    a = soft_assign(x, ht)
    np.testing.assert_array_equal(vlad(x, a, ht).data, np.zeros((1, 3)))


def test_vlad_linear_in_assignment():
    rng = np.random.default_rng(1)
    p = random_params(rng, k=3)
    ht = HeadTensors(p)
    x = Tensor(rng.normal(size=(6, 3)))
    a = rng.random((6, 3))
    v1 = vlad(x, Tensor(a), ht).data
    v2 = vlad(x, Tensor(2.0 * a), ht).data
    np.testing.assert_allclose(v2, 2.0 * v1, atol=1e-12)


def test_vlad_variants_match_brute_force_oracles():
    rng = np.random.default_rng(42)
    for trial in range(50):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(2, 7))
        k = int(rng.integers(1, 5))
        p = random_params(rng, din=d, d=d, k=k)
        ht = HeadTensors(p)
        x = rng.normal(size=(n, d))
        w = rng.random(n) * 2.0

        a = softmax_rows(x @ p.assign_w + p.assign_b)
        np.testing.assert_allclose(
            vlad(Tensor(x), Tensor(a), ht).data,
            vlad_loops(x, a, p.centers), atol=1e-10, err_msg=f"vanilla {trial}")
        np.testing.assert_allclose(
            vlad_a1(Tensor(x), Tensor(w), ht).data,
            vlad_a1_loops(x, w, p.centers, p.assign_w, p.assign_b),
            atol=1e-10, err_msg=f"a1 {trial}")
        np.testing.assert_allclose(
            vlad_a2(Tensor(x), Tensor(w), ht).data,
            vlad_a2_loops(x, w, p.centers, p.assign_w, p.assign_b),
            atol=1e-10, err_msg=f"a2 {trial}")
        np.testing.assert_allclose(
            vlad_fused(Tensor(x), Tensor(w), ht).data,
            vlad_a1_loops(x, w, p.centers, p.assign_w, p.assign_b)
            + vlad_a2_loops(x, w, p.centers, p.assign_w, p.assign_b),
            atol=1e-10, err_msg=f"fused {trial}")


def test_unit_attention_collapses_to_vanilla():
    rng = np.random.default_rng(7)
    p = random_params(rng, d=4, din=4, k=3)
    ht = HeadTensors(p)
    x = Tensor(rng.normal(size=(10, 4)))
    ones = Tensor(np.ones(10))
    base = vlad(x, soft_assign(x, ht), ht).data
    assert np.abs(vlad_a1(x, ones, ht).data - base).max() <= 1e-10
    assert np.abs(vlad_a2(x, ones, ht).data - base).max() <= 1e-10
    fused = vlad_fused(x, ones, ht).data
    assert np.abs(fused - 2.0 * base).max() <= 1e-10
    # the factor 2 washes out in normalization
    e_fused = normalize_vlad(Tensor(fused), True).data
    e_base = normalize_vlad(Tensor(base), True).data
    assert np.abs(e_fused - e_base).max() <= 1e-10


def test_a2_zero_attention_single_cluster_gives_zero_matrix():
    rng = np.random.default_rng(8)
    p = random_params(rng, d=3, din=3, k=1)
    ht = HeadTensors(p)
    x = Tensor(rng.normal(size=(5, 3)))
    v = vlad_a2(x, Tensor(np.zeros(5)), ht).data
    np.testing.assert_array_equal(v, np.zeros((1, 3)))
    # zero matrix stays a zero embedding under the epsilon-guarded norms
    e = normalize_vlad(Tensor(v), True).data
    np.testing.assert_array_equal(e, np.zeros(3))


# -- attention / adapter ----------------------------------------------------------


def test_attention_strictly_positive():
    rng = np.random.default_rng(9)
    p = random_params(rng)
    ht = HeadTensors(p)
    scores = attention(Tensor(rng.normal(size=(5, 6, 3))), ht).data
    assert scores.shape == (5, 6)
    assert np.all(scores > 0.0)


def test_attention_zero_conv_gives_log_two():
    rng = np.random.default_rng(10)
    p = random_params(rng)
    p.attn_w[:] = 0.0
    p.attn_b = np.zeros(())
    ht = HeadTensors(p)
    scores = attention(Tensor(rng.normal(size=(4, 4, 3))), ht).data
    np.testing.assert_allclose(scores, np.log(2.0), atol=1e-15)


def test_adapter_identity_kernel_is_relu():
    rng = np.random.default_rng(11)
    p = random_params(rng)
    p.adapter_w[:] = 0.0
    p.adapter_w[1, 1] = np.eye(3)
    p.adapter_b[:] = 0.0
    fm = rng.normal(size=(4, 5, 3))
    out = adapter(Tensor(fm), HeadTensors(p)).data
    np.testing.assert_array_equal(out, np.maximum(fm, 0.0))


# -- embed ------------------------------------------------------------------------


def test_embed_returns_unit_vector():
    rng = np.random.default_rng(12)
    for mode in ("vanilla", "a1", "a2", "fused"):
        p = random_params(rng, mode=mode)
        fm = rng.uniform(0.1, 1.5, size=(5, 5, 3))
        desc = describe(fm, p)
        assert desc.embedding.shape == (p.dim,)
        assert np.linalg.norm(desc.embedding) == pytest.approx(1.0, abs=1e-12)
        assert desc.v.shape == (p.k, p.d)


def test_embed_vanilla_ignores_attention_params():
    rng = np.random.default_rng(13)
    p = random_params(rng, mode="vanilla")
    fm = rng.uniform(0.1, 1.5, size=(4, 4, 3))
    e1 = describe(fm, p).embedding
    p2 = p.copy()
    p2.attn_w = rng.normal(size=3)
    p2.attn_b = np.asarray(5.0)
    e2 = describe(fm, p2).embedding
    np.testing.assert_array_equal(e1, e2)


def test_embed_fused_equals_sum_of_parts_prenorm():
    rng = np.random.default_rng(14)
    p = random_params(rng, mode="fused")
    fm = rng.uniform(0.1, 1.5, size=(4, 4, 3))
    ht = HeadTensors(p)
    full = embed(fm, ht)
    v1 = embed(fm, ht, mode="a1").v.data
    v2 = embed(fm, ht, mode="a2").v.data
    np.testing.assert_allclose(full.v.data, v1 + v2, atol=1e-12)


def test_embed_rejects_wrong_input_depth():
    rng = np.random.default_rng(15)
    p = random_params(rng)
    with pytest.raises(DataError):
        embed(rng.normal(size=(4, 4, 5)), HeadTensors(p))


def test_global_only_normalization_switch():
    rng = np.random.default_rng(16)
    p = random_params(rng, intra=False)
    fm = rng.uniform(0.1, 1.5, size=(4, 4, 3))
    out = describe(fm, p)
    flat = out.v.reshape(-1)
    np.testing.assert_allclose(
        out.embedding, flat / np.linalg.norm(flat), atol=1e-12)


def test_embed_gradients_match_finite_differences():
    rng = np.random.default_rng(17)
    fm = rng.uniform(0.2, 1.5, size=(3, 3, 3))
    target = rng.normal(size=(2 * 3,))

    def loss_for(params: HeadParams) -> float:
        e = describe(fm, params).embedding
        return float(((e - target) ** 2).sum())

    for attempt in range(20):
        p = random_params(np.random.default_rng(100 + attempt), d=3, din=3, k=2)
        pre = ad.conv2d_3x3(Tensor(fm), Tensor(p.adapter_w), Tensor(p.adapter_b))
        if np.abs(pre.data).min() > 1e-3:  # keep FD away from the ReLU kink
            break
    else:
        pytest.fail("no kink-free configuration found")

    ht = HeadTensors(p, trainable=True)
    e = embed(fm, ht).embedding
    ad.tsum((e - Tensor(target)) * (e - Tensor(target))).backward()

    for name in ("adapter_w", "adapter_b", "attn_w", "attn_b", "assign_w",
                 "assign_b", "centers"):
        def f(arr, name=name):
            q = p.copy()
            setattr(q, name, arr.reshape(getattr(p, name).shape))
            return loss_for(q)

        fd = finite_diff_grad(f, getattr(p, name))
        got = getattr(ht, name).grad
        assert rel_err(got, fd) <= 1e-4, name


# -- heatmap -----------------------------------------------------------------------


def test_heatmap_pgm_format_and_scaling(tmp_path):
    rng = np.random.default_rng(18)
    p = random_params(rng)
    fm = rng.uniform(0.1, 2.0, size=(6, 4, 3))
    out = tmp_path / "att.pgm"
    img = export_heatmap(fm, p, out)
    raw = out.read_bytes()
    assert raw.startswith(b"P5\n4 6\n255\n")
    assert len(raw) == len(b"P5\n4 6\n255\n") + 24
    assert img.min() == 0 and img.max() == 255

    ht = HeadTensors(p)
    scores = attention(adapter(fm, ht), ht).data
    order_scores = np.argsort(scores.reshape(-1))
    bytes_sorted = img.reshape(-1)[order_scores]
    assert np.all(np.diff(bytes_sorted.astype(int)) >= 0)


def test_heatmap_constant_map_renders_midgray(tmp_path):
    p = HeadParams(
        adapter_w=np.zeros((3, 3, 2, 2)), adapter_b=np.zeros(2),
        attn_w=np.zeros(2), attn_b=np.zeros(()),
        assign_w=np.zeros((2, 2)), assign_b=np.zeros(2),
        centers=np.zeros((2, 2)),
    )
    img = export_heatmap(np.zeros((3, 5, 2)), p, tmp_path / "flat.pgm")
    assert np.all(img == 128)


# -- init --------------------------------------------------------------------------


def test_kmeans_recovers_separated_clusters():
    rng = np.random.default_rng(19)
    blobs = np.concatenate([
        rng.normal(0.0, 0.05, size=(40, 2)),
        rng.normal(5.0, 0.05, size=(40, 2)),
        np.array([[0.0, 5.0]]) + rng.normal(0.0, 0.05, size=(40, 2)),
    ])
    centers = kmeans(blobs, 3, np.random.default_rng(7))
    targets = np.array([[0.0, 0.0], [5.0, 5.0], [0.0, 5.0]])
    for t in targets:
        assert np.min(np.linalg.norm(centers - t, axis=1)) < 0.1


def test_kmeans_deterministic_and_validates_k():
    pts = np.random.default_rng(20).normal(size=(30, 3))
    c1 = kmeans(pts, 4, np.random.default_rng(1))
    c2 = kmeans(pts, 4, np.random.default_rng(1))
    np.testing.assert_array_equal(c1, c2)
    with pytest.raises(DataError):
        kmeans(pts[:3], 4, np.random.default_rng(1))


def test_init_head_assignment_peaks_on_own_center():
    rng = np.random.default_rng(21)
    maps = [rng.uniform(0.0, 2.0, size=(6, 6, 4)) for _ in range(8)]
    p = init_head(maps, k=4, rng=np.random.default_rng(3))
    assert p.centers.shape == (4, 4)
    ht = HeadTensors(p)
    a = soft_assign(Tensor(p.centers.copy()), ht).data
    assert np.all(np.argmax(a, axis=1) == np.arange(4))


# -- checkpoints ---------------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(22)
    p = random_params(rng, din=4, d=4, k=3, mode="a2", intra=False)
    path = tmp_path / "head.ckpt"
    save_checkpoint(path, p)
    q = load_checkpoint(path)
    assert q.mode == "a2" and q.intra_norm is False
    for name in ("adapter_w", "adapter_b", "attn_w", "attn_b", "assign_w",
                 "assign_b", "centers"):
        a, b = getattr(p, name), getattr(q, name)
        assert a.tobytes() == b.tobytes(), name


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage file")
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(bad)
    with pytest.raises(DataError, match="not found"):
        load_checkpoint(tmp_path / "none.ckpt")


def test_checkpoint_truncation_detected(tmp_path):
    rng = np.random.default_rng(23)
    p = random_params(rng)
    path = tmp_path / "head.ckpt"
    save_checkpoint(path, p)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(path)
