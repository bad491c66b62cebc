import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from viplab.prompt_encoder import (
    GLOBAL_BOX,
    READOUT_SHARPNESS,
    BoxSpec,
    PromptEncoder,
    bilinear_sample,
    build_prompt_queries,
    extract_visual_prompts,
    sine_cosine_box_encoding,
)


def loop_encoding(box, dim, temperature=10000.0):
    per = dim // 4
    out = []
    for c in box:
        for i in range(per // 2):
            a = 2 * math.pi * c / temperature ** (2 * i / per)
            out += [math.sin(a), math.cos(a)]
    return out


def hand_bilinear(grid, x, y):
    """grid (D, H, W); cell centres at (j + 0.5) / W; clamp at the border."""
    d, h, w = grid.shape
    fx = min(max(x * w - 0.5, 0.0), w - 1.0)
    fy = min(max(y * h - 0.5, 0.0), h - 1.0)
    x0, y0 = int(math.floor(fx)), int(math.floor(fy))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = fx - x0, fy - y0
    return ((1 - ax) * (1 - ay) * grid[:, y0, x0] + ax * (1 - ay) * grid[:, y0, x1]
            + (1 - ax) * ay * grid[:, y1, x0] + ax * ay * grid[:, y1, x1])


def identity_encoder(dim=8, layers=1, heads=1, points=1):
    enc = PromptEncoder(dim, layers, heads, points).double()
    with torch.no_grad():
        for s in enc.samplers:
            s.offsets.bias.zero_()
            for lin in (s.value, s.output):
                lin.weight.copy_(torch.eye(dim, dtype=torch.float64))
                lin.bias.zero_()
    return enc


def test_boxspec_clamps_into_unit_square():
    b = BoxSpec(0.95, 0.02, 0.3, 2.0)
    assert b.w == pytest.approx(0.3) and b.h == 1.0
    assert b.cx + b.w / 2 <= 1.0 + 1e-12 and b.cy - b.h / 2 >= -1e-12
    assert BoxSpec.from_xyxy(0.1, 0.2, 0.5, 0.6).as_tuple() == pytest.approx((0.3, 0.4, 0.4, 0.4))


def test_encoding_matches_scalar_loop():
    got = sine_cosine_box_encoding(torch.tensor([GLOBAL_BOX], dtype=torch.float64), 8)
    np.testing.assert_allclose(got[0].numpy(), loop_encoding(GLOBAL_BOX, 8), atol=1e-12)
    box = (0.31, 0.62, 0.2, 0.45)
    got = sine_cosine_box_encoding(torch.tensor([box], dtype=torch.float64), 32)
    np.testing.assert_allclose(got[0].numpy(), loop_encoding(box, 32), atol=1e-12)


def test_encoding_separates_coordinates():
    a = sine_cosine_box_encoding(torch.tensor([[0.3, 0.5, 0.2, 0.2], [0.3, 0.5, 0.2, 0.2],
                                               [0.6, 0.5, 0.2, 0.2]]), 16)
    assert torch.equal(a[0], a[1])
    changed = (a[0] != a[2]).nonzero().flatten().tolist()
    assert changed and all(i < 4 for i in changed)  # only the cx block (16 // 4 channels)


def test_encoding_dim_must_divide_by_8():
    with pytest.raises(ValueError):
        sine_cosine_box_encoding(torch.zeros(1, 4), 12)


def test_queries_shape_and_global_row():
    content, token = torch.randn(8), torch.randn(8)
    qs = build_prompt_queries([BoxSpec(0.3, 0.3, 0.2, 0.2), BoxSpec(0.7, 0.6, 0.3, 0.2)], content, token)
    assert qs.queries.shape[0] == 3 and qs.num_boxes == 2
    assert tuple(qs.boxes[-1].tolist()) == GLOBAL_BOX
    again = build_prompt_queries([BoxSpec(0.3, 0.3, 0.2, 0.2), BoxSpec(0.7, 0.6, 0.3, 0.2)], content, token)
    assert torch.equal(qs.queries, again.queries)


def test_zero_content_query_is_box_code():
    box = (0.4, 0.5, 0.2, 0.3)
    qs = build_prompt_queries([box], torch.zeros(8), torch.ones(8))
    np.testing.assert_allclose(qs.queries[0, :8].numpy(), 0.0)
    np.testing.assert_allclose(qs.queries[0, 8:].numpy(), loop_encoding(box, 8), atol=1e-6)
    np.testing.assert_allclose(qs.queries[1, :8].numpy(), 1.0)


def test_no_boxes_is_an_error():
    with pytest.raises(ValueError):
        build_prompt_queries([], torch.zeros(8), torch.zeros(8))


def test_bilinear_sample_matches_hand_interpolation():
    g = torch.from_numpy(np.random.default_rng(0).standard_normal((3, 5, 4)))
    pts = [(0.5, 0.5), (0.13, 0.77), (0.0, 1.0), (0.99, 0.02)]
    loc = torch.tensor(pts, dtype=torch.float64).view(1, 1, len(pts), 2)
    got = bilinear_sample(g[None], loc)[0, :, 0]
    for k, (x, y) in enumerate(pts):
        np.testing.assert_allclose(got[:, k].numpy(), hand_bilinear(g.numpy(), x, y), atol=1e-12)


def test_single_point_zero_offset_reads_box_centre():
    enc = identity_encoder()
    grid = torch.from_numpy(np.random.default_rng(1).standard_normal((8, 6, 6)))
    boxes = [(0.3, 0.4, 0.2, 0.2), (0.71, 0.55, 0.3, 0.1)]
    out = extract_visual_prompts(enc, boxes, grid)
    for k, (cx, cy, _, _) in enumerate(boxes):
        expected = F.softplus(torch.from_numpy(hand_bilinear(grid.numpy(), cx, cy)), beta=READOUT_SHARPNESS)
        np.testing.assert_allclose(out[k].detach().numpy(), expected.numpy(), atol=1e-10)


def test_constant_grid_gives_identical_prompts():
    torch.manual_seed(0)
    enc = PromptEncoder(8, 3, 2, 4).double()
    grid = torch.randn(8, 1, 1, dtype=torch.float64).expand(8, 7, 7).contiguous()
    a = extract_visual_prompts(enc, [(0.2, 0.2, 0.1, 0.1)], grid)
    b = extract_visual_prompts(enc, [(0.8, 0.6, 0.3, 0.4)], grid)
    torch.testing.assert_close(a[0], b[0])


def test_prompts_prefer_their_own_blob():
    enc = identity_encoder(dim=8, layers=3, heads=2, points=4)
    grid = torch.zeros(8, 16, 16, dtype=torch.float64)
    grid[0, 2:6, 2:6] = 3.0
    grid[1, 10:14, 9:13] = 3.0
    out = extract_visual_prompts(enc, [(0.25, 0.25, 0.25, 0.25), (0.6875, 0.75, 0.25, 0.25)], grid).detach()
    blob_a, blob_b = torch.eye(8, dtype=torch.float64)[:2]
    cos = lambda u, v: float(u @ v / (u.norm() * v.norm()))
    assert cos(out[0], blob_a) > cos(out[0], blob_b)
    assert cos(out[1], blob_b) > cos(out[1], blob_a)


def test_box_permutation_equivariance():
    torch.manual_seed(3)
    enc = PromptEncoder(16, 3, 2, 4).double()
    grid = torch.randn(16, 8, 8, dtype=torch.float64)
    boxes = [(0.2, 0.3, 0.2, 0.2), (0.6, 0.6, 0.3, 0.2), (0.5, 0.2, 0.1, 0.3)]
    perm = [2, 0, 1]
    a = extract_visual_prompts(enc, boxes, grid)
    b = extract_visual_prompts(enc, [boxes[i] for i in perm], grid)
    torch.testing.assert_close(b[:3], a[perm], atol=1e-10, rtol=0)
    torch.testing.assert_close(b[3], a[3], atol=1e-10, rtol=0)


def test_point_weights_sum_to_one():
    torch.manual_seed(1)
    enc = PromptEncoder(16, 3, 2, 4)
    grid = torch.randn(16, 8, 8)
    for sampler in enc.samplers:
        sampler.weights.weight.data.normal_()
    extract_visual_prompts(enc, [(0.4, 0.4, 0.2, 0.2)], grid)
    for sampler in enc.samplers:
        torch.testing.assert_close(sampler.last_weights.sum(-1), torch.ones_like(sampler.last_weights.sum(-1)))


def test_padded_groups_match_single_group_calls():
    torch.manual_seed(2)
    enc = PromptEncoder(16, 2, 2, 4).double()
    grids = torch.randn(2, 16, 8, 8, dtype=torch.float64)
    g1 = [(0.3, 0.3, 0.2, 0.2), (0.7, 0.7, 0.2, 0.2)]
    g2 = [(0.5, 0.5, 0.4, 0.3)]
    boxes = torch.zeros(2, 2, 4, dtype=torch.float64)
    boxes[0] = torch.tensor(g1)
    boxes[1, 0] = torch.tensor(g2[0])
    mask = torch.tensor([[True, True], [True, False]])
    _, cls = enc.encode_groups(grids, boxes, mask, torch.tensor([0, 1]))
    torch.testing.assert_close(cls[0], enc(g1, grids[0])[-1])
    torch.testing.assert_close(cls[1], enc(g2, grids[1])[-1])


def test_grid_dim_mismatch():
    with pytest.raises(ValueError):
        extract_visual_prompts(PromptEncoder(8, 1), [(0.5, 0.5, 0.2, 0.2)], torch.zeros(16, 4, 4))
