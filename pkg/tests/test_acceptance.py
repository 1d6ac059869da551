"""The twelve acceptance criteria, one test each, at their stated tolerances.

Every test prints a single ``criterion NN PASS|FAIL`` line (also collected in
the terminal summary) before asserting.
"""

import math
import time

import numpy as np
import pytest
import torch

from promptic import TOY_CONFIG, CodecConfig, MaskSpec, PromptCodec, generate_mask
from promptic.attention import PromptedWindowAttention, prompted_attention
from promptic.bitstream import decode_image, encode_image
from promptic.conditioning import lambda_of
from promptic.entropy import gaussian_likelihood, range_decode, range_encode, table_from_pmfs
from promptic.evaluation import psnr, weighted_psnr
from promptic.profiling import closed_form_macs, conv_macs, count_macs
from promptic.training import StagePlan, TensorImageDataset, rd_loss, train_stage

from _oracles import attention_loop, gaussian_bin_hp


def test_c01_attention_matches_loop_oracle(acceptance_report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        side = int(rng.choice([2, 4]))
        s_img = side * side
        s_prm = int(rng.choice([0, s_img // 4]))
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.integers(1, 16 // heads + 1))
        t = lambda *shape: torch.from_numpy(rng.standard_normal(shape))
        x, p = t(s_img, d), t(s_prm, d) if s_prm else None
        ws = [t(d, d) / math.sqrt(d) for _ in range(3)]
        bs = [t(d) for _ in range(3)]
        bias = t(heads, s_img, s_img + s_prm) * 0.1
        out = prompted_attention(x, p, *ws, num_heads=heads, bias=bias, b_q=bs[0], b_k=bs[1], b_v=bs[2])
        ref = attention_loop(x, p, *ws, heads, bias, *bs)
        worst = max(worst, float(np.max(np.abs(out.numpy() - ref))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 60
    acceptance_report(1, "attention oracle equivalence", ok, f"max diff {worst:.2e}, {elapsed:.1f} s")
    assert ok


def _standard_window_attention(x, attn: PromptedWindowAttention, w):
    """Plain Swin window self-attention written out step by step."""
    d = x.shape[-1]
    heads = attn.num_heads
    hd = d // heads
    wq, wk, wv = attn.qkv.weight.t().chunk(3, dim=1)
    bq, bk, bv = attn.qkv.bias.chunk(3)
    q = (x @ wq + bq).unflatten(-1, (heads, hd)).transpose(-3, -2)
    k = (x @ wk + bk).unflatten(-1, (heads, hd)).transpose(-3, -2)
    v = (x @ wv + bv).unflatten(-1, (heads, hd)).transpose(-3, -2)
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd) + attn.relative_bias(w)
    out = (scores.softmax(-1) @ v).transpose(-3, -2).flatten(-2)
    return attn.proj(out)


def test_c02_empty_prompts_reduce_to_window_attention(acceptance_report):
    torch.manual_seed(7)
    identical = 0
    for case in range(100):
        w = [2, 4, 8][case % 3]
        heads = [1, 2, 4][(case // 3) % 3]
        attn = PromptedWindowAttention(heads * 4, heads, w, prompted=True)
        x = torch.randn(3, w * w, heads * 4)
        with torch.no_grad():
            a = attn(x, torch.empty(3, 0, heads * 4), window_size=w)
            b = attn(x, None, window_size=w)
            ref = _standard_window_attention(x, attn, w)
        identical += int(torch.equal(a, ref) and torch.equal(b, ref))
    ok = identical == 100
    acceptance_report(2, "empty-prompt reduction", ok, f"{identical}/100 bit-identical")
    assert ok


def _static_prompt_audit(model: PromptCodec, H: int, W: int):
    """Walk every prompted block with conv arithmetic only; return (S_I, S_P) per layer."""
    pairs = []
    h, w = H, W
    ph, pw = H, W  # encoder prompt maps start at the input resolution
    for i, block in enumerate(model.g_a):
        _, h, w = conv_macs(block.resample_conv, h, w)
        _, th, tw = conv_macs(block.stage.prompt_convs[0], ph, pw)
        assert (th, tw) == (h // 2, w // 2)
        for layer in block.stage.layers:
            win = layer.geometry(h, w)[0]
            pairs.append((win * win, (win // 2) ** 2))
        ph, pw = ph // 2, pw // 2
    for block in model.g_s:
        _, th, tw = conv_macs(block.stage.prompt_convs[0], h, w)
        assert (th, tw) == (h // 2, w // 2)
        for layer in block.stage.layers:
            win = layer.geometry(h, w)[0]
            pairs.append((win * win, (win // 2) ** 2))
        h, w = h * 2, w * 2
    return pairs


def test_c03_prompt_count_is_a_quarter_of_image_tokens(acceptance_report):
    default = PromptCodec(CodecConfig())
    static = _static_prompt_audit(default, 256, 256)

    toy = PromptCodec(**TOY_CONFIG).eval()
    dynamic = []
    handles = [
        layer.attn.register_forward_hook(lambda m, a, k, o: dynamic.append((a[0].shape[1], a[1].shape[1])), with_kwargs=True)
        for layer in toy.prompted_layers()
    ]
    with torch.no_grad():
        toy(torch.rand(1, 3, 128, 192), torch.ones(1, 1, 128, 192), 0.5, mode="eval")
    for h in handles:
        h.remove()
    ok = (
        len(static) == 16
        and len(dynamic) == 16
        and all(s_i == 4 * s_p and s_p > 0 for s_i, s_p in static + dynamic)
    )
    acceptance_report(3, "prompt-count invariant S_P = S_I/4", ok, f"{len(static)} static + {len(dynamic)} runtime layers")
    assert ok


def test_c04_lambda_mapping(acceptance_report):
    ends = abs(lambda_of(0.0) - 0.0018) <= 1e-12 and abs(lambda_of(1.0) - 0.0932) <= 1e-12
    logs = np.log([lambda_of(float(m)) for m in np.linspace(0, 1, 201)])
    second = float(np.max(np.abs(np.diff(logs, 2))))
    ok = ends and second <= 1e-12
    acceptance_report(4, "lambda mapping", ok, f"endpoints exact={ends}, max 2nd diff {second:.1e}")
    assert ok


def test_c05_loss_correctness(acceptance_report):
    f64 = dict(dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    x = torch.rand(3, 6, 6, generator=g, **f64)
    xh = torch.rand(3, 6, 6, generator=g, **f64)
    unit = abs(rd_loss(x, xh, torch.ones(1, 6, 6, **f64), 0.4, 0.0).masked_mse.item() - ((x - xh) ** 2).mean().item())
    zero = abs(rd_loss(x, xh, torch.zeros(1, 6, 6, **f64), 0.4, 0.37).total.item() - 0.37)
    toy = abs(
        rd_loss(torch.zeros(1, 1, 2, **f64), torch.tensor([[[0.1, 0.5]]], **f64), torch.tensor([[[1.0, 0.0]]], **f64), 1.0, 0.0)
        .masked_mse.item() - 0.005
    )

    roi = torch.rand(1, 6, 6, generator=g, **f64)
    v = xh.clone().requires_grad_()
    rd_loss(x, v, roi, 0.8, 0.1).total.backward()
    worst = 0.0
    h = 1e-6
    flat = xh.reshape(-1)
    for i in range(flat.numel()):
        up, dn = flat.clone(), flat.clone()
        up[i] += h
        dn[i] -= h
        fd = (rd_loss(x, up.view_as(xh), roi, 0.8, 0.1).total - rd_loss(x, dn.view_as(xh), roi, 0.8, 0.1).total).item() / (2 * h)
        an = v.grad.reshape(-1)[i].item()
        if abs(fd) > 1e-10:
            worst = max(worst, abs(fd - an) / abs(fd))
    ok = max(unit, zero, toy) <= 1e-12 and worst <= 1e-4
    acceptance_report(5, "loss correctness", ok, f"hand-example err {max(unit, zero, toy):.1e}, grad rel err {worst:.1e}")
    assert ok


def test_c06_entropy_coder(acceptance_report):
    rng = np.random.default_rng(6)
    pmfs = [rng.dirichlet(np.full(int(rng.integers(2, 64)), float(rng.uniform(0.2, 3)))) for _ in range(100)]
    table = table_from_pmfs(pmfs, rng.integers(-32, 1, 100).tolist(), rng.uniform(0, 1e-3, 100).tolist())
    contexts = rng.integers(0, 100, 100_000)
    symbols, ideal = [], 0.0
    for c in contexts:
        probs = table.probabilities(c)
        k = int(rng.choice(len(probs) - 1, p=probs[:-1] / probs[:-1].sum()))
        symbols.append(table.offsets[c] + k)
        ideal -= math.log2(probs[k])
    t0 = time.perf_counter()
    data = range_encode(symbols, table, contexts.tolist())
    decoded = range_decode(data, table, contexts.tolist(), len(symbols))
    elapsed = time.perf_counter() - t0
    exact = decoded == symbols
    within = abs(len(data) - ideal / 8) <= 0.01 * ideal / 8 + 32
    ok = exact and within and elapsed < 120
    acceptance_report(6, "entropy coder", ok, f"{len(data)} bytes vs ideal {ideal / 8:.0f}, exact={exact}, {elapsed:.1f} s")
    assert ok


def test_c07_end_to_end_bitstream(acceptance_report):
    torch.manual_seed(77)
    model = PromptCodec(**TOY_CONFIG).eval()
    rng = np.random.default_rng(77)
    identical, in_bound, worst = 0, 0, 0.0
    for i in range(20):
        H, W = int(rng.integers(24, 160)), int(rng.integers(24, 160))
        x = torch.from_numpy(rng.uniform(size=(3, H, W))).float()
        kind = ["uniform", "gradient", "rectangles", "blobs"][i % 4]
        roi = torch.from_numpy(generate_mask(MaskSpec(kind, seed=i), H, W)).float()
        m = float(rng.uniform())
        enc = encode_image(model, x, roi, m)
        dec = decode_image(model, enc.data)
        identical += int(torch.equal(enc.y_hat, dec.y_hat))
        est_bytes = enc.estimated_bpp * H * W / 8
        gap = abs(enc.num_bytes - est_bytes)
        in_bound += int(gap <= 0.02 * est_bytes + 64)
        worst = max(worst, gap)
    ok = identical == 20 and in_bound == 20
    acceptance_report(7, "end-to-end bitstream", ok, f"{identical}/20 identical, {in_bound}/20 in bound, worst gap {worst:.0f} B")
    assert ok


def test_c08_gaussian_likelihood(acceptance_report):
    rng = np.random.default_rng(8)
    t = lambda v: torch.tensor([v], dtype=torch.float64)
    worst = abs(gaussian_likelihood(t(0.0), t(0.0), t(1.0)).item() - 0.382925)
    anchor = worst <= 1e-6
    worst = 0.0
    for _ in range(300):
        y = float(rng.integers(-20, 21))
        mu, sigma = float(rng.uniform(-5, 5)), float(np.exp(rng.uniform(np.log(0.11), np.log(50))))
        p = gaussian_likelihood(t(y), t(mu), t(sigma), floor=0.0).item()
        worst = max(worst, abs(p - float(gaussian_bin_hp(y, mu, sigma))))
    y = torch.arange(-80, 81, dtype=torch.float64)
    total = gaussian_likelihood(y, torch.full_like(y, 0.37), torch.full_like(y, 0.5), floor=0.0).sum().item()
    ok = anchor and worst <= 1e-9 and abs(total - 1.0) <= 1e-9
    acceptance_report(8, "Gaussian likelihood", ok, f"max oracle err {worst:.1e}, sum-1 {total - 1:.1e}")
    assert ok


def test_c09_weighted_psnr(acceptance_report):
    x, xh = np.zeros((1, 1, 2)), np.array([[[0.1, 0.5]]])
    hand = abs(weighted_psnr(x, xh, np.array([[[1.0, 0.0]]]), 0.8, 0.2) - 12.366)
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        a, b = rng.uniform(size=(2, 3, 16, 16))
        roi = rng.uniform(size=(1, 16, 16))
        w = float(rng.uniform(0.1, 5))
        worst = max(worst, abs(weighted_psnr(a, b, roi, w, w) - psnr(a, b)))
    ok = hand <= 1e-3 and worst <= 1e-12
    acceptance_report(9, "weighted PSNR", ok, f"hand err {hand:.1e} dB, alpha=beta err {worst:.1e}")
    assert ok


def _astronaut_128():
    from skimage import data, transform

    img = transform.resize(data.astronaut()[:256, 128:384], (128, 128), anti_aliasing=True)
    return torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1).contiguous()


def test_c10_overfit_convergence(acceptance_report):
    torch.manual_seed(10)
    model = PromptCodec(**TOY_CONFIG)
    n_params = sum(p.numel() for p in model.parameters())
    dataset = TensorImageDataset([_astronaut_128()], crop=128)
    plan = StagePlan(stage=1, steps=500, learning_rate=1e-3, batch_size=1, crop=128)
    t0 = time.perf_counter()
    records = train_stage(plan, model, dataset, seed=10)
    elapsed = time.perf_counter() - t0
    totals = np.array([r["total"] for r in records])
    start, end = totals[:10].mean(), totals[-10:].mean()
    drop = 1 - end / start
    ok = n_params <= 1_000_000 and drop >= 0.5 and elapsed <= 600
    acceptance_report(10, "overfit convergence", ok, f"loss {start:.2f} -> {end:.2f} ({drop:.0%} drop), {elapsed:.0f} s")
    assert ok


def test_c11_trained_toy_trends(acceptance_report, tmp_path_factory):
    from _toy import heldout_images, trained_toy_model

    model = trained_toy_model(tmp_path_factory.mktemp("toy"))
    images = heldout_images(count=10, size=128)
    grid = [round(0.1 * k, 1) for k in range(1, 10)]

    pairs_ok = pairs = 0
    for x in images:
        sizes = [encode_image(model, x, None, m).num_bytes for m in grid]
        pairs += len(sizes) - 1
        pairs_ok += sum(b >= a for a, b in zip(sizes, sizes[1:]))
    frac_rate = pairs_ok / pairs

    roi = torch.zeros(1, 128, 128)
    roi[:, 32:96, 32:96] = 1
    inside = roi.bool().expand(3, -1, -1)
    roi_wins = 0
    for x in images:
        dec = decode_image(model, encode_image(model, x, roi, 0.5).data)
        err = (dec.image - x) ** 2
        roi_wins += int(err[inside].mean() < err[~inside].mean())
    frac_roi = roi_wins / len(images)

    ok = frac_rate >= 0.9 and frac_roi >= 0.8
    acceptance_report(
        11, "trained-toy trends", ok,
        f"bpp nondecreasing on {pairs_ok}/{pairs} pairs, ROI MSE lower on {roi_wins}/{len(images)} images",
    )
    assert ok


def test_c12_profiler(acceptance_report):
    macs, _, _ = conv_macs(torch.nn.Conv2d(3, 8, 3, padding=1), 16, 16)
    hand = macs == 55_296 and macs / 256 == 216
    torch.manual_seed(12)
    model = PromptCodec(**TOY_CONFIG).eval()
    mismatches = []
    for H, W in ((64, 64), (128, 192), (256, 128)):
        closed = {k: sum(v.values()) for k, v in closed_form_macs(model, H, W).items()}
        counted = count_macs(model, torch.rand(1, 3, H, W), torch.ones(1, 1, H, W), 0.5, mode="eval")
        if closed != counted:
            mismatches.append(((H, W), closed, counted))
    types = set(closed)
    ok = hand and not mismatches and types == {"conv", "deconv", "linear", "attention"}
    acceptance_report(12, "profiler", ok, f"216 MACs/pixel={hand}, layer types {sorted(types)}, mismatches {len(mismatches)}")
    assert ok
