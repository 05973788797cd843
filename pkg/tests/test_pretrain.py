import numpy as np
import pytest
import torch

from timedart import pretrain as pt
from timedart.data import instance_normalize
from timedart.diffusion import build_schedule
from timedart.model import MaskSpec, build_mask, gradient
from timedart.oracles import finite_diff_gradient, naive_reconstruction, naive_squared_error
from timedart.pretrain import (
    Checkpoint,
    CheckpointError,
    DivergenceError,
    PretrainConfig,
    apply_ablation,
    build_model,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    pretrain_loop,
    pretrain_step,
    reconstruct,
    save_checkpoint,
)


def tiny_config(**kw):
    base = dict(patch_len=4, model_dim=8, encoder_layers=1, decoder_layers=1, heads=2, diffusion_steps=100, seed=3)
    base.update(kw)
    return PretrainConfig(**base)


def windows(rng, B, L):
    x = np.cumsum(rng.normal(size=(B, L)), axis=1)
    return instance_normalize(x)[0]


def test_ablation_table():
    assert apply_ablation(PretrainConfig()) == pt.Ablation(MaskSpec("causal"), MaskSpec("self_only"), "diff")
    assert apply_ablation(PretrainConfig(no_ar=True)) == pt.Ablation(MaskSpec("none"), MaskSpec("none"), "diff")
    assert apply_ablation(PretrainConfig(no_diff=True)) == pt.Ablation(MaskSpec("causal"), None, "mse")
    assert apply_ablation(PretrainConfig(no_ar=True, no_diff=True)) == pt.Ablation(MaskSpec("none"), None, "mse")
    assert apply_ablation(PretrainConfig(mask_ratio=0.0)).decoder_mask == MaskSpec("causal")
    assert apply_ablation(PretrainConfig(mask_ratio=0.5)).decoder_mask == MaskSpec("partial_causal", 0.5)
    assert apply_ablation(PretrainConfig(decoder_layers=0)).loss == "mse"


@pytest.mark.parametrize("no_ar,no_diff", [(False, False), (True, False), (False, True), (True, True)])
def test_loss_matches_loop_oracle(rng, no_ar, no_diff):
    cfg = tiny_config(encoder_layers=2, no_ar=no_ar, no_diff=no_diff)
    model = build_model(cfg).double()
    sched = build_schedule("cosine", cfg.diffusion_steps)
    x = torch.tensor(windows(rng, 3, 24))
    steps = torch.randint(1, 101, (3, 6))
    eps = torch.randn(3, 6, 4, dtype=torch.float64)
    pred, clean = reconstruct(model, x, cfg, sched, torch.Generator(), steps=steps, eps=eps)
    loss = float(((pred - clean) ** 2).mean().detach())
    ab = apply_ablation(cfg)
    w = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    enc_mask = None if ab.encoder_mask.kind == "none" else np.tril(np.ones((6, 6), bool))
    dec_mask = None if no_ar else np.eye(6, dtype=bool)
    per = []
    for b in range(3):
        p, c = naive_reconstruction(
            w, x[b].numpy(), 4, 2, enc_mask, dec_mask, sched.gamma, steps[b].numpy(), eps[b].numpy(),
            use_decoder=not no_diff,
        )
        per.append(naive_squared_error(p, c))
    want = float(np.mean(per))
    assert abs(loss - want) / want <= 1e-6


def test_zero_residual_gives_zero_loss(rng, monkeypatch):
    cfg = tiny_config()
    model = build_model(cfg)
    x = torch.tensor(windows(rng, 2, 16), dtype=torch.float32)
    monkeypatch.setattr(model, "project", lambda z: pt.patchify(x, 4).patches)
    loss, _ = pretrain_step(model, x, cfg)
    assert loss == 0.0


def test_loss_non_negative(rng):
    for flags in [(False, False), (True, True)]:
        cfg = tiny_config(no_ar=flags[0], no_diff=flags[1])
        loss, _ = pretrain_step(build_model(cfg), torch.tensor(windows(rng, 4, 16), dtype=torch.float32), cfg)
        assert loss >= 0


def test_gradient_flow(rng):
    x = torch.tensor(windows(rng, 4, 16), dtype=torch.float32)
    cfg = tiny_config()
    _, g = pretrain_step(build_model(cfg), x, cfg)
    assert set(g) == {n for n, _ in build_model(cfg).named_parameters()}
    assert all(torch.isfinite(v).all() for v in g.values())
    # one visible key per query under self-only: decoder query/key maps cannot move the softmax
    inert = {n for n in g if n.startswith("decoder.") and (".q." in n or ".k." in n)}
    assert {k for k, v in g.items() if v.abs().sum() == 0} <= inert | {k for k in g if k.endswith("k.bias")}
    assert all(g[k].abs().sum() > 0 for k in g if k not in inert and not k.endswith("k.bias"))
    cfg = tiny_config(no_diff=True)
    _, g = pretrain_step(build_model(cfg), x, cfg)
    assert all(torch.all(v == 0) for k, v in g.items() if k.startswith("decoder."))
    assert all(v.abs().sum() > 0 for k, v in g.items() if not k.startswith("decoder."))


def fixed_loss(model, cfg, x, steps, eps):
    sched = build_schedule(cfg.scheduler, cfg.diffusion_steps)

    def loss():
        pred, clean = reconstruct(model, x, cfg, sched, torch.Generator(), steps=steps, eps=eps)
        return ((pred - clean) ** 2).mean()

    return loss


def test_gradient_matches_finite_differences(rng):
    cfg = tiny_config(seed=11)
    model = build_model(cfg).double()
    x = torch.tensor(windows(rng, 2, 16))
    steps = torch.randint(1, 101, (2, 4))
    eps = torch.randn(2, 4, 4, dtype=torch.float64)
    loss = fixed_loss(model, cfg, x, steps, eps)
    analytic = gradient(model, loss)
    numeric = finite_diff_gradient(dict(model.named_parameters()), loss, h=1e-3)
    a = np.concatenate([analytic[k].numpy().ravel() for k in numeric])
    n = np.concatenate([numeric[k].ravel() for k in numeric])
    sel = np.abs(a) > 1e-8
    rel = np.abs(a[sel] - n[sel]) / np.maximum(np.abs(a[sel]), np.abs(n[sel]))
    assert np.mean(rel <= 1e-4) >= 0.99


def test_shared_embedding_gradient_is_sum_of_paths(rng, monkeypatch):
    cfg = tiny_config(seed=4)
    model = build_model(cfg).double()
    x = torch.tensor(windows(rng, 2, 16))
    steps = torch.randint(1, 101, (2, 4))
    eps = torch.randn(2, 4, 4, dtype=torch.float64)
    loss = fixed_loss(model, cfg, x, steps, eps)
    total = gradient(model, loss)["embedding.weight"]

    W, b = model.embedding.weight, model.embedding.bias
    detached = lambda p: p @ W.detach().T + b.detach()
    live = lambda p: p @ W.T + b
    calls = []

    def embed(p):
        calls.append(1)
        # first call per forward is the clean path, second the noisy one
        return (detached if which[len(calls) % 2 == 1] else live)(p)

    monkeypatch.setattr(model, "embed", embed)
    which = {True: True, False: False}  # clean detached -> noisy-only contribution
    noisy_only = gradient(model, loss)["embedding.weight"]
    calls.clear()
    which = {True: False, False: True}
    clean_only = gradient(model, loss)["embedding.weight"]
    assert torch.allclose(noisy_only + clean_only, total, atol=1e-12)
    assert noisy_only.abs().sum() > 0 and clean_only.abs().sum() > 0


def test_checkpoint_roundtrip(tmp_path, rng):
    cfg = tiny_config()
    model = build_model(cfg)
    ck = Checkpoint.from_model(model, cfg.to_strings(), 7, cfg.seed)
    p1 = tmp_path / "a.tdrt"
    save_checkpoint(ck, p1)
    back = load_checkpoint(p1)
    assert back.epoch == 7 and back.config == ck.config
    for k in ck.params:
        assert back.params[k].tobytes() == ck.params[k].tobytes()
    p2 = tmp_path / "b.tdrt"
    save_checkpoint(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    m2, cfg2 = model_from_checkpoint(back)
    assert cfg2 == cfg
    x = torch.tensor(windows(rng, 2, 16), dtype=torch.float32)
    g = lambda: torch.Generator().manual_seed(0)
    sched = build_schedule("cosine", cfg.diffusion_steps)
    a = reconstruct(model, x, cfg, sched, g())[0]
    b = reconstruct(m2, x, cfg, sched, g())[0]
    assert torch.equal(a, b)


def test_checkpoint_layout(tmp_path):
    ck = Checkpoint({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"a": "1"}, 2, 9)
    raw = encode_checkpoint(ck)
    assert raw[:4] == b"TDRT"
    assert int.from_bytes(raw[4:8], "little") == 1
    n = int.from_bytes(raw[8:12], "little")
    assert raw[12:12 + n].decode() == "a=1\ncheckpoint.epoch=2\ncheckpoint.seed=9\n"
    rec = raw[12 + n:]
    assert int.from_bytes(rec[:4], "little") == 1 and rec[4:5] == b"w"
    assert int.from_bytes(rec[5:9], "little") == 2
    assert int.from_bytes(rec[9:17], "little") == 2 and int.from_bytes(rec[17:25], "little") == 3
    assert np.frombuffer(rec[25:], "<f4").tolist() == list(range(6))


def test_checkpoint_rejects_corruption():
    raw = encode_checkpoint(Checkpoint({"w": np.ones(3, np.float32)}, {}, 0, 0))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(raw[:-2])


def test_config_string_roundtrip():
    cfg = PretrainConfig(ff_dim=None, learning_rate=5e-4, no_ar=True, scheduler="linear")
    assert PretrainConfig.from_strings(cfg.to_strings()) == cfg


def test_loop_determinism_and_log(tmp_path, rng):
    x = windows(rng, 12, 16)
    cfg = tiny_config(epochs=3, batch_size=4, learning_rate=1e-3)
    a = pretrain_loop(x, cfg, loss_log=tmp_path / "loss.csv")
    b = pretrain_loop(x, cfg)
    assert a.losses == b.losses
    assert encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "# encoder_mask=causal decoder_mask=self_only loss=diff"
    assert lines[1] == "epoch,loss" and len(lines) == 5
    assert float(lines[2].split(",")[1]) == a.losses[0]


def test_loop_rejects_bad_input(rng):
    with pytest.raises(ValueError):
        PretrainConfig(epochs=0)
    with pytest.raises(ValueError):
        pretrain_loop(np.zeros((0, 16)), tiny_config())
    with pytest.raises(ValueError):
        pretrain_loop(np.zeros((2, 15)), tiny_config())


def test_divergence_keeps_last_good(rng, monkeypatch):
    x = windows(rng, 8, 16)
    real = pt.pretrain_loss
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        out = real(*a, **k)
        return out * float("nan") if calls["n"] > 2 else out

    monkeypatch.setattr(pt, "pretrain_loss", flaky)
    with pytest.raises(DivergenceError) as ei:
        pretrain_loop(x, tiny_config(epochs=5, batch_size=4))
    assert ei.value.checkpoint.epoch == 1
    assert len(ei.value.losses) == 1


def test_partial_decoder_mask_runs(rng):
    cfg = tiny_config(mask_ratio=0.5)
    loss, g = pretrain_step(build_model(cfg), torch.tensor(windows(rng, 2, 32), dtype=torch.float32), cfg)
    assert np.isfinite(loss)


def test_sum_reduction_scales_mean(rng):
    x = torch.tensor(windows(rng, 3, 16), dtype=torch.float32)
    a, _ = pretrain_step(build_model(tiny_config()), x, tiny_config())
    b, _ = pretrain_step(build_model(tiny_config()), x, tiny_config(loss_reduction="sum"))
    assert b == pytest.approx(a * 3 * 16, rel=1e-5)
    with pytest.raises(ValueError):
        tiny_config(loss_reduction="max")


def test_warmup_changes_only_early_epochs(rng):
    x = windows(rng, 8, 16)
    plain = pretrain_loop(x, tiny_config(epochs=2, batch_size=4, learning_rate=1e-2))
    warm = pretrain_loop(x, tiny_config(epochs=2, batch_size=4, learning_rate=1e-2, warmup_epochs=1))
    # identical initial weights and data, smaller first-epoch steps
    assert plain.losses[0] != warm.losses[0]
    zero = pretrain_loop(x, tiny_config(epochs=2, batch_size=4, learning_rate=1e-2, warmup_epochs=0))
    assert zero.losses == plain.losses
