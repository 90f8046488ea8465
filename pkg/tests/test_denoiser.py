import numpy as np
import pytest
import torch

from camodiff.control import ControlFeature
from camodiff.denoiser import ConditionalUNet, DenoiserConfig
from camodiff.errors import DimensionError, ValidationError
from camodiff.text_embed import HashTextEmbedder, TextConfig

from conftest import rng_tensor

TEXT = HashTextEmbedder(TextConfig(text_dim=32, max_tokens=8, seed=7))


def make_unet(in_channels=4, base=16, mults=(1, 2), size=16, text_dim=32,
              seed=2) -> ConditionalUNet:
    torch.manual_seed(seed)
    cfg = DenoiserConfig(in_channels=in_channels, base_channels=base,
                         channel_mults=mults, sample_size=size,
                         attn_resolutions=(size // 2,), text_dim=text_dim,
                         time_dim=32)
    return ConditionalUNet(cfg)


def test_output_shape_matches_input():
    net = make_unet()
    emb = TEXT.embed(["a moth on bark", "stones in a stream"])
    for shape in [(1, 4, 16, 16), (2, 4, 32, 32)]:
        x = rng_tensor(shape, sum(shape))
        out = net(x, 5, TEXT.embed(["a moth"] * shape[0]))
        assert out.shape == x.shape
    out = net(rng_tensor((2, 4, 16, 16), 40), 9, emb)
    assert out.shape == (2, 4, 16, 16)


@pytest.mark.parametrize("mults", [(1,), (1, 2), (1, 2, 4)])
def test_zero_control_equals_absent_control(mults):
    net = make_unet(mults=mults, size=16)
    x = rng_tensor((2, 4, 16, 16), 41)
    emb = TEXT.embed(["a moth on bark", "a frog on moss"])
    zero_ctrl = torch.zeros(2, 16 * mults[0], 16, 16)
    a = net(x, 3, emb, control=None)
    b = net(x, 3, emb, control=zero_ctrl)
    assert torch.equal(a, b)


def test_control_stage_and_shape_validation():
    net = make_unet()
    x = rng_tensor((1, 4, 16, 16), 42)
    raw = ControlFeature(torch.zeros(1, 16, 16, 16), stage="raw")
    with pytest.raises(ValidationError):
        net(x, 0, None, control=raw)
    with pytest.raises(DimensionError):
        net(x, 0, None, control=torch.zeros(1, 16, 8, 8))


def test_deterministic_in_eval_mode():
    net = make_unet().eval()
    x = rng_tensor((1, 4, 16, 16), 43)
    emb = TEXT.embed(["a crab on sand"])
    assert torch.equal(net(x, 7, emb), net(x, 7, emb))


def test_null_embedding_used_for_absent_and_empty_prompts():
    net = make_unet()
    x = rng_tensor((1, 4, 16, 16), 44)
    no_text = net(x, 2, None)
    empty = net(x, 2, TEXT.embed([""]))
    assert torch.equal(no_text, empty)
    # and a real prompt changes the output (projector weights are nonzero)
    assert not torch.equal(no_text, net(x, 2, TEXT.embed(["a mottled moth"])))


def test_zeroed_projectors_isolate_the_text_path():
    net = make_unet()
    with torch.no_grad():
        for name, p in net.named_parameters():
            if ".to_out." in name:
                p.zero_()
    x = rng_tensor((1, 4, 16, 16), 45)
    a = net(x, 4, TEXT.embed(["a moth on bark"]))
    b = net(x, 4, TEXT.embed(["an owl in snow at dusk"]))
    assert torch.equal(a, b)


def test_finite_difference_gradient_on_parameter_slice():
    net = make_unet(base=8, mults=(1, 2), size=8, seed=6).double()
    x = rng_tensor((1, 4, 8, 8), 46, dtype=torch.float64)
    emb = TEXT.embed(["a stone crab hides"])
    emb.data = emb.data.double()

    param = net.conv_in.weight
    net.zero_grad()
    net(x, 3, emb).mean().backward()
    autodiff = param.grad.view(-1)[:3].clone()

    h = 1e-5
    flat = param.data.view(-1)
    for k in range(3):
        orig = flat[k].item()
        flat[k] = orig + h
        up = float(net(x, 3, emb).mean().detach())
        flat[k] = orig - h
        down = float(net(x, 3, emb).mean().detach())
        flat[k] = orig
        central = (up - down) / (2 * h)
        assert abs(autodiff[k].item() - central) <= 1e-3 * max(abs(central), 1e-12)


# -- parameter tagging -----------------------------------------------------------

def test_param_tags_partition_and_content():
    net = make_unet()
    tags = net.param_tags()
    names = {n for n, _ in net.named_parameters()}
    assert set(tags) == names  # every parameter carries exactly one tag
    assert set(tags.values()) <= {"cross_attn_projectors", "frozen"}
    out_proj = {n for n in names if ".to_out." in n}
    conv = {n for n in names if "conv" in n and n.endswith("weight")}
    assert out_proj and all(tags[n] == "cross_attn_projectors" for n in out_proj)
    assert all(tags[n] == "frozen" for n in conv)


def test_trainable_fraction_below_quarter(tiny_pipeline):
    tags = tiny_pipeline.param_tags()
    sizes = {name: p.numel() for name, p in tiny_pipeline.named_parameters()}
    trainable = sum(sizes[n] for n, t in tags.items() if t != "frozen")
    total = sum(sizes.values())
    assert trainable / total < 0.25


def test_pipeline_policy_partition(tiny_pipeline):
    tags = tiny_pipeline.param_tags()
    paper = set(tiny_pipeline.trainable_parameters("paper_policy"))
    frozen = {n for n, t in tags.items() if t == "frozen"}
    all_names = {n for n, _ in tiny_pipeline.named_parameters()}
    assert paper | frozen == all_names
    assert paper & frozen == set()
    assert set(tiny_pipeline.trainable_parameters("full")) == all_names
    # controller and firm are fully inside the paper policy
    assert all(tags[n] == "controller_firm" for n in all_names
               if n.startswith(("controller.", "firm.")))
