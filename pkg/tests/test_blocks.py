import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gcpanet.blocks import (FIA, GCF, HA, SR, GCFBank, ShapeError, fia_forward, gcf_forward, ha_forward,
                            sr_forward, upsample)

import micro
import oracles

# frozen from the scalar oracle in tests/oracles.py on the micro.* parameter sets
FIA_EXPECTED = [  # [channel][y][x]
    [[0.747237856767823, 0.7304609873979753], [0.19236305185262603, 0.9791698850350962]],
    [[1.55183697401228, 1.5428721203708615], [0.6223895394574097, 1.913808772720017]],
]
SR_EXPECTED = [2.8831382903604443, 0.982991931820283]
HA_EXPECTED = [0.4863156995840628, 0.2665505436492466, 0.16690085138275873, 0.7598373180460426]
GCF_EXPECTED = [0.3909680397629968, 0.93335726093546]


def test_oracle_reproduces_frozen_values():
    for y in range(2):
        for x in range(2):
            f_l = [micro.FIA_F_L[c][y][x] for c in range(2)]
            got = oracles.fia_pixel(micro.FIA_P, f_l, micro.FIA_F_H, micro.FIA_F_G)
            assert got == pytest.approx([FIA_EXPECTED[c][y][x] for c in range(2)], abs=1e-15)
    assert oracles.sr_pixel(micro.SR_P, micro.SR_IN) == pytest.approx(SR_EXPECTED, abs=1e-15)
    assert oracles.ha_pixel(micro.HA_P, micro.HA_IN) == pytest.approx(HA_EXPECTED, abs=1e-15)
    assert oracles.gcf_pixel(micro.GCF_P, micro.GCF_IN) == pytest.approx(GCF_EXPECTED, abs=1e-15)


class TestMicroCases:
    def test_fia(self):
        m, (f_l, f_h, f_g) = micro.fia_micro()
        out = fia_forward(f_l, f_h, f_g, m)
        torch.testing.assert_close(out[0], torch.tensor(FIA_EXPECTED, dtype=torch.float64), atol=1e-12, rtol=0)

    def test_sr(self):
        m, x = micro.sr_micro()
        torch.testing.assert_close(sr_forward(x, m).flatten(), torch.tensor(SR_EXPECTED, dtype=torch.float64),
                                   atol=1e-12, rtol=0)

    def test_ha(self):
        m, x = micro.ha_micro()
        torch.testing.assert_close(ha_forward(x, m).flatten(), torch.tensor(HA_EXPECTED, dtype=torch.float64),
                                   atol=1e-12, rtol=0)

    def test_gcf(self):
        m, x = micro.gcf_micro()
        torch.testing.assert_close(m(x).flatten(), torch.tensor(GCF_EXPECTED, dtype=torch.float64),
                                   atol=1e-12, rtol=0)


class TestShapes:
    def test_fia_full_width_sizes(self):
        m = FIA(512, 256)
        out = m(torch.randn(1, 512, 40, 40), torch.randn(1, 256, 20, 20), torch.randn(1, 256, 20, 20))
        assert out.shape == (1, 256, 40, 40)

    def test_sr(self):
        assert SR(256)(torch.randn(2, 256, 20, 20)).shape == (2, 256, 20, 20)

    def test_ha(self):
        assert HA(2048)(torch.randn(1, 2048, 10, 10)).shape == (1, 256, 10, 10)

    def test_gcf(self):
        bank = GCFBank(2048, 256)
        assert gcf_forward(torch.randn(1, 2048, 10, 10), 2, bank).shape == (1, 256, 10, 10)

    @settings(max_examples=15, deadline=None)
    @given(b=st.integers(1, 2), h=st.integers(1, 4), w=st.integers(1, 4), low=st.integers(1, 6),
           d=st.integers(1, 6), g_factor=st.sampled_from([1, 2]), top=st.integers(2, 8))
    def test_shape_algebra(self, b, h, w, low, d, g_factor, top):
        # f_h is h x w, f_l is 2h x 2w, f_g divides f_l by 2 * g_factor
        torch.manual_seed(0)
        f_l = torch.randn(b, low, 2 * h * g_factor, 2 * w * g_factor)
        f_h = torch.randn(b, d, h * g_factor, w * g_factor)
        f_g = torch.randn(b, d, h, w)
        assert FIA(low, d).eval()(f_l, f_h, f_g).shape == (b, d, 2 * h * g_factor, 2 * w * g_factor)
        assert SR(low, d).eval()(f_l).shape == (b, d, *f_l.shape[-2:])
        assert HA(low, d, reduction=2).eval()(f_l).shape == (b, d, *f_l.shape[-2:])
        x = torch.randn(b, top, h, w)
        assert GCF(top, d, reduction=4).eval()(x).shape == (b, d, h, w)

    def test_fia_rejects_mismatched_high_level(self):
        m = FIA(8, 4)
        with pytest.raises(ShapeError, match=r"f_h: expected shape \[1, 4, 4, 4\]"):
            m(torch.randn(1, 8, 8, 8), torch.randn(1, 4, 3, 3), torch.randn(1, 4, 4, 4))

    def test_fia_rejects_wrong_low_channels(self):
        with pytest.raises(ShapeError, match="f_l"):
            FIA(8, 4)(torch.randn(1, 7, 8, 8), torch.randn(1, 4, 4, 4), torch.randn(1, 4, 4, 4))

    def test_sr_rejects_wrong_channels(self):
        with pytest.raises(ShapeError, match="f_in"):
            SR(8, 4)(torch.randn(1, 5, 4, 4))

    def test_gcf_invalid_stage(self):
        with pytest.raises(ValueError, match="invalid GCF stage"):
            GCFBank(8, 4)(torch.randn(1, 8, 2, 2), 4)


class TestIdentities:
    def test_fia_zero_high_and_global_gives_zero(self):
        torch.manual_seed(1)
        m = FIA(6, 4).eval()
        for conv in (m.conv2, m.conv3, m.conv4):
            torch.nn.init.zeros_(conv.bias)
        out = m(torch.randn(1, 6, 8, 8), torch.zeros(1, 4, 4, 4), torch.zeros(1, 4, 4, 4))
        assert torch.count_nonzero(out) == 0

    @pytest.mark.parametrize("zeroed, branch", [("f_h", "hl"), ("f_g", "gl")])
    def test_fia_branch_annihilation(self, zeroed, branch):
        torch.manual_seed(2)
        m = FIA(6, 4)  # train mode, random weights
        torch.nn.init.zeros_(m.conv2.bias if zeroed == "f_h" else m.conv4.bias)
        inputs = {"f_l": torch.randn(2, 6, 8, 8), "f_h": torch.randn(2, 4, 4, 4), "f_g": torch.randn(2, 4, 2, 2)}
        inputs[zeroed] = torch.zeros_like(inputs[zeroed])
        _, branches = m(**inputs, return_branches=True)
        assert torch.count_nonzero(branches[branch]) == 0
        other = "gl" if branch == "hl" else "hl"
        assert torch.count_nonzero(branches[other]) > 0

    def test_sr_reduces_to_relu(self):
        torch.manual_seed(3)
        m = SR(256, 256).double().eval()
        with torch.no_grad():
            torch.nn.init.dirac_(m.conv6[0].weight)
            m.conv6[1].eps = 0.0
            m.conv_w.weight.zero_()
            m.conv_w.bias.fill_(1.0)
            m.conv_b.weight.zero_()
            m.conv_b.bias.zero_()
        x = torch.randn(2, 256, 5, 5, dtype=torch.float64)
        assert torch.equal(m(x), torch.relu(x))

    def test_ha_zero_logits_halves(self):
        torch.manual_seed(4)
        m = HA(32, 16, reduction=4)
        with torch.no_grad():
            m.fc2.weight.zero_()
            m.fc2.bias.zero_()
        out, parts = m(torch.randn(2, 32, 6, 6), return_parts=True)
        assert torch.all(parts["y"] == 0.5)
        assert torch.equal(out, 0.5 * parts["F1"])

    def test_gcf_constant_map_pools_to_constant(self):
        torch.manual_seed(5)
        m = GCF(2048, 256)
        x = torch.randn(1, 2048, 10, 10)
        x[0, 7] = 0.75
        x[0, 100] = -2.5
        _, parts = m(x, return_parts=True)
        assert parts["f_gap"][0, 7].item() == 0.75
        assert parts["f_gap"][0, 100].item() == -2.5


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2 ** 16), h=st.integers(2, 5), w=st.integers(2, 5))
def test_channel_weighting_is_uniform_per_channel(seed, h, w):
    torch.manual_seed(seed)
    x = torch.randn(2, 12, h, w, dtype=torch.float64)
    for block in (HA(12, 8, reduction=2).double(), GCF(12, 8, reduction=2).double()):
        out, parts = block(x, return_parts=True)
        pre = parts["F1"] if "F1" in parts else parts["pre"]
        nz = pre != 0
        ratio = torch.where(nz, out / torch.where(nz, pre, torch.ones_like(pre)), torch.nan)
        y = parts["y"][:, :, None, None].expand_as(ratio)
        assert torch.allclose(ratio[nz], y[nz], rtol=1e-12, atol=0)


def test_upsample_replicates_single_pixel():
    x = torch.tensor([[[[3.5]], [[-1.0]]]])
    out = upsample(x, (4, 6))
    assert torch.equal(out, x.expand(1, 2, 4, 6))


def test_blocks_deterministic():
    torch.manual_seed(6)
    m = FIA(6, 4)
    args = (torch.randn(2, 6, 8, 8), torch.randn(2, 4, 4, 4), torch.randn(2, 4, 2, 2))
    assert torch.equal(m(*args), m(*args))
    bank = GCFBank(6, 4)
    x = torch.randn(2, 6, 4, 4)
    assert torch.equal(bank(x, 1), bank(x, 1))


def test_gcf_shared_mode_reuses_parameters():
    shared = GCFBank(8, 4, shared=True).eval()
    distinct = GCFBank(8, 4).eval()
    x = torch.randn(1, 8, 3, 3)
    assert torch.equal(shared(x, 1), shared(x, 3))
    assert not torch.equal(distinct(x, 1), distinct(x, 3))
    assert sum(p.numel() for p in distinct.parameters()) == 3 * sum(p.numel() for p in shared.parameters())


def test_finite_outputs():
    torch.manual_seed(7)
    out = FIA(6, 4)(torch.randn(2, 6, 8, 8) * 100, torch.randn(2, 4, 4, 4), torch.randn(2, 4, 4, 4))
    assert torch.isfinite(out).all()
