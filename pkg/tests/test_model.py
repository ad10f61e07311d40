import itertools

import numpy as np
import pytest
import torch

from vidformer.config import ABLATION_FLAGS, ConfigError, get_profile
from vidformer.model import VidFormer, count_params, hr_from_heads, init_params, load_checkpoint, param_store, save_checkpoint

# counted once from the layer shapes of the test profile, then frozen
TEST_PROFILE_PARAMS = 356_223


@pytest.fixture(scope="module")
def test_cfg():
    return get_profile("test")


@pytest.fixture(scope="module")
def micro_cfg():
    return get_profile("micro")


def test_test_profile_shapes(test_cfg):
    model = init_params(test_cfg)
    with torch.no_grad():
        r1, r2 = model(torch.rand(1, 3, 50, 32, 32))
    assert r1.shape == (1, 50) and r2.shape == (1, 50)


def test_parameter_count_is_frozen(test_cfg):
    assert count_params(init_params(test_cfg)) == TEST_PROFILE_PARAMS


def test_without_gtb_has_no_r2(test_cfg):
    model = init_params(test_cfg.replace(ablate=frozenset({"GTB"})))
    r1, r2 = model(torch.rand(1, 3, 50, 32, 32))
    assert r2 is None and r1.shape == (1, 50)


def test_profile_mismatch(test_cfg):
    with pytest.raises(ConfigError):
        init_params(test_cfg)(torch.rand(1, 3, 40, 32, 32))


def test_both_branches_off_rejected(test_cfg):
    with pytest.raises(ConfigError):
        test_cfg.replace(ablate=frozenset({"LCB", "GTB"}))


def test_determinism(micro_cfg):
    x = torch.rand(2, 3, 10, 16, 16)
    a = init_params(micro_cfg, seed=3)(x)
    b = init_params(micro_cfg, seed=3)(x)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_param_store_seeding(micro_cfg):
    s1, s2 = param_store(init_params(micro_cfg, 1)), param_store(init_params(micro_cfg, 1))
    s3 = param_store(init_params(micro_cfg, 2))
    assert list(s1) == list(s2)
    assert all(torch.equal(s1[k], s2[k]) for k in s1)
    assert not torch.equal(s1["embed.pos"], s3["embed.pos"])


def test_init_leaves_global_rng_alone(micro_cfg):
    torch.manual_seed(11)
    expected = torch.rand(3)
    torch.manual_seed(11)
    init_params(micro_cfg)
    assert torch.equal(torch.rand(3), expected)


def test_conv_init_statistics(test_cfg):
    model = init_params(test_cfg, seed=0)
    w = model.conv_stages[2].block.conv.weight
    fan_in = w[0].numel()
    assert abs(w.std().item() - np.sqrt(2 / fan_in)) < 0.05 * np.sqrt(2 / fan_in)
    assert torch.count_nonzero(model.conv_stages[2].block.conv.bias) == 0


def test_names_unique_and_reachable(test_cfg):
    model = init_params(test_cfg)
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert len({id(p) for p in model.parameters()}) == len(names)


def test_branch_order_is_irrelevant(micro_cfg):
    model = init_params(micro_cfg.replace(stage_widths=(8, 8)), seed=4)
    x = torch.rand(1, 3, 10, 16, 16)
    a = model(x, branch_order="conv_first")
    b = model(x, branch_order="trans_first")
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_stage_wiring_uses_previous_outputs(micro_cfg):
    """Stage k's bridges read X_T^(k-1) / X_C^(k-1), never stage-k outputs."""
    cfg = micro_cfg.replace(stage_widths=(8, 8))
    model = init_params(cfg, seed=0)
    seen = []
    model.tc_bridges[1].register_forward_hook(lambda m, inp, out: seen.append(("tc", inp[0].detach().clone())))
    model.ct_bridges[1].register_forward_hook(lambda m, inp, out: seen.append(("ct", inp[0].detach().clone())))
    x = torch.rand(1, 3, 10, 16, 16)
    with torch.no_grad():
        model(x)
        from vidformer.global_branch import cube_patchify
        x_c0 = model.stem(x)
        x_t0 = model.embed(cube_patchify(x, cfg.patch)[0])
        x_c1 = model.conv_stages[0](x_c0, model.tc_bridges[0](x_t0))
        x_t1 = model.trans_stages[0](x_t0, model.ct_bridges[0](x_c0), cfg.grid)
    got = dict(seen)
    assert torch.equal(got["tc"], x_t1) and torch.equal(got["ct"], x_c1)


def _allowed_flag_sets():
    for r in range(len(ABLATION_FLAGS) + 1):
        for combo in itertools.combinations(ABLATION_FLAGS, r):
            if not {"LCB", "GTB"} <= set(combo):
                yield frozenset(combo)


def test_every_allowed_flag_combination_is_shape_valid(micro_cfg):
    x = torch.rand(1, 3, 10, 16, 16)
    count = 0
    for flags in _allowed_flag_sets():
        r1, r2 = init_params(micro_cfg.replace(ablate=flags))(x)
        for r, branch in ((r1, "LCB"), (r2, "GTB")):
            if branch in flags:
                assert r is None
            else:
                assert r.shape == (1, 10)
        count += 1
    assert count == 2 ** 9 - 2 ** 7


def test_ga_ablation_is_identity_weighting(micro_cfg):
    model = init_params(micro_cfg.replace(ablate=frozenset({"GA"})), seed=0)
    stage = model.conv_stages[0]
    assert stage.spatial is None and stage.temporal is None
    x = torch.rand(1, 4, 10, 16, 16)
    assert torch.equal(stage.weight(x), x)


def test_bridge_ablation_equals_zero_bridge(micro_cfg):
    full = init_params(micro_cfg, seed=0)
    cut = init_params(micro_cfg.replace(ablate=frozenset({"C-TB", "T-CB"})), seed=0)
    cut.load_state_dict({k: v for k, v in full.state_dict().items() if "bridges" not in k})
    for br in list(full.ct_bridges) + list(full.tc_bridges):
        br.forward = (lambda orig: (lambda x: torch.zeros_like(orig(x))))(br.forward)
    x = torch.rand(1, 3, 10, 16, 16)
    with torch.no_grad():
        assert all(torch.equal(a, b) for a, b in zip(full(x), cut(x)))


class TestHrFromHeads:
    def test_mean_of_heads(self, monkeypatch):
        import vidformer.sigproc as sp
        values = iter([70.0, 74.0])
        monkeypatch.setattr(sp, "estimate_hr", lambda x, rate: next(values))
        assert hr_from_heads(np.zeros(3), np.zeros(3), 30) == 72.0

    def test_clean_sinusoids(self):
        t = np.arange(300) / 30
        s = np.sin(2 * np.pi * t)
        assert hr_from_heads(s, s, 30) == pytest.approx(60, abs=0.5)

    def test_fallback(self):
        t = np.arange(300) / 30
        s = np.sin(2 * np.pi * 1.5 * t)
        assert hr_from_heads(torch.tensor(s), None, 30) == pytest.approx(90, abs=0.5)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, micro_cfg):
        model = init_params(micro_cfg, seed=5)
        save_checkpoint(tmp_path / "m.pt", model)
        loaded, _ = load_checkpoint(tmp_path / "m.pt", micro_cfg)
        x = torch.rand(1, 3, 10, 16, 16)
        assert all(torch.equal(a, b) for a, b in zip(model(x), loaded(x)))

    def test_fingerprint_mismatch(self, tmp_path, micro_cfg):
        save_checkpoint(tmp_path / "m.pt", init_params(micro_cfg))
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "m.pt", micro_cfg.replace(embed_dim=32))


def test_paper_profile_meta_shapes():
    cfg = get_profile("paper")
    with torch.device("meta"):
        model = VidFormer(cfg)
        r1, r2 = model(torch.empty(2, 3, 250, 128, 128))
    assert cfg.num_patches == 640
    assert r1.shape == (2, 250) and r2.shape == (2, 250)
