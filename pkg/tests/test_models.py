import subprocess
import sys

import numpy as np
import pytest

from depthcl import data
from depthcl import diffcore as dc
from depthcl import models
from depthcl.errors import ContractError


CFG = models.DepthNetConfig(widths=(8, 12, 16), d_min=0.2, d_max=5.0)


def tiny_sample(h=16, w=16, seed=0, spec_name="rooms_dense"):
    spec = data.replace(data.preset(spec_name), height=h, width=w)
    return data.generate_domain(spec, count=1, seed=seed)[0]


def test_output_shape_matches_input():
    for h, w in [(16, 16), (24, 32), (48, 64)]:
        sample = tiny_sample(h, w)
        out = models.predict_depth(sample, models.init_params(CFG, 0), CFG)
        assert out.shape == (h, w)


def test_output_strictly_within_depth_bounds():
    sample = tiny_sample()
    out = models.predict_depth(sample, models.init_params(CFG, 1), CFG)
    assert out.min() > CFG.d_min
    assert out.max() < CFG.d_max


def test_rejects_indivisible_spatial_size():
    sample = tiny_sample(16, 16)
    bad = models.DepthNetConfig(widths=(8, 8, 8, 8, 8), d_min=0.2, d_max=5.0)  # needs /32
    with pytest.raises(ContractError):
        models.predict_depth(sample, models.init_params(bad, 0), bad)


def test_init_deterministic_and_seed_sensitive():
    a = models.init_params(CFG, 7).flatten()
    b = models.init_params(CFG, 7).flatten()
    c = models.init_params(CFG, 8).flatten()
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_forward_deterministic_across_processes():
    code = (
        "import numpy as np, json\n"
        "from depthcl import data, models\n"
        "spec = data.replace(data.preset('rooms_dense'), height=16, width=16)\n"
        "s = data.generate_domain(spec, 1, 3)[0]\n"
        "cfg = models.DepthNetConfig(widths=(8,12,16), d_min=0.2, d_max=5.0)\n"
        "out = models.predict_depth(s, models.init_params(cfg, 5), cfg)\n"
        "print(out.tobytes().hex()[:64], float(out.sum()))\n"
    )
    runs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)]
    assert runs[0] == runs[1]


def test_parameter_count_invariant_across_inputs():
    p = models.init_params(CFG, 0)
    n = p.size
    for seed in (1, 2):
        sample = tiny_sample(seed=seed)
        models.predict_depth(sample, p, CFG)
        assert p.size == n


def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = models.init_params(CFG, 123)
    path = tmp_path / "ckpt.npz"
    models.save_checkpoint(path, params, CFG, seed=123, extra={"note": "x"})
    loaded, cfg, seed, extra = models.load_checkpoint(path)
    assert cfg == CFG and seed == 123 and extra == {"note": "x"}
    assert loaded.names == params.names
    for n in params.names:
        np.testing.assert_array_equal(loaded[n], params[n])


def test_gradient_through_network_small_probe():
    from depthcl import losses

    sample = tiny_sample(16, 16, seed=4)
    params = models.init_params(CFG, 11)
    weights = losses.LossWeights()

    def fn(tensors):
        depth = models.depth_net_forward(sample.image, sample.sparse, sample.mask, tensors, CFG)
        return losses.total_loss(sample, depth, weights)

    rng = np.random.default_rng(0)
    probe = rng.choice(params.size, size=5, replace=False)
    err = dc.check_gradients(fn, params, step=1e-5, indices=probe)
    assert err < 1e-4


# -- representations ---------------------------------------------------------


def test_identical_samples_identical_representations():
    sample = tiny_sample(seed=5)
    p = models.init_params(CFG, 2)
    r1 = models.encode_representation(sample, p, CFG)
    r2 = models.encode_representation(sample, p, CFG)
    np.testing.assert_array_equal(r1, r2)
    assert r1.shape == (CFG.repr_dim,)


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_self_cosine_is_one():
    sample = tiny_sample(seed=6)
    r = models.encode_representation(sample, models.init_params(CFG, 2), CFG)
    assert cosine(r, r) == pytest.approx(1.0)


def test_cross_domain_similarity_below_within_domain():
    p = models.init_params(CFG, 3)
    spec_a = data.replace(data.preset("rooms_dense"), height=16, width=16)
    spec_b = data.replace(data.preset("terrain_scan"), height=16, width=16)
    da = data.generate_domain(spec_a, 12, seed=100)
    db = data.generate_domain(spec_b, 12, seed=200)
    cfg_a = models.DepthNetConfig(widths=CFG.widths, d_min=spec_a.d_min, d_max=spec_a.d_max)
    ra = [models.encode_representation(s, p, cfg_a) for s in da.samples]
    rb = [models.encode_representation(s, p, cfg_a) for s in db.samples]
    within = [cosine(x, y) for i, x in enumerate(ra) for y in ra[i + 1:]]
    cross = [cosine(x, y) for x in ra for y in rb]
    assert len(cross) >= 20
    assert np.mean(cross) < np.mean(within)
