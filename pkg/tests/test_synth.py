import numpy as np
import numpy.testing as npt
import pytest

from regrow.logistic import fit_pixel_batch, logistic_curve
from regrow.raster import step_month
from regrow.synth import SynthConfig, connected_blob, load_synth_config, synth_generate


def ratio_series(stack, truth, record):
    months = [step_month(record.start_month, t) for t in range(stack.t_len)]
    return stack.channel("NDVI") / truth.ref[months]


def test_deterministic_for_seed():
    cfg = SynthConfig(n_fires=3, sigma=0.05, dropout=0.1)
    cat1, stacks1, truths1 = synth_generate(cfg, seed=7)
    cat2, stacks2, truths2 = synth_generate(cfg, seed=7)
    assert [r.id for r in cat1] == [r.id for r in cat2]
    for rec in cat1:
        assert np.array_equal(stacks1[rec.id].data, stacks2[rec.id].data)
        assert np.array_equal(truths1[rec.id].k_true, truths2[rec.id].k_true)
    cat3, stacks3, _ = synth_generate(cfg, seed=8)
    assert not np.array_equal(stacks1[cat1[0].id].data, stacks3[cat3[0].id].data)


def test_noiseless_ratio_is_exact_logistic():
    cfg = SynthConfig(n_fires=2, sigma=0.0, dropout=0.0)
    catalog, stacks, truths = synth_generate(cfg, seed=1)
    for rec in catalog:
        tr = truths[rec.id]
        ratio = ratio_series(stacks[rec.id], tr, rec)
        t = np.arange(cfg.t_len, dtype=float)
        expect = logistic_curve(tr.L_true[None], tr.k_true[None], tr.t0_true[None], t[:, None, None])
        burned = tr.burn_mask
        npt.assert_allclose(ratio[:, burned], expect[:, burned], rtol=5e-6, atol=5e-7)
        npt.assert_allclose(ratio[:, ~burned], 1.0, rtol=5e-6)


def test_raw_index_ranges():
    cfg = SynthConfig(n_fires=3, sigma=0.05, dropout=0.1)
    catalog, stacks, _ = synth_generate(cfg, seed=5)
    for rec in catalog:
        stack = stacks[rec.id]
        for name in ("NDVI", "EVI"):
            vals = stack.channel(name)
            assert vals.min() >= -0.2 and vals.max() <= 1.0
        qa = stack.channel("QA")
        assert set(np.unique(qa)) <= {0.0, 2.0, 3.0}
        evi = stack.channel("EVI")
        npt.assert_allclose(evi, np.float32(0.9) * stack.channel("NDVI"), rtol=1e-6)


def test_truth_ranges():
    cfg = SynthConfig(n_fires=4)
    _, _, truths = synth_generate(cfg, seed=2)
    for tr in truths.values():
        assert tr.k_true.min() >= -1.2 and tr.k_true.max() <= 0.7
        assert tr.L_true.min() > 0 and tr.L_true.max() <= 2.0
        assert 0.4 <= tr.burn_mask.mean() <= 0.9


def test_blob_connected_and_sized():
    rng = np.random.default_rng(0)
    mask = connected_blob(rng, 30, 30, 0.6)
    assert abs(mask.mean() - 0.6) < 0.01
    # flood fill from any burned cell reaches every burned cell
    seen = np.zeros_like(mask)
    start = tuple(np.argwhere(mask)[0])
    stack = [start]
    seen[start] = True
    while stack:
        r, c = stack.pop()
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < 30 and 0 <= nc < 30 and mask[nr, nc] and not seen[nr, nc]:
                seen[nr, nc] = True
                stack.append((nr, nc))
    assert np.array_equal(seen, mask)


def test_noisy_refit_recovers_k():
    # spec example: n_fires=40 at sigma 0.05 -> median per-pixel refit error <= 0.05;
    # a deterministic fire subsample keeps the check fast
    cfg = SynthConfig(n_fires=40, sigma=0.05, dropout=0.0)
    catalog, stacks, truths = synth_generate(cfg, seed=0)
    errs = []
    for rec in catalog[:4]:
        tr = truths[rec.id]
        ratio = ratio_series(stacks[rec.id], tr, rec)
        rows, cols = np.nonzero(tr.burn_mask)
        sel = slice(0, 150)
        params, _, degen = fit_pixel_batch(ratio[:, rows[sel], cols[sel]].T)
        errs.append(np.abs(params[~degen, 1] - tr.k_true[rows[sel], cols[sel]][~degen]))
    median = np.median(np.concatenate(errs))
    assert median <= 0.05, f"median |dk| {median}"


def test_invalid_config():
    with pytest.raises(ValueError):
        synth_generate(SynthConfig(n_fires=0))
    with pytest.raises(ValueError):
        synth_generate(SynthConfig(sigma=-0.1))
    with pytest.raises(ValueError):
        synth_generate(SynthConfig(height=0))


def test_synth_config_file(tmp_path):
    path = tmp_path / "synth.cfg"
    path.write_text("n_fires=12\nsigma=0.02\nseed=9\n# comment\n")
    cfg = load_synth_config(path)
    assert cfg.n_fires == 12 and cfg.sigma == 0.02 and cfg.seed == 9
    bad = tmp_path / "bad.cfg"
    bad.write_text("nope=1\n")
    with pytest.raises(ValueError, match="unknown key"):
        load_synth_config(bad)
