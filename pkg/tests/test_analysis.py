import dataclasses
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bagrad.analysis import (ExperimentConfig, OracleDomainError, batch_snr, csv_text, fd_gradient,
                             final_mean_weights, isotonic_violations, medians, rel_error, run_experiment,
                             snr_db, to_rows, toy_weight_grad, toy_wls_solve)
from bagrad.synth import SynthConfig

vec = st.integers(2, 12).flatmap(lambda n: st.tuples(
    arrays(float, n, elements=st.floats(-10, 10)), arrays(float, n, elements=st.floats(0.05, 1.0))))


def test_toy_grad_frozen_values():
    g = toy_weight_grad([0.0, 0.0, 10.0], [1.0, 1.0, 1.0], 0.0)
    assert np.allclose(g, [-10 / 9, -10 / 9, 20 / 9], rtol=1e-15)


@given(vec, st.floats(-5, 5))
def test_toy_grad_matches_fd(data, f_gt):
    fhat, sigma = data
    f = toy_wls_solve(fhat, sigma)
    assume(abs(f - f_gt) > 1e-3 and np.ptp(fhat) > 1e-2)
    fd = fd_gradient(lambda s: abs(f_gt - toy_wls_solve(fhat, s)), sigma, 1e-7)
    assert rel_error(toy_weight_grad(fhat, sigma, f_gt), fd) < 1e-6


def test_toy_solve_rejects_zero_weights():
    with pytest.raises(ValueError):
        toy_wls_solve([1.0, 2.0], [0.0, 0.0])


def test_snr_metrics():
    assert snr_db([1.0, 0.0], [1.0, 0.0]) == math.inf
    assert snr_db([10.0, 0.0], [10.0, 1.0]) == pytest.approx(10.0)
    assert batch_snr([np.ones(3), np.ones(3)]) == math.inf
    assert batch_snr([np.array([1.0, 0.0]), np.array([3.0, 0.0])]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        batch_snr([np.ones(2)])


@given(arrays(float, 5, elements=st.floats(-3, 3)), st.floats(0.1, 10))
def test_batch_snr_scale_invariant(x, c):
    G = [x, x + 1, x - 0.5]
    assert batch_snr([c * g for g in G]) == pytest.approx(batch_snr(G), rel=1e-9)


def test_fd_gradient_domain_error():
    with pytest.raises(OracleDomainError):
        fd_gradient(lambda x: math.inf, np.zeros(2))


def test_isotonic_violations():
    assert isotonic_violations([1, 2, 3]) == 0
    assert isotonic_violations([1, 3, 2, 4]) == 1
    assert isotonic_violations([3, 2, 2], increasing=False) == 1


def _small(name, **kw):
    base = dict(name=name, sigmas=(0.0, 0.1, 0.4), seeds=(0, 1),
                scene=SynthConfig(n_frames=4, patches_per_frame=4))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.mark.parametrize("name", ["linearization", "interference-depth", "interference-pose"])
def test_sweeps_zero_noise_is_clean(name):
    pts = run_experiment(_small(name))
    at0 = [p for p in pts if p.level == 0.0]
    if name == "linearization":
        assert all(p.value == math.inf and p.sentinel for p in at0)
    else:
        assert all(p.value == 0.0 for p in at0)
    assert len(pts) == 3 * 2 * 2


def test_output_independent_of_jobs():
    cfg = _small("linearization")
    a = csv_text(to_rows(cfg.name, run_experiment(cfg, jobs=1)))
    b = csv_text(to_rows(cfg.name, run_experiment(cfg, jobs=2)))
    assert a == b


def test_weighted_snr_equal_without_outliers():
    cfg = ExperimentConfig(name="weighted-snr", seeds=(0,), batch_size=3,
                           scene=SynthConfig(n_frames=4, patches_per_frame=3, outlier_frac=0.0))
    pts = run_experiment(cfg)
    flow = [p.value for p in pts if p.tag == "flow"]
    wflow = [p.value for p in pts if p.tag == "weighted-flow"]
    assert abs(flow[0] - wflow[0]) <= 1e-12 * abs(flow[0])


def test_toy_experiment_arms():
    cfg = ExperimentConfig(name="toy-bias", seeds=(0, 1), toy_steps=100, record_every=25)
    pts = run_experiment(cfg)
    assert set(p.tag for p in pts) == {"unclipped", "clipped", "no-outliers"}
    levels, med = medians(pts, "unclipped")
    assert list(levels) == [0, 25, 50, 75, 100]
    assert len(final_mean_weights(pts, "clipped")) == 2


def test_toy_infinite_clip_is_bitwise_unclipped():
    cfg = ExperimentConfig(name="toy-bias", seeds=(3,), toy_steps=50, clip_min=-np.inf, clip_max=np.inf)
    pts = run_experiment(cfg)
    assert np.array_equal(final_mean_weights(pts, "clipped"), final_mean_weights(pts, "unclipped"))


def test_config_roundtrip():
    cfg = _small("interference-pose")
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"name": "linearization", "bogus": 1})
    with pytest.raises(ValueError):
        dataclasses.replace(cfg, name="other")


def test_csv_format():
    text = csv_text([("x", 0.1, "flow", 3, math.inf, 1)])
    assert text == "experiment,sigma_or_iter,loss_tag,seed,value,sentinel_flag\nx,0.1,flow,3,inf,1\n"
