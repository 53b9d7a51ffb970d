"""Checks on the reference hole-flanging run beyond the numbered criteria."""

import numpy as np

from hotform.properties import estimate_properties


def test_constant_disturbance_is_observable(pipeline):
    oc = pipeline["known"]
    start, end, level = 9.0, 11.0, 1000.0
    t = oc.with_d.t
    k = int(np.flatnonzero(t <= end + 1e-9)[-1])
    d_end = oc.with_d.d_hat[k, 0]
    assert abs(d_end - level) <= 0.2 * level
    assert abs(oc.with_d.d_hat[t < start, 0]).max() < 0.5 * level


def test_property_maps_agree(pipeline):
    oc = pipeline["known"]
    true = estimate_properties(oc.plant.q, oc.plant.t)
    est = estimate_properties(oc.with_d.q, oc.with_d.t)
    assert true.agreement(est) >= 0.95


def test_disturbance_estimation_never_raises_peak_error(pipeline):
    oc = pipeline["benefit"]
    assert oc.with_d.rmse.max() <= oc.without_d.rmse.max()
