import json
import logging

import numpy as np
import pytest

from cola.helpers.config_helpers import load_output_template
from cola.verification import (
    check_contraction,
    check_merge_linearity,
    check_prop1,
    check_variant_matrix,
    check_whitened_equivalence,
    errors,
    run_all,
    variant_gradient_table,
    whitened_setup,
    whitener,
)


def test_run_all_passes():
    report = run_all(seed=0)
    assert report.passed, [check.name for check in report.checks if not check.passed]
    names = [check.name for check in report.checks]
    assert 'prop1_aux_gradient' in names
    assert 'merge_linearity_mlp' in names
    assert 'variant_matrix_mlp_unmerged' in names
    assert json.loads(report.to_json())['passed'] is True


@pytest.mark.parametrize('seed', range(20))
def test_aux_gradient_matches_backprop_across_seeds(seed):
    result = check_prop1(seed)
    assert result.passed
    assert result.max_rel <= 1e-10


def test_aux_gradient_check_covers_every_kind_and_batch_size():
    result = check_prop1(3)
    cases = {(case['kind'], case['batch_size']) for case in result.details['cases']}
    assert cases == {(kind, b) for kind in ('lowrank', 'linear', 'mlp') for b in (1, 7, 32)}


@pytest.mark.parametrize('kind', ['lowrank', 'linear', 'mlp'])
def test_variant_matrix(kind):
    table = variant_gradient_table(1, kind=kind)
    assert all(rel <= 1e-8 for _, rel in table['unmerged'])
    assert table['detached'][-1][1] <= 1e-8
    assert any(rel > 1e-3 for _, rel in table['detached'][:-1])
    if kind == 'mlp':
        assert 'merged' not in table
    else:
        assert all(rel <= 1e-8 for _, rel in table['merged'])
    checks = check_variant_matrix(1, kinds=[kind])
    assert all(check.passed for check in checks)
    assert len(checks) == len(table)


def test_variant_matrix_covers_every_kind():
    names = {check.name for check in check_variant_matrix(0)}
    assert 'variant_matrix_linear_merged' in names
    assert 'variant_matrix_mlp_detached' in names
    assert 'variant_matrix_mlp_merged' not in names
    assert len(names) == 8


def test_contraction_factor():
    result = check_contraction((16, 8), [0.1] * 50, seed=0)
    assert result.passed
    assert result.details['final_factor'] == pytest.approx(0.9**50, rel=1e-12)
    assert not result.details['regularized']


def test_unit_step_reaches_fixed_point():
    result = check_contraction((16, 8), [1.0], seed=2)
    assert result.details['final_factor'] == 0.0
    assert result.max_abs <= 1e-8


def test_no_inner_steps_leaves_full_residual():
    result = check_whitened_equivalence((16, 8), 0, 0.3, 0.5, seed=0)
    assert result.passed
    assert result.details['residual_factor'] == pytest.approx(1.0)
    assert result.details['closed_form_factor'] == 1.0


def test_whitened_equivalence_residual_shrinks_with_steps():
    few = check_whitened_equivalence((16, 8), 5, 0.3, 0.5, seed=0)
    many = check_whitened_equivalence((16, 8), 20, 0.3, 0.5, seed=0)
    assert few.passed and many.passed
    assert many.details['residual_factor'] < few.details['residual_factor']
    assert many.details['residual_factor'] <= many.details['exponential_bound']


def test_whitener_inverts_covariance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(100, 5))
    covariance = x.T @ x / 100
    u, regularized = whitener(covariance)
    assert not regularized
    np.testing.assert_allclose(u.T @ u @ covariance, np.eye(5), atol=1e-10)
    np.testing.assert_allclose(u, u.T)


def test_singular_covariance_is_regularized(caplog):
    with caplog.at_level(logging.WARNING, logger='cola.verification'):
        setup = whitened_setup((16, 4), seed=0, n_samples=8)
    assert setup.regularized
    assert any('singular' in message for message in caplog.messages)


def test_merge_linearity_by_kind():
    results = {result.name: result for result in check_merge_linearity(0)}
    assert results['merge_linearity_lowrank'].passed
    assert results['merge_linearity_linear'].passed
    mlp = results['merge_linearity_mlp']
    assert mlp.passed
    assert mlp.details['merge_rejected']
    assert mlp.details['linearity_residual'] > 1e-3


def test_errors_helper():
    assert errors(np.ones(3), np.ones(3)) == (0.0, 0.0)
    assert errors(np.array([1.0, 3.0]), np.array([1.0, 2.0])) == (1.0, 0.5)


def test_render_with_packaged_template():
    report = run_all(seed=0)
    text = report.render(load_output_template('verify_report'))
    assert text.startswith('# Verification report')
    assert f"Status: PASSED ({len(report.checks)}/{len(report.checks)} checks passed)" in text
    assert text.count('PASS  ') == len(report.checks)
