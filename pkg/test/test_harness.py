import glob
import os
import numpy as np
import pandas as pd
import pytest
import yaml
from src.__main__ import main
from src.harness import *

SCENARIO_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'scenarios')
SCENARIO_PATHS = sorted(glob.glob(os.path.join(SCENARIO_DIR, '*.yaml')))


def scenario_path(name):
    return os.path.join(SCENARIO_DIR, f'{name}.yaml')


def raw_scenario(name):
    with open(scenario_path(name), 'r', encoding='utf-8') as file:
        return yaml.safe_load(file)


def write_scenario(folder, name, raw):
    path = os.path.join(str(folder), f'{name}.yaml')
    with open(path, 'w', encoding='utf-8') as file:
        yaml.safe_dump(raw, file)
    return path


class TestLoadScenario:
    def test_yaml_error_position(self):
        with pytest.raises(ScenarioError) as error:
            load_scenario_text('name: broken\ntask: [forward\ngrid: {dim: 1}\n', 'broken.yaml')
        assert error.value.line is not None and error.value.line >= 2
        assert 'broken.yaml' in str(error.value)

    def test_top_level_mapping(self):
        with pytest.raises(ScenarioError):
            load_scenario_text('- forward\n- dtn\n')

    @pytest.mark.parametrize('path', SCENARIO_PATHS, ids=os.path.basename)
    def test_shipped_scenarios_valid(self, path):
        scenario = parse_scenario(path)
        assert scenario.name == os.path.splitext(os.path.basename(path))[0]


class TestOverrides:
    raw = {'solver': {'tol': 1e-10}, 'grid': {'points': 64}}

    def test_dotted_keys(self):
        result = apply_overrides(self.raw, ['solver.tol=1e-14', 'solver.max_iter=5', 'grid.points=32'])
        assert result['solver'] == {'tol': 1e-14, 'max_iter': 5}
        assert result['grid']['points'] == 32
        assert self.raw['solver']['tol'] == 1e-10

    def test_new_section(self):
        assert apply_overrides(self.raw, ['recovery.tau=0.01'])['recovery'] == {'tau': 0.01}

    def test_enum_text_kept(self):
        assert apply_overrides(self.raw, ['solver.method=cg'])['solver']['method'] == 'cg'

    @pytest.mark.parametrize('item', ['solver.tol', '=3', 'solver.tol.value=1'])
    def test_malformed(self, item):
        with pytest.raises(ScenarioError):
            apply_overrides(self.raw, [item])


class TestValidation:
    def invariant(self, raw):
        with pytest.raises(ScenarioValidationError) as error:
            Scenario(raw, 'test').validate()
        return error.value.invariant

    def test_probe_order(self):
        raw = raw_scenario('dtn_probe')
        raw['probe']['terms'][1]['order'] = 2.0
        assert self.invariant(raw) == 'probe-order'

    def test_missing_sections(self):
        raw = raw_scenario('recover_q_roundtrip')
        del raw['potential']
        assert self.invariant(raw) == 'task-fields'

    def test_missing_task(self):
        raw = raw_scenario('minimal_forward')
        del raw['task']
        assert self.invariant(raw) == 'task-fields'

    def test_unknown_section(self):
        raw = raw_scenario('minimal_forward')
        raw['plotting'] = {'colour': 'red'}
        assert self.invariant(raw) == 'known-sections'

    def test_unknown_solver_key(self):
        raw = raw_scenario('minimal_forward')
        raw['solver']['preconditioner'] = 'ilu'
        assert self.invariant(raw) == 'known-keys'

    def test_omega_outside_box(self):
        raw = raw_scenario('minimal_forward')
        raw['omega']['half_widths'] = [4.0]
        assert self.invariant(raw) == 'omega-strictly-interior'

    def test_empty_omega(self):
        raw = raw_scenario('minimal_forward')
        raw['omega'] = {'shape': 'box', 'center': [0.05], 'half_widths': [0.01]}
        assert self.invariant(raw) == 'omega-nonempty'

    def test_window_overlaps_omega(self):
        raw = raw_scenario('recover_q_window')
        raw['window']['center'] = [1.0]
        assert self.invariant(raw) == 'window-in-exterior'

    def test_window_required(self):
        raw = raw_scenario('recover_q_window')
        del raw['window']
        assert self.invariant(raw) == 'window-required'

    def test_alpha_term_range(self):
        raw = raw_scenario('recover_alpha_roundtrip')
        raw['recovery']['alpha_term'] = 2
        assert self.invariant(raw) == 'alpha-term'

    def test_integer_top_order(self):
        raw = raw_scenario('minimal_forward')
        raw['operator']['terms'][0]['order'] = 1.0
        assert self.invariant(raw) == 'operator-terms'

    def test_ellipticity(self):
        raw = raw_scenario('minimal_forward')
        raw['operator']['terms'][0]['gamma'] = [[1.0, 0.0], [0.0, -1.0]]
        raw['grid']['dim'] = 2
        raw['grid']['points'] = 16
        raw['omega'] = {'shape': 'ball', 'center': [0.0, 0.0], 'radius': 1.0}
        assert self.invariant(raw) == 'ellipticity'

    def test_string_numbers(self):
        raw = raw_scenario('minimal_forward')
        raw['solver']['tol'] = '1e-10'
        assert Scenario(raw, 'test').solver_params().tol == 1e-10

    def test_non_numeric(self):
        raw = raw_scenario('minimal_forward')
        raw['solver']['tol'] = 'small'
        assert self.invariant(raw) == 'numeric'

    def test_bad_expression(self):
        raw = raw_scenario('recover_q_roundtrip')
        raw['potential'] = '1 + foo'
        with pytest.raises(ExpressionError) as error:
            Scenario(raw, 'test').validate()
        assert error.value.column == 5


class TestRunScenario:
    def test_minimal_forward(self, tmp_path):
        record = run_scenario(parse_scenario(scenario_path('minimal_forward')), str(tmp_path))
        assert record.passed
        assert record.error is None
        assert {'omega.csv', 'u.pfl', 'u.csv', 'solution.json'} <= set(record.outputs)
        assert record.metrics['residual_interior'] <= 1e-8
        u = read_field_binary(str(tmp_path / 'u.pfl'))
        assert u.grid == make_grid(1, np.pi, 64)
        stored = load_run_record(str(tmp_path))
        assert stored.outputs == record.outputs
        assert 'timings' not in read_json(str(tmp_path / RECORD_FILE))

    def test_exterior_values_kept(self, tmp_path):
        scenario = parse_scenario(scenario_path('minimal_forward'))
        run_scenario(scenario, str(tmp_path))
        grid = scenario.build_grid()
        omega = scenario.build_omega(grid)
        f = scenario.exterior_data(grid, omega, None)
        u = read_field_binary(str(tmp_path / 'u.pfl'))
        assert np.array_equal(u.values[~omega.mask], f.values[~omega.mask])

    def test_deterministic(self, tmp_path):
        scenario = parse_scenario(scenario_path('minimal_forward'))
        first = run_scenario(scenario, str(tmp_path / 'first'))
        second = run_scenario(scenario, str(tmp_path / 'second'))
        assert first.outputs == second.outputs
        with open(tmp_path / 'first' / RECORD_FILE, 'rb') as a, open(tmp_path / 'second' / RECORD_FILE, 'rb') as b:
            assert a.read() == b.read()

    def test_timings(self, tmp_path):
        run_scenario(parse_scenario(scenario_path('minimal_forward')), str(tmp_path), timings=True)
        assert read_json(str(tmp_path / RECORD_FILE))['timings']['total_seconds'] >= 0

    def test_convergence_failure_captured(self, tmp_path):
        scenario = parse_scenario(scenario_path('minimal_forward'),
                                  ['solver.method=cg', 'solver.max_iter=1', 'solver.tol=1e-14'])
        record = run_scenario(scenario, str(tmp_path))
        assert not record.passed
        assert record.error.startswith('ConvergenceError')
        assert read_json(str(tmp_path / RECORD_FILE))['passed'] is False

    def test_failed_assertion(self, tmp_path):
        scenario = parse_scenario(scenario_path('minimal_forward'), ['assertions.residual_max=0'])
        record = run_scenario(scenario, str(tmp_path))
        assert record.error is None
        assert not record.assertions['residual_max']['passed']
        assert not record.passed

    @pytest.mark.parametrize('path', SCENARIO_PATHS, ids=os.path.basename)
    def test_shipped_scenarios_pass(self, path, tmp_path):
        record = run_scenario(parse_scenario(path), str(tmp_path))
        assert record.error is None
        assert record.passed, record.assertions

    def test_ucp_seed_recorded(self, tmp_path):
        record = run_scenario(parse_scenario(scenario_path('ucp_suite')), str(tmp_path), seed=3)
        reports = read_json(str(tmp_path / 'ucp_reports.json'))['reports']
        assert record.seed == 3
        assert all(report['seed'] == 3 for report in reports)
        assert len(record.metrics['min_gaps']) == 3 * 7

    def test_ucp_sweeps_every_admissible_operator(self, tmp_path):
        scenario = parse_scenario(scenario_path('ucp_suite'))
        record = run_scenario(scenario, str(tmp_path))
        statuses = record.metrics['admissibility_statuses']
        assert len(statuses) == len(scenario.suite_operators(scenario.build_grid()))
        assert AdmissibilityStatus.NOT_ESTABLISHED.value not in statuses
        assert all(gap > 0 for gap in record.metrics['min_gaps'])
        reports = read_json(str(tmp_path / 'ucp_reports.json'))['reports']
        labels = {r['operator'] for r in reports if r['context'] == ProbeContext.INTERIOR_GAP.value}
        assert labels == set(range(len(statuses)))

    @pytest.mark.parametrize('name, points', [('forward_manufactured_1d', 256), ('forward_manufactured_2d', 32)])
    def test_manufactured_scenarios(self, name, points):
        scenario = parse_scenario(scenario_path(name))
        grid = scenario.build_grid()
        assert grid.points_per_axis == points
        assert scenario.operator(grid).orders == [0.5, 1.5]
        assert scenario.potential(grid, scenario.build_omega(grid)) is not None

    def test_manufactured_error_is_l2_ratio(self, tmp_path):
        record = run_scenario(parse_scenario(scenario_path('forward_manufactured_1d')), str(tmp_path))
        u = read_field_binary(str(tmp_path / 'u.pfl'))
        exact = read_field_binary(str(tmp_path / 'u_exact.pfl'))
        expected = (u - exact).l2_norm() / exact.l2_norm()
        assert record.metrics['manufactured_error'] == pytest.approx(expected, rel=1e-12, abs=1e-300)
        assert record.metrics['manufactured_error'] <= 1e-8


class TestAssertions:
    test_map = {
        ('rel_error_max', 1e-6, 1e-7): True,
        ('rel_error_max', 1e-6, 1e-5): False,
        ('coverage_min', 0.5, 0.75): True,
        ('coverage_min', 0.5, 0.25): False,
        ('rel_error_max', (1e-4, None), (1e-5, 3.0)): True,
        ('rel_error_max', (1e-4, 1e-4), (1e-5, 3.0)): False,
        ('statuses', ('example2',), ('ADMISSIBLE_EXAMPLE2',)): False,
        ('statuses', ('admissible_example2',), ('ADMISSIBLE_EXAMPLE2',)): True,
        ('all_nondegenerate', True, False): False,
        ('residual_max', 1e-8, None): False,
    }

    @pytest.mark.parametrize('key', test_map.keys())
    def test_check(self, key):
        name, limit, value = key
        limit = list(limit) if isinstance(limit, tuple) else limit
        value = list(value) if isinstance(value, tuple) else value
        metrics = {ASSERTIONS[name][0]: value}
        assert evaluate_assertions({name: limit}, metrics)[name]['passed'] == TestAssertions.test_map[key]


class TestPlotData:
    def test_recover_q_series(self, tmp_path):
        run_scenario(parse_scenario(scenario_path('recover_q_roundtrip')), str(tmp_path))
        paths = emit_plot_data(str(tmp_path))
        assert [os.path.basename(p) for p in paths] == ['q_vs_estimate.csv']
        frame = pd.read_csv(paths[0])
        assert list(frame.columns) == ['x', 'truth', 'estimate']
        assert np.allclose(frame['estimate'], frame['truth'], rtol=1e-4)

    def test_missing_output(self, tmp_path):
        run_scenario(parse_scenario(scenario_path('recover_q_roundtrip')), str(tmp_path))
        os.remove(tmp_path / 'q_hat.csv')
        with pytest.raises(MissingOutputError):
            emit_plot_data(str(tmp_path))
        assert not os.path.exists(tmp_path / PLOT_FOLDER)

    def test_missing_record(self, tmp_path):
        with pytest.raises(MissingOutputError):
            emit_plot_data(str(tmp_path))

    def test_linearization_series(self, tmp_path):
        record = run_scenario(parse_scenario(scenario_path('recover_taylor_quadratic')), str(tmp_path))
        paths = emit_plot_data(str(tmp_path))
        names = sorted(os.path.basename(p) for p in paths)
        assert names == ['linearization.csv', 'taylor_0.csv', 'taylor_1.csv', 'taylor_2.csv']
        frame = pd.read_csv(os.path.join(str(tmp_path), PLOT_FOLDER, 'linearization.csv'), dtype={'eps': str})
        assert len(frame) == 4
        assert frame['eps'].iloc[-1] == 'slope'
        assert frame['error'].iloc[-1] == pytest.approx(record.metrics['linearization_slope'])
        assert record.metrics['linearization_slope'] >= 1.9

    def test_ucp_series(self, tmp_path):
        run_scenario(parse_scenario(scenario_path('ucp_suite')), str(tmp_path))
        frame = pd.read_csv(emit_plot_data(str(tmp_path))[0])
        assert list(frame.columns) == ['operator', 'points', 'min_singular_value', 'floor', 'verdict']
        assert list(frame[frame['operator'] == 0]['points']) == [64, 128, 256]
        assert sorted(frame['operator'].unique()) == list(range(7))


class TestSuite:
    def test_run_suite(self, tmp_path):
        scenarios = tmp_path / 'scenarios'
        scenarios.mkdir()
        write_scenario(scenarios, 'good', raw_scenario('minimal_forward'))
        broken = raw_scenario('minimal_forward')
        del broken['omega']
        write_scenario(scenarios, 'broken', broken)
        summary = run_suite(str(scenarios), str(tmp_path / 'runs'))
        assert summary['good']['passed']
        assert not summary['broken']['passed']
        stored = read_json(str(tmp_path / 'runs' / SUITE_FILE))
        assert stored['passed'] is False

    def test_output_root_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert default_output_root() == str(tmp_path)
        monkeypatch.delenv(OUTPUT_ROOT_ENV)
        assert default_output_root() == DEFAULT_OUTPUT_ROOT


class TestCommandLine:
    def test_validate(self, capsys):
        assert main(['validate', scenario_path('minimal_forward')]) == 0
        assert 'valid' in capsys.readouterr().out

    def test_run_and_plot(self, tmp_path):
        out = str(tmp_path / 'run')
        assert main(['run', scenario_path('minimal_forward'), '--out', out]) == 0
        assert main(['plot-data', out]) == 0
        assert os.path.exists(os.path.join(out, PLOT_FOLDER, 'solution.csv'))

    def test_run_failure(self, tmp_path):
        code = main(['run', scenario_path('minimal_forward'), '--out', str(tmp_path),
                     '--tol-override', 'assertions.residual_max=0'])
        assert code == 1

    def test_invalid(self, tmp_path, capsys):
        raw = raw_scenario('minimal_forward')
        del raw['omega']
        assert main(['validate', write_scenario(tmp_path, 'broken', raw)]) == 2
        assert 'task-fields' in capsys.readouterr().err

    def test_default_output_root(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert main(['run', scenario_path('minimal_forward')]) == 0
        assert os.path.exists(tmp_path / 'minimal_forward' / RECORD_FILE)

    def test_suite(self, tmp_path):
        scenarios = tmp_path / 'scenarios'
        scenarios.mkdir()
        write_scenario(scenarios, 'minimal_forward', raw_scenario('minimal_forward'))
        assert main(['suite', str(scenarios), '--out', str(tmp_path / 'runs')]) == 0
