from __future__ import annotations
import copy
import glob
import logging
import operator
import os
import time
from dataclasses import dataclass, field
from typing import Callable
import numpy as np
import pandas as pd
import yaml
from src import __version__
from src.expression import *
from src.inverse import *
from src.ucp import *
from src.utils import *

LOGGER = logging.getLogger(__name__)

OUTPUT_ROOT_ENV: str = 'POLYFRAC_OUTPUT_ROOT'
DEFAULT_OUTPUT_ROOT: str = 'runs'
RECORD_FILE: str = 'run_record.json'
SUITE_FILE: str = 'suite_summary.json'
PLOT_FOLDER: str = 'plot'

SECTIONS: frozenset[str] = frozenset({'name', 'task', 'seed', 'grid', 'omega', 'window', 'operator', 'probe',
                                      'potential', 'source', 'exterior', 'solver', 'newton', 'recovery', 'ucp',
                                      'admissibility', 'manufactured', 'assertions'})
REQUIRED_SECTIONS: dict[Task, tuple[str, ...]] = {
    Task.FORWARD: ('grid', 'omega', 'operator'),
    Task.DTN: ('grid', 'omega', 'operator', 'exterior'),
    Task.RECOVER_Q: ('grid', 'omega', 'operator', 'exterior', 'potential'),
    Task.RECOVER_ALPHA: ('grid', 'omega', 'operator', 'exterior'),
    Task.RECOVER_TAYLOR: ('grid', 'omega', 'operator', 'exterior', 'source'),
    Task.UCP_SUITE: ('grid', 'omega', 'ucp'),
    Task.ADMISSIBILITY: ('grid', 'operator'),
}
ASSERTIONS: dict[str, tuple[str, Callable[[any, any], bool]]] = {
    'rel_error_max': ('rel_error', operator.le),
    'residual_max': ('residual_interior', operator.le),
    'manufactured_error_max': ('manufactured_error', operator.le),
    'coverage_min': ('coverage', operator.ge),
    'linearization_slope_min': ('linearization_slope', operator.ge),
    'bound_ratio_max': ('bound_ratio', operator.le),
    'multiplier_residual_max': ('multiplier_residual_max', operator.le),
    'all_nondegenerate': ('all_nondegenerate', operator.eq),
    'statuses': ('statuses', operator.eq),
    'admissibility_statuses': ('admissibility_statuses', operator.eq),
}


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)


def _as_float(value: any, path: str) -> float:
    if isinstance(value, bool) or value is None:
        raise ScenarioValidationError('numeric', f'{path} must be a number, but received {value!r}')
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ScenarioValidationError('numeric', f'{path} must be a number, but received {value!r}') from None


def _as_int(value: any, path: str) -> int:
    number = _as_float(value, path)
    if number != int(number):
        raise ScenarioValidationError('integer', f'{path} must be an integer, but received {value!r}')
    return int(number)


def _as_bool(value: any, path: str) -> bool:
    if not isinstance(value, bool):
        raise ScenarioValidationError('boolean', f'{path} must be true or false, but received {value!r}')
    return value


def _as_floats(value: any, path: str) -> tuple[float, ...]:
    return tuple(_as_float(item, f'{path}[{i}]') for i, item in enumerate(np.atleast_1d(value).tolist()))


def _as_enum(enum_type: type[Enum], value: any, path: str) -> Enum:
    try:
        return enum_type(str(value).upper())
    except ValueError:
        allowed = [member.value.lower() for member in enum_type]
        raise ScenarioValidationError('known-values', f'{path}: {value!r} is not one of {allowed}') from None


def _constant(value: any, path: str) -> float:
    try:
        return parse_expression(value, 1).constant_value()
    except ExpressionError as error:
        raise ExpressionError(f'{path}: {error.reason}', error.expression, error.column) from error


def _build_params(cls: type[Params], spec: dict[str, any], path: str,
                  converters: dict[str, Callable[[any, str], any]]) -> Params:
    unknown = sorted(set(spec) - set(converters))
    if unknown:
        raise ScenarioValidationError('known-keys', f'{path}: unknown keys {unknown}')
    kwargs = {key: converters[key](value, f'{path}.{key}') for key, value in spec.items() if value is not None}
    return cls(**kwargs)


def load_scenario_text(text: str, source: str = '<string>') -> dict[str, any]:
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as error:
        mark = error.problem_mark or error.context_mark
        line, column = (mark.line + 1, mark.column + 1) if mark is not None else (None, None)
        raise ScenarioError(f'{source}: {error.problem or error}', line, column) from error
    except yaml.YAMLError as error:
        raise ScenarioError(f'{source}: {error}') from error
    if not isinstance(data, dict):
        raise ScenarioError(f'{source}: the top level of a scenario must be a mapping')
    return data


def apply_overrides(raw: dict[str, any], overrides: list[str] | tuple[str, ...]) -> dict[str, any]:
    """
    Apply dotted `section.key=value` overrides to a copy of the raw scenario mapping.
    """
    result = copy.deepcopy(raw)
    for item in overrides:
        key, separator, text = item.partition('=')
        if not separator or not key.strip():
            raise ScenarioError(f'Override {item!r} must have the form section.key=value')
        value = yaml.safe_load(text) if text.strip() else None
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        target = result
        parts = key.strip().split('.')
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ScenarioError(f'Override {item!r} descends into a non-mapping at {part!r}')
        target[parts[-1]] = value
    return result


class Scenario:
    """
    Validated scenario mapping with builders for the lattice objects a task needs. Builders take the grid
    explicitly so that sweeps can rebuild everything at another resolution.
    """
    def __init__(self, raw: dict[str, any], name: str | None = None, path: str | None = None) -> None:
        unknown = sorted(set(raw) - SECTIONS)
        if unknown:
            raise ScenarioValidationError('known-sections', f'Unknown sections {unknown}')
        if raw.get('task') is None:
            raise ScenarioValidationError('task-fields', 'Every scenario needs a task')
        self.raw: dict[str, any] = raw
        self.name: str = str(raw.get('name') or name or 'scenario')
        self.path: str | None = path
        self.task: Task = _as_enum(Task, raw['task'], 'task')
        self.seed: int = _as_int(raw.get('seed', 0), 'seed')

    @property
    def digest(self) -> str:
        return text_digest(to_json(self.raw))

    def has(self, key: str) -> bool:
        return self.raw.get(key) is not None

    def section(self, key: str) -> dict[str, any]:
        value = self.raw.get(key) or {}
        if not isinstance(value, dict):
            raise ScenarioValidationError('section-mapping', f'Section {key!r} must be a mapping')
        return dict(value)

    def field(self, grid: Grid, value: any, path: str) -> GridField:
        try:
            return evaluate_expression(value, grid)
        except ExpressionError as error:
            raise ExpressionError(f'{path}: {error.reason}', error.expression, error.column) from error

    def build_grid(self, points: int | None = None) -> Grid:
        spec = self.section('grid')
        dim = _as_int(spec.get('dim', 1), 'grid.dim')
        extent = _constant(spec.get('extent', 'pi'), 'grid.extent')
        n = points if points is not None else _as_int(spec.get('points', 64), 'grid.points')
        try:
            return make_grid(dim, extent, n)
        except ValueError as error:
            raise ScenarioValidationError('grid', str(error)) from error

    @staticmethod
    def region_spec(spec: dict[str, any], path: str) -> RegionSpec:
        shape = _as_enum(RegionShape, spec.get('shape', 'box'), f'{path}.shape')
        center = _as_floats(spec.get('center', 0.0), f'{path}.center')
        if shape == RegionShape.BALL:
            return RegionSpec.ball(center, _as_float(spec.get('radius'), f'{path}.radius'))
        widths = spec.get('half_widths', spec.get('half_width'))
        widths = _as_floats(widths, f'{path}.half_widths')
        if len(widths) == 1 and len(center) > 1:
            widths = widths * len(center)
        return RegionSpec.box(center, widths)

    def build_omega(self, grid: Grid) -> Region:
        spec = self.region_spec(self.section('omega'), 'omega')
        try:
            return define_region(grid, spec)
        except EmptyRegionError as error:
            raise ScenarioValidationError('omega-nonempty', str(error)) from error
        except ValueError as error:
            raise ScenarioValidationError('omega-strictly-interior', str(error)) from error

    def build_window(self, grid: Grid, omega: Region) -> Region | None:
        if not self.has('window'):
            return None
        spec = self.region_spec(self.section('window'), 'window')
        try:
            return window_region(grid, spec, omega)
        except ValueError as error:
            raise ScenarioValidationError('window-in-exterior', str(error)) from error

    @staticmethod
    def anisotropy(value: any, dim: int, path: str) -> AnisotropyMatrix:
        try:
            if value is None:
                return AnisotropyMatrix.identity(dim)
            if isinstance(value, list):
                return AnisotropyMatrix(np.array([_as_floats(row, f'{path}[{i}]') for i, row in enumerate(value)]))
            return AnisotropyMatrix.scalar(dim, _constant(value, path))
        except EllipticityError as error:
            raise ScenarioValidationError('ellipticity', f'{path}: {error}') from error

    def build_operator(self, grid: Grid, spec: dict[str, any], path: str,
                       role: OperatorRole = OperatorRole.FORWARD) -> PolyFractionalOperator:
        terms_spec = spec.get('terms')
        if not isinstance(terms_spec, list) or not terms_spec:
            raise ScenarioValidationError('operator-terms', f'{path}.terms must be a nonempty list')
        boundary = _as_enum(BoundaryType, spec.get('boundary', 'periodic'), f'{path}.boundary')
        bases = {}
        terms = []
        for i, term in enumerate(terms_spec):
            where = f'{path}.terms[{i}]'
            if not isinstance(term, dict):
                raise ScenarioValidationError('operator-terms', f'{where} must be a mapping')
            order = _as_float(term.get('order'), f'{where}.order')
            gamma = self.anisotropy(term.get('gamma'), grid.dim, f'{where}.gamma')
            backend_type = _as_enum(BackendType, term.get('backend', 'fourier_symbol'), f'{where}.backend')
            expression = parse_expression(term.get('coefficient', 1.0), grid.dim)
            coefficient = expression.constant_value() if expression.is_constant else expression.evaluate(grid)
            base = None
            if backend_type == BackendType.MATRIX_FUNCTION and order != 0:
                key = gamma.matrix.tobytes()
                if key not in bases:
                    bases[key] = assemble_elliptic(grid, gamma, boundary)
                base = bases[key]
            try:
                backend = make_backend(grid, gamma, order, backend_type, boundary, base)
            except ValueError as error:
                raise ScenarioValidationError('operator-terms', f'{where}: {error}') from error
            terms.append(PolyTerm(coefficient, backend))
        try:
            return PolyFractionalOperator(terms, role)
        except ValueError as error:
            raise ScenarioValidationError('operator-terms', f'{path}: {error}') from error

    def operator(self, grid: Grid, role: OperatorRole = OperatorRole.FORWARD) -> PolyFractionalOperator:
        return self.build_operator(grid, self.section('operator'), 'operator', role)

    def probe(self, grid: Grid) -> PolyFractionalOperator | None:
        if not self.has('probe'):
            return None
        return self.build_operator(grid, self.section('probe'), 'probe', OperatorRole.PROBE)

    def suite_probe(self, grid: Grid) -> PolyFractionalOperator:
        probe = self.probe(grid)
        return probe if probe is not None else self.operator(grid, OperatorRole.PROBE)

    def suite_operators(self, grid: Grid) -> list[PolyFractionalOperator]:
        """
        The suite probe followed by the extra operators listed under ucp.operators, all in the probe role.
        """
        specs = self.section('ucp').get('operators') or []
        if not isinstance(specs, list):
            raise ScenarioValidationError('operator-terms', 'ucp.operators must be a list of operator mappings')
        operators = [self.suite_probe(grid)]
        for i, spec in enumerate(specs):
            if not isinstance(spec, dict):
                raise ScenarioValidationError('operator-terms', f'ucp.operators[{i}] must be a mapping')
            operators.append(self.build_operator(grid, spec, f'ucp.operators[{i}]', OperatorRole.PROBE))
        return operators

    def potential(self, grid: Grid, omega: Region) -> GridField | None:
        if not self.has('potential'):
            return None
        return restrict_field(self.field(grid, self.raw['potential'], 'potential'), omega)

    def manufactured(self, grid: Grid) -> GridField | None:
        if not self.has('manufactured'):
            return None
        return self.field(grid, self.section('manufactured').get('solution'), 'manufactured.solution')

    def exterior_data(self, grid: Grid, omega: Region, window: Region | None) -> GridField:
        """
        Exterior datum f: an explicit expression or amplitude * gaussian(center, width), kept on the exterior of
        omega, or on the window only when `in_window` is set.
        """
        spec = self.section('exterior')
        if 'expression' in spec:
            values = self.field(grid, spec['expression'], 'exterior.expression')
        else:
            center = _as_floats(spec.get('center', 0.0), 'exterior.center')
            width = _as_float(spec.get('width', 0.3), 'exterior.width')
            amplitude = _as_float(spec.get('amplitude', 1.0), 'exterior.amplitude')
            text = f'{amplitude!r} * gaussian({", ".join(repr(c) for c in center)}, {width!r})'
            values = self.field(grid, text, 'exterior')
        if spec.get('in_window', False):
            if window is None:
                raise ScenarioValidationError('window-required', 'exterior.in_window needs a window section')
            return restrict_field(values, window)
        return restrict_field(values, complement_region(omega))

    def source(self, grid: Grid) -> TaylorSource:
        coefficients = self.section('source').get('coefficients')
        if not isinstance(coefficients, list) or not coefficients:
            raise ScenarioValidationError('source-coefficients', 'source.coefficients must be a nonempty list')
        return TaylorSource([self.field(grid, c, f'source.coefficients[{i}]') for i, c in enumerate(coefficients)])

    def solver_params(self) -> SolverParams:
        return _build_params(SolverParams, self.section('solver'), 'solver', {
            'method': lambda v, p: _as_enum(KrylovMethod, v, p), 'tol': _as_float, 'max_iter': _as_int,
            'symmetry_tol': _as_float, 'check_coercivity': _as_bool})

    def newton_params(self) -> NewtonParams:
        return _build_params(NewtonParams, self.section('newton'), 'newton', {
            'tol': _as_float, 'max_iter': _as_int, 'damping': _as_float, 'max_halvings': _as_int,
            'blowup': _as_float})

    def recovery_params(self) -> RecoveryParams:
        spec = self.section('recovery')
        spec.pop('alpha_term', None)
        return _build_params(RecoveryParams, spec, 'recovery', {'tau': _as_float, 'eps_schedule': _as_floats})

    def alpha_term(self) -> int:
        return _as_int(self.section('recovery').get('alpha_term', 0), 'recovery.alpha_term')

    def probe_params(self) -> ProbeParams:
        spec = self.section('ucp')
        return _build_params(ProbeParams, {'floor_factor': spec.get('floor_factor')}, 'ucp',
                             {'floor_factor': _as_float})

    def ucp_settings(self) -> dict[str, any]:
        spec = self.section('ucp')
        known = {'sweep', 'samples', 'sigma', 'sobolev', 'exterior_coefficient', 'floor_factor', 'operators'}
        unknown = sorted(set(spec) - known)
        if unknown:
            raise ScenarioValidationError('known-keys', f'ucp: unknown keys {unknown}')
        sweep = spec.get('sweep')
        sobolev = spec.get('sobolev')
        return {'sweep': None if sweep is None else [_as_int(n, 'ucp.sweep') for n in np.atleast_1d(sweep).tolist()],
                'samples': _as_int(spec.get('samples', 100), 'ucp.samples'),
                'sigma': _as_float(spec.get('sigma', 0.5), 'ucp.sigma'),
                'sobolev': None if sobolev is None else _as_floats(sobolev, 'ucp.sobolev'),
                'exterior_coefficient': spec.get('exterior_coefficient', 1.0)}

    def admissibility_params(self) -> AdmissibilityParams:
        spec = self.section('admissibility')
        spec.pop('candidates', None)
        return _build_params(AdmissibilityParams, spec, 'admissibility', {
            'gap_on': lambda v, p: _as_enum(GapCondition, v, p), 'integer_tol': _as_float})

    def admissibility_candidates(self, grid: Grid) -> list[PolyFractionalOperator]:
        candidates = [self.operator(grid, OperatorRole.PROBE)]
        for i, spec in enumerate(self.section('admissibility').get('candidates') or []):
            candidates.append(self.build_operator(grid, spec, f'admissibility.candidates[{i}]', OperatorRole.PROBE))
        return candidates

    def assertions(self) -> dict[str, any]:
        spec = self.section('assertions')
        unknown = sorted(set(spec) - set(ASSERTIONS))
        if unknown:
            raise ScenarioValidationError('known-keys', f'assertions: unknown keys {unknown}')
        return spec

    def validate(self) -> None:
        missing = [key for key in REQUIRED_SECTIONS[self.task] if not self.has(key)]
        if self.task == Task.FORWARD and not (self.has('exterior') or self.has('manufactured')):
            missing.append('exterior or manufactured')
        if self.task == Task.UCP_SUITE and not (self.has('operator') or self.has('probe')):
            missing.append('operator or probe')
        if missing:
            raise ScenarioValidationError('task-fields', f'Task {self.task.value.lower()} needs sections {missing}')
        grid = self.build_grid()
        omega = self.build_omega(grid) if self.has('omega') else None
        window = self.build_window(grid, omega) if omega is not None else None
        if self.task == Task.UCP_SUITE:
            self.suite_operators(grid)
            self.ucp_settings()
            self.probe_params()
        elif self.task == Task.ADMISSIBILITY:
            self.admissibility_candidates(grid)
            self.admissibility_params()
        else:
            P = self.operator(grid)
            probe = self.probe(grid)
            if probe is not None:
                try:
                    check_probe_pairing(P, probe)
                except ValueError as error:
                    raise ScenarioValidationError('probe-order', str(error)) from error
            self.potential(grid, omega)
            self.manufactured(grid)
            if self.has('exterior'):
                self.exterior_data(grid, omega, window)
            if self.task == Task.RECOVER_ALPHA and not 0 <= self.alpha_term() < len(P.terms):
                raise ScenarioValidationError('alpha-term', f'recovery.alpha_term must index one of the '
                                                            f'{len(P.terms)} operator terms')
            if self.task == Task.RECOVER_TAYLOR:
                self.source(grid)
                self.newton_params()
        self.solver_params()
        self.recovery_params()
        self.assertions()


def parse_scenario(path: str, overrides: list[str] | tuple[str, ...] = ()) -> Scenario:
    with open(path, 'r', encoding='utf-8') as file:
        text = file.read()
    raw = apply_overrides(load_scenario_text(text, path), overrides)
    name = os.path.splitext(os.path.basename(path))[0]
    scenario = Scenario(raw, name, path)
    scenario.validate()
    LOGGER.debug('Scenario %s validated (task %s)', scenario.name, scenario.task.value)
    return scenario


@dataclass
class RunRecord:
    scenario: str
    task: Task
    digest: str
    version: str
    seed: int
    outputs: dict[str, str] = field(default_factory=dict)
    assertions: dict[str, dict[str, any]] = field(default_factory=dict)
    metrics: dict[str, any] = field(default_factory=dict)
    error: str | None = None
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.error is None and all(result['passed'] for result in self.assertions.values())

    def to_dict(self, include_timings: bool = False) -> dict[str, any]:
        data = {'scenario': self.scenario, 'task': self.task.value, 'digest': self.digest, 'version': self.version,
                'seed': self.seed, 'outputs': self.outputs, 'assertions': self.assertions, 'metrics': self.metrics,
                'error': self.error, 'passed': self.passed}
        if include_timings:
            data['timings'] = self.timings
        return data

    @staticmethod
    def from_dict(data: dict[str, any]) -> RunRecord:
        return RunRecord(data['scenario'], Task(data['task']), data['digest'], data['version'], data['seed'],
                         data.get('outputs', {}), data.get('assertions', {}), data.get('metrics', {}),
                         data.get('error'), data.get('timings', {}))


class RunOutputs:
    """
    Writes run artifacts and keeps the manifest of relative path -> SHA-256.
    """
    def __init__(self, out_dir: str) -> None:
        self.out_dir: str = out_dir
        self.manifest: dict[str, str] = {}

    def _path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def _record(self, name: str) -> None:
        self.manifest[name] = file_digest(self._path(name))

    def field(self, name: str, u: GridField) -> None:
        if u.is_real:
            write_field_binary(self._path(f'{name}.pfl'), u)
            self._record(f'{name}.pfl')
        write_field_csv(self._path(f'{name}.csv'), u)
        self._record(f'{name}.csv')

    def region(self, name: str, r: Region) -> None:
        write_region_csv(self._path(f'{name}.csv'), r)
        self._record(f'{name}.csv')

    def json(self, name: str, data: dict[str, any]) -> None:
        write_json(self._path(name), data)
        self._record(name)


def _forward_inputs(scenario: Scenario, grid: Grid) -> tuple[Region, Region | None, PolyFractionalOperator,
                                                             GridField | None, GridField]:
    omega = scenario.build_omega(grid)
    window = scenario.build_window(grid, omega)
    P = scenario.operator(grid)
    q = scenario.potential(grid, omega)
    f = scenario.exterior_data(grid, omega, window)
    return omega, window, P, q, f


def _run_forward(scenario: Scenario, out: RunOutputs, seed: int) -> dict[str, any]:
    grid = scenario.build_grid()
    omega = scenario.build_omega(grid)
    P = scenario.operator(grid)
    q = scenario.potential(grid, omega)
    exact = scenario.manufactured(grid)
    if exact is not None:
        f = restrict_field(exact, complement_region(omega))
        rhs = apply_poly(P, exact) + (q * exact if q is not None else 0.0)
        problem = LinearProblem(P, q, f, omega, restrict_field(rhs, omega))
    else:
        problem = LinearProblem(P, q, scenario.exterior_data(grid, omega, scenario.build_window(grid, omega)), omega)
    solution = solve_linear(problem, scenario.solver_params())
    out.region('omega', omega)
    out.field('u', solution.u)
    out.json('solution.json', {**solution.to_dict(), 'operator_digest': operator_digest(P)})
    metrics = {'residual_interior': solution.residual_interior, 'iterations': solution.iterations,
               'bound_ratio': solution.bound_report.ratio,
               'outside_verified_assumptions': solution.outside_verified_assumptions}
    if exact is not None:
        out.field('u_exact', exact)
        metrics['manufactured_error'] = (solution.u - exact).l2_norm() / exact.l2_norm()
    return metrics


def _run_dtn(scenario: Scenario, out: RunOutputs, seed: int) -> dict[str, any]:
    grid = scenario.build_grid()
    omega, _, P, q, f = _forward_inputs(scenario, grid)
    probe = scenario.probe(grid)
    if probe is None:
        probe = PolyFractionalOperator([PolyTerm(1.0, IdentityBackend(grid))], OperatorRole.PROBE)
    params = scenario.solver_params()
    measurement = dtn_apply(P, q, probe, f, omega, params)
    pairing = dtn_pairing(P, q, f, f, omega, params)
    out.region('omega', omega)
    out.field('f', f)
    out.field('dtn', measurement)
    out.json('dtn.json', {'probe_digest': operator_digest(probe), 'operator_digest': operator_digest(P),
                          'pairing_self': pairing})
    return {'dtn_max_abs': measurement.max_abs(), 'pairing_self': pairing}


def _recovery_outputs(out: RunOutputs, name: str, report: RecoveryReport, truth: GridField) -> dict[str, any]:
    out.field(f'{name}_true', truth)
    out.field(f'{name}_hat', report.estimate)
    out.region(f'{name}_effective', report.effective.region)
    out.json(f'{name}_recovery.json', report.to_dict())
    return {'rel_error': report.rel_error_on_E, 'coverage': report.coverage}


def _exterior_gap_metrics(scenario: Scenario, grid: Grid, omega: Region, window: Region | None,
                          out: RunOutputs) -> dict[str, any]:
    if window is None:
        return {}
    coefficient = scenario.field(grid, scenario.section('ucp').get('exterior_coefficient', 1.0),
                                 'ucp.exterior_coefficient')
    report = exterior_extension_gap(ExteriorEllipticOperator(coefficient, omega), window, omega,
                                    scenario.probe_params())
    out.json('exterior_gap.json', report.to_dict())
    return {'exterior_gap': report.min_singular_value, 'exterior_verdict': report.verdict.value}


def _run_recover_q(scenario: Scenario, out: RunOutputs, seed: int) -> dict[str, any]:
    grid = scenario.build_grid()
    omega, window, P, q, f = _forward_inputs(scenario, grid)
    solution = solve_linear(LinearProblem(P, q, f, omega), scenario.solver_params())
    report = recover_q(P, solution.u, omega, scenario.recovery_params().tau, truth=q)
    out.field('u', solution.u)
    metrics = _recovery_outputs(out, 'q', report, q)
    metrics['residual_interior'] = solution.residual_interior
    metrics.update(_exterior_gap_metrics(scenario, grid, omega, window, out))
    return metrics


def _run_recover_alpha(scenario: Scenario, out: RunOutputs, seed: int) -> dict[str, any]:
    grid = scenario.build_grid()
    omega, window, P, q, f = _forward_inputs(scenario, grid)
    m = scenario.alpha_term()
    solution = solve_linear(LinearProblem(P, q, f, omega), scenario.solver_params())
    target = P.terms[m]
    truth = restrict_field(GridField(grid, target.coefficient_values), omega)
    report = recover_alpha(P.without_term(m), q, solution.u, target.backend, omega,
                           scenario.recovery_params().tau, truth=truth)
    out.field('u', solution.u)
    metrics = _recovery_outputs(out, 'alpha', report, truth)
    metrics.update({'residual_interior': solution.residual_interior, 'alpha_term': m, 'alpha_order': target.order})
    metrics.update(_exterior_gap_metrics(scenario, grid, omega, window, out))
    return metrics


def _run_recover_taylor(scenario: Scenario, out: RunOutputs, seed: int) -> dict[str, any]:
    grid = scenario.build_grid()
    omega, _, P, _, f = _forward_inputs(scenario, grid)
    source = scenario.source(grid)
    solver, newton, recovery = scenario.solver_params(), scenario.newton_params(), scenario.recovery_params()

    measured = {}

    def forward_model(data: GridField) -> GridField:
        key = data.values.tobytes()
        if key not in measured:
            if source.order == 0:
                measured[key] = solve_linear(LinearProblem(P, None, data, omega, -source.coefficient(0)), solver).u
            else:
                measured[key] = solve_semilinear(SemilinearProblem(P, source, data, omega, newton), solver).u
        return measured[key]

    truth = [restrict_field(c, omega) for c in source.coefficients]
    reports = recover_taylor(P, f, source.order, omega, recovery.eps_schedule, recovery.tau, forward_model, truth)
    for ell, (report, expected) in enumerate(zip(reports, truth)):
        out.field(f'F{ell}_true', expected)
        out.field(f'F{ell}_hat', report.estimate)
    out.json('taylor_recovery.json', {'reports': [report.to_dict() for report in reports],
                                      'eps_schedule': list(recovery.eps_schedule)})
    metrics = {'rel_error': [report.rel_error_on_E for report in reports],
               'coverage': min(report.coverage for report in reports), 'order': source.order}
    if source.order >= 1:
        metrics['linearization_slope'] = _linearization_study(P, source, f, omega, recovery.eps_schedule, solver,
                                                              forward_model, out)
    return metrics


def _linearization_study(P: PolyFractionalOperator, source: TaylorSource, f: GridField, omega: Region,
                         eps_schedule: tuple[float, ...], solver: SolverParams,
                         forward_model: Callable[[GridField], GridField], out: RunOutputs) -> float | None:
    """
    Error of the central difference (u_eps - u_-eps) / (2 eps) against the solved first linearization, per eps.
    """
    exact, = solve_linearization(P, source, f, omega, 1, solver)
    schedule = sorted(eps_schedule)
    errors = [(linearize([(eps, forward_model(f * eps)), (-eps, forward_model(f * -eps))], 1) - exact).max_abs()
              for eps in schedule]
    slope = fit_slope(schedule, errors) if len(schedule) > 1 and min(errors) > 0 else None
    out.json('linearization.json', {'eps': schedule, 'error': errors, 'slope': slope})
    LOGGER.info('First linearization: errors %s, fitted slope %s', ['%.3e' % e for e in errors], slope)
    return slope


def _run_ucp_suite(scenario: Scenario, out: RunOutputs, seed: int) -> dict[str, any]:
    settings = scenario.ucp_settings()
    params = scenario.probe_params()
    grid = scenario.build_grid()
    sweep = settings['sweep'] or [grid.points_per_axis]
    reports, indices = [], []
    for points in sweep:
        sweep_grid = scenario.build_grid(points)
        sweep_omega = scenario.build_omega(sweep_grid)
        for index, candidate in enumerate(scenario.suite_operators(sweep_grid)):
            reports.append(interior_gap(candidate, sweep_omega, params))
            indices.append(index)
    statuses = [check_admissible(candidate).status.value for candidate in scenario.suite_operators(grid)]
    omega = scenario.build_omega(grid)
    probe = scenario.suite_probe(grid)
    try:
        reports.append(symbol_positivity(probe, params))
    except ValueError as error:
        LOGGER.info('Symbol positivity skipped: %s', error)
    window = scenario.build_window(grid, omega)
    if window is not None:
        coefficient = scenario.field(grid, settings['exterior_coefficient'], 'ucp.exterior_coefficient')
        reports.append(exterior_extension_gap(ExteriorEllipticOperator(coefficient, omega), window, omega, params))
    poincare = poincare_probe(settings['sigma'], omega, settings['samples'], seed)
    metrics = {'min_gaps': [r.min_singular_value for r in reports if r.context == ProbeContext.INTERIOR_GAP],
               'admissibility_statuses': statuses,
               'all_nondegenerate': all(r.nondegenerate for r in reports),
               'poincare_constant': poincare}
    if settings['sobolev'] is not None:
        r, s = settings['sobolev']
        metrics['sobolev_constant'] = sobolev_probe(r, s, omega, settings['samples'], seed)
    labels = indices + [None] * (len(reports) - len(indices))
    out.json('ucp_reports.json', {'reports': [{**report.to_dict(), 'seed': seed, 'operator': label}
                                              for report, label in zip(reports, labels)],
                                  'admissibility_statuses': statuses,
                                  'poincare_constant': poincare, 'sigma': settings['sigma'],
                                  'samples': settings['samples']})
    return metrics


def _run_admissibility(scenario: Scenario, out: RunOutputs, seed: int) -> dict[str, any]:
    grid = scenario.build_grid()
    params = scenario.admissibility_params()
    verdicts, residuals = [], []
    for candidate in scenario.admissibility_candidates(grid):
        verdict = check_admissible(candidate, params)
        try:
            residual = multiplier_identity_residual(candidate, verdict)
        except ValueError:
            residual = None
        verdicts.append({**verdict.to_dict(), 'operator_digest': operator_digest(candidate),
                         'orders': candidate.orders, 'multiplier_residual': residual})
        residuals.append(residual)
    out.json('admissibility.json', {'verdicts': verdicts})
    known = [r for r in residuals if r is not None]
    return {'statuses': [v['status'] for v in verdicts],
            'multiplier_residual_max': max(known) if known else None}


TASK_RUNNERS: dict[Task, Callable[[Scenario, RunOutputs, int], dict[str, any]]] = {
    Task.FORWARD: _run_forward,
    Task.DTN: _run_dtn,
    Task.RECOVER_Q: _run_recover_q,
    Task.RECOVER_ALPHA: _run_recover_alpha,
    Task.RECOVER_TAYLOR: _run_recover_taylor,
    Task.UCP_SUITE: _run_ucp_suite,
    Task.ADMISSIBILITY: _run_admissibility,
}


def _check_assertion(key: str, limit: any, value: any) -> bool:
    _, compare = ASSERTIONS[key]
    if value is None:
        return False
    if key == 'statuses':
        return [str(v).upper() for v in np.atleast_1d(limit).tolist()] == list(value)
    if key == 'all_nondegenerate':
        return compare(bool(value), bool(limit))
    if isinstance(value, list):
        limits = limit if isinstance(limit, list) else [limit] * len(value)
        if len(limits) != len(value):
            return False
        return all(bound is None or (item is not None and compare(item, _as_float(bound, key)))
                   for item, bound in zip(value, limits))
    return compare(value, _as_float(limit, key))


def evaluate_assertions(spec: dict[str, any], metrics: dict[str, any]) -> dict[str, dict[str, any]]:
    results = {}
    for key, limit in sorted(spec.items()):
        value = metrics.get(ASSERTIONS[key][0])
        results[key] = {'limit': limit, 'value': value, 'passed': _check_assertion(key, limit, value)}
    return results


def run_scenario(scenario: Scenario, out_dir: str, seed: int | None = None, timings: bool = False) -> RunRecord:
    """
    Execute the scenario task into out_dir and write run_record.json. Failures of the task are captured in the
    record. Identical scenario, seed and version give identical output hashes.
    """
    seed = scenario.seed if seed is None else seed
    os.makedirs(out_dir, exist_ok=True)
    outputs = RunOutputs(out_dir)
    record = RunRecord(scenario.name, scenario.task, scenario.digest, __version__, seed)
    LOGGER.info('Running scenario %s (%s) into %s', scenario.name, scenario.task.value.lower(), out_dir)
    start = time.perf_counter()
    try:
        record.metrics = TASK_RUNNERS[scenario.task](scenario, outputs, seed)
        record.assertions = evaluate_assertions(scenario.assertions(), record.metrics)
    except Exception as error:
        LOGGER.error('Scenario %s failed: %s: %s', scenario.name, type(error).__name__, error)
        record.error = f'{type(error).__name__}: {error}'
    record.outputs = dict(sorted(outputs.manifest.items()))
    record.timings = {'total_seconds': time.perf_counter() - start}
    write_json(os.path.join(out_dir, RECORD_FILE), record.to_dict(include_timings=timings))
    LOGGER.info('Scenario %s %s in %.2f s', scenario.name, 'passed' if record.passed else 'failed',
                record.timings['total_seconds'])
    return record


def load_run_record(run_dir: str) -> RunRecord:
    path = os.path.join(run_dir, RECORD_FILE)
    if not os.path.exists(path):
        raise MissingOutputError(f'No {RECORD_FILE} in {run_dir}')
    return RunRecord.from_dict(read_json(path))


def _read_output(run_dir: str, record: RunRecord, name: str) -> pd.DataFrame:
    if name not in record.outputs:
        raise MissingOutputError(f'Run {record.scenario} did not produce {name}')
    return pd.read_csv(os.path.join(run_dir, name), header=0)


def _coordinates(frame: pd.DataFrame) -> pd.DataFrame:
    return frame[[column for column in AXIS_NAMES if column in frame.columns]].copy()


def _comparison_frame(run_dir: str, record: RunRecord, truth: str, estimate: str) -> pd.DataFrame:
    expected = _read_output(run_dir, record, f'{truth}.csv')
    recovered = _read_output(run_dir, record, f'{estimate}.csv')
    frame = _coordinates(expected)
    frame['truth'] = expected['value']
    frame['estimate'] = recovered['value']
    return frame[frame['estimate'].notna()].reset_index(drop=True)


def _plot_forward(run_dir: str, record: RunRecord) -> dict[str, pd.DataFrame]:
    solution = _read_output(run_dir, record, 'u.csv')
    frame = _coordinates(solution)
    frame['u'] = solution['value']
    if 'u_exact.csv' in record.outputs:
        frame['exact'] = _read_output(run_dir, record, 'u_exact.csv')['value']
    return {'solution.csv': frame}


def _plot_dtn(run_dir: str, record: RunRecord) -> dict[str, pd.DataFrame]:
    measurement = _read_output(run_dir, record, 'dtn.csv')
    data = _read_output(run_dir, record, 'f.csv')
    frame = _coordinates(measurement)
    frame['f'] = data['value']
    frame['dtn'] = measurement['value']
    return {'dtn.csv': frame}


def _plot_recover_q(run_dir: str, record: RunRecord) -> dict[str, pd.DataFrame]:
    return {'q_vs_estimate.csv': _comparison_frame(run_dir, record, 'q_true', 'q_hat')}


def _plot_recover_alpha(run_dir: str, record: RunRecord) -> dict[str, pd.DataFrame]:
    return {'alpha_vs_estimate.csv': _comparison_frame(run_dir, record, 'alpha_true', 'alpha_hat')}


def _plot_recover_taylor(run_dir: str, record: RunRecord) -> dict[str, pd.DataFrame]:
    order = record.metrics.get('order')
    if order is None:
        raise MissingOutputError(f'Run {record.scenario} has no recovered Taylor order')
    frames = {f'taylor_{ell}.csv': _comparison_frame(run_dir, record, f'F{ell}_true', f'F{ell}_hat')
              for ell in range(order + 1)}
    if 'linearization.json' in record.outputs:
        study = read_json(os.path.join(run_dir, 'linearization.json'))
        rows = [{'eps': f'{eps!r}', 'error': error} for eps, error in zip(study['eps'], study['error'])]
        # footer row holds the fitted log-log slope
        rows.append({'eps': 'slope', 'error': study['slope']})
        frames['linearization.csv'] = pd.DataFrame(rows, columns=['eps', 'error'])
    return frames


def _plot_ucp(run_dir: str, record: RunRecord) -> dict[str, pd.DataFrame]:
    if 'ucp_reports.json' not in record.outputs:
        raise MissingOutputError(f'Run {record.scenario} did not produce ucp_reports.json')
    reports = read_json(os.path.join(run_dir, 'ucp_reports.json'))['reports']
    rows = [{'operator': r['operator'], 'points': r['grid']['points_per_axis'],
             'min_singular_value': r['min_singular_value'], 'floor': r['floor'], 'verdict': r['verdict']}
            for r in reports if r['context'] == ProbeContext.INTERIOR_GAP.value]
    columns = ['operator', 'points', 'min_singular_value', 'floor', 'verdict']
    return {'gap_vs_n.csv': pd.DataFrame(rows, columns=columns).sort_values(['operator', 'points'], kind='stable')}


def _plot_admissibility(run_dir: str, record: RunRecord) -> dict[str, pd.DataFrame]:
    if 'admissibility.json' not in record.outputs:
        raise MissingOutputError(f'Run {record.scenario} did not produce admissibility.json')
    verdicts = read_json(os.path.join(run_dir, 'admissibility.json'))['verdicts']
    rows = [{'candidate': i, 'orders': ' '.join(f'{s:.12g}' for s in v['orders']), 'status': v['status'],
             'multiplier_residual': v['multiplier_residual']} for i, v in enumerate(verdicts)]
    return {'admissibility.csv': pd.DataFrame(rows, columns=['candidate', 'orders', 'status', 'multiplier_residual'])}


PLOT_BUILDERS: dict[Task, Callable[[str, RunRecord], dict[str, pd.DataFrame]]] = {
    Task.FORWARD: _plot_forward,
    Task.DTN: _plot_dtn,
    Task.RECOVER_Q: _plot_recover_q,
    Task.RECOVER_ALPHA: _plot_recover_alpha,
    Task.RECOVER_TAYLOR: _plot_recover_taylor,
    Task.UCP_SUITE: _plot_ucp,
    Task.ADMISSIBILITY: _plot_admissibility,
}


def emit_plot_data(run_dir: str) -> list[str]:
    """
    Per-task CSV series for external plotting under <run_dir>/plot. Every series is built before any file is
    written, so a missing output leaves the folder untouched.
    """
    record = load_run_record(run_dir)
    for name in record.outputs:
        if not os.path.exists(os.path.join(run_dir, name)):
            raise MissingOutputError(f'Output {name} of run {record.scenario} is missing')
    frames = PLOT_BUILDERS[record.task](run_dir, record)
    paths = []
    for name, frame in sorted(frames.items()):
        path = os.path.join(run_dir, PLOT_FOLDER, name)
        atomic_write_text(path, frame_to_csv(frame))
        paths.append(path)
    LOGGER.info('Wrote %d plot series for %s', len(paths), record.scenario)
    return paths


def run_suite(directory: str, out_root: str, overrides: list[str] | tuple[str, ...] = (),
              timings: bool = False) -> dict[str, dict[str, any]]:
    """
    Run every *.yaml scenario of a directory in sorted order; invalid scenarios count as failures.
    """
    summary = {}
    for path in sorted(glob.glob(os.path.join(directory, '*.yaml'))):
        name = os.path.splitext(os.path.basename(path))[0]
        try:
            scenario = parse_scenario(path, overrides)
            record = run_scenario(scenario, os.path.join(out_root, scenario.name), timings=timings)
            summary[name] = {'passed': record.passed, 'error': record.error}
        except (ScenarioError, ScenarioValidationError, ExpressionError, OSError) as error:
            LOGGER.error('Scenario %s rejected: %s', name, error)
            summary[name] = {'passed': False, 'error': f'{type(error).__name__}: {error}'}
    write_json(os.path.join(out_root, SUITE_FILE),
               {'scenarios': summary, 'passed': bool(summary) and all(s['passed'] for s in summary.values())})
    return summary
