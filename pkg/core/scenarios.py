"""
Scenario files: loading and validation, problem construction and execution of the requested checks
"""
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple
import copy
import json
import logging
import os

import numpy as np

from core.adjoint import (TOL_IDENTITY, check_relaxed_transposition_identity, check_transposition_identity,
                          solve_first_adjoint, solve_second_adjoint)
from core.conditions import (ConditionReport, critical_cone_residual, critical_direction, descent_direction,
                             first_order_integral, first_order_pointwise, maximum_principle_gap,
                             pointwise_second_gap, random_directions, second_order_integral)
from core.cones import SET_FAMILIES, check_descriptor, control_set_from_descriptor, project
from core.families import FAMILIES, UnknownFamilyError, build_family, get_family_class
from core.forward import (FeedbackControl, NoiseEnsemble, OpenLoopControl, PerturbedControl, ProblemSpec,
                          simulate_first_variation, simulate_pair)
from core.hilbert import TruncatedSpace, VerificationError
from core.oracles import lq_data_from_spec, riccati_solve
from core.regression import RegressionConfig
from core.reporting import build_summary, build_traces, write_summary, write_traces
from core.validators import (unknown_keys, validate_choice, validate_float, validate_matrix,
                             validate_positive_int, validate_vector)

logger = logging.getLogger(__name__)

OUTPUT_ENV = 'OPTCHECK_OUTPUT_DIR'
DEFAULT_OUTPUT_DIR = 'results'

TOP_KEYS = ('problem', 'numerics', 'checks', 'candidate_control', 'output')
PROBLEM_KEYS = ('family', 'n', 'm', 'd', 'horizon', 'x0', 'eigenvalues', 'params', 'control_set', 'constants')
CONSTANT_KEYS = ('lipschitz', 'integrability', 'moment_order')
NUMERICS_DEFAULTS = {'steps': 64, 'paths': 4096, 'seed': 42, 'regression_degree': 2, 'ridge': 1e-8, 'workers': 1}
OUTPUT_KEYS = ('directory', 'summary', 'traces')

# canonical order; "all" expands to this list
CHECK_IDS = (
    'first_order_integral',
    'first_order_pointwise',
    'maximum_principle_gap',
    'critical_cone',
    'transposition_identity',
    'pointwise_second_gap',
    'second_order_integral',
    'relaxed_transposition_identity',
)
SECOND_ORDER_CHECKS = ('pointwise_second_gap', 'second_order_integral', 'relaxed_transposition_identity')
CHECK_OPTIONS = ('id', 'directions', 'count', 'seed', 'trials')
DIRECTION_KINDS = ('random', 'descent', 'zero')
CONTROL_TYPES = ('oracle-riccati', 'open-loop', 'feedback', 'perturbation')
FEEDBACK_IDS = ('zero', 'linear')

EXIT_PASS, EXIT_ERROR, EXIT_VIOLATED, EXIT_INCONCLUSIVE = 0, 1, 2, 3


class ScenarioError(VerificationError):
    module = 'scenarios'

    def __init__(self, errors, stage: str = 'config'):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        self.stage = stage
        super().__init__(f"[{stage}] " + '; '.join(self.errors))


@dataclass(frozen=True)
class ScenarioConfig:
    problem: Dict
    numerics: Dict
    checks: List[Dict]
    candidate_control: Dict
    output: Dict
    source: Optional[str] = None

    @property
    def regression(self) -> RegressionConfig:
        return RegressionConfig(degree=int(self.numerics['regression_degree']), ridge=float(self.numerics['ridge']))


# ---------------------------------------------------------------------------
# loading and validation
# ---------------------------------------------------------------------------

def load_scenario(path: str) -> ScenarioConfig:
    """
    Parse and validate a scenario file. Every problem found is collected
    before failing with a ScenarioError.
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ScenarioError(f"no se pudo leer {path}: {e}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"error de sintaxis en línea {e.lineno}, columna {e.colno}: {e.msg}")
    cfg = parse_scenario(raw, source=path)
    logger.info(f"Escenario cargado: {path} ({len(cfg.checks)} comprobaciones)")
    return cfg


def parse_scenario(raw, source: Optional[str] = None) -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ScenarioError("el escenario debe ser un objeto con claves")
    errors = unknown_keys(raw, TOP_KEYS, 'el escenario')
    problem, problem_errors = _parse_problem(raw.get('problem'))
    errors += problem_errors
    numerics, numeric_errors = _parse_numerics(raw.get('numerics', {}))
    errors += numeric_errors
    family_order = problem.get('derivative_order', 2)
    checks, check_errors = _parse_checks(raw.get('checks', []), family_order)
    errors += check_errors
    dims = (problem.get('n'), problem.get('d'))
    control, control_errors = _parse_control(raw.get('candidate_control', {'type': 'feedback', 'id': 'zero'}),
                                             dims, 'candidate_control')
    errors += control_errors
    if control.get('type') == 'oracle-riccati' and problem.get('family') not in (None, 'lq'):
        errors.append("candidate_control 'oracle-riccati' requiere la familia 'lq'")
    output, output_errors = _parse_output(raw.get('output', {}))
    errors += output_errors
    if errors:
        for message in errors:
            logger.error(f"Escenario inválido: {message}")
        raise ScenarioError(errors)
    problem.pop('derivative_order', None)
    return ScenarioConfig(problem=problem, numerics=numerics, checks=checks, candidate_control=control,
                          output=output, source=source)


def _parse_problem(section) -> Tuple[Dict, List[str]]:
    if not isinstance(section, dict):
        return {}, ["falta la sección 'problem'"]
    errors = unknown_keys(section, PROBLEM_KEYS, 'problem')
    problem = {}
    for key in ('n', 'm', 'd'):
        ok, msg, value = validate_positive_int(section.get(key), f"problem.{key}")
        if ok:
            problem[key] = value
        else:
            errors.append(msg)
    ok, msg, horizon = validate_float(section.get('horizon', 1.0), 'problem.horizon', min_value=0.0, strict=True)
    if ok:
        problem['horizon'] = horizon
    else:
        errors.append(msg)

    family = section.get('family')
    family_ok = True
    try:
        get_family_class(family)
    except UnknownFamilyError as e:
        family_ok = False
        errors.append(str(e))
    # without valid dims only the dimension-free checks run
    dims_ok = all(key in problem for key in ('n', 'm', 'd'))
    n, m, d = problem.get('n'), problem.get('m'), problem.get('d')

    params = section.get('params', {})
    if not isinstance(params, dict):
        errors.append("problem.params debe ser un objeto")
        params = {}
    if family_ok:
        problem['family'] = family
        problem['derivative_order'] = FAMILIES[family].derivative_order
        if dims_ok:
            errors += [f"problem.params: {e}" for e in FAMILIES[family].check_params(n, m, d, params)]
    problem['params'] = copy.deepcopy(params)

    ok, msg, x0 = validate_vector(section.get('x0', [0.0] * (n or 0)), 'problem.x0', n)
    if ok:
        problem['x0'] = x0.tolist()
    else:
        errors.append(msg)
    if 'eigenvalues' in section:
        ok, msg, eig = validate_vector(section['eigenvalues'], 'problem.eigenvalues', n)
        if ok:
            problem['eigenvalues'] = eig.tolist()
        else:
            errors.append(msg)

    control_set = section.get('control_set', {'family': 'unconstrained'})
    if not isinstance(control_set, dict):
        set_errors = ["problem.control_set debe ser un objeto"]
    elif dims_ok:
        set_errors = check_descriptor(control_set, d)
    else:
        ok, msg, _ = validate_choice(control_set.get('family', 'unconstrained'), 'family',
                                     ('unconstrained',) + SET_FAMILIES)
        set_errors = [] if ok else [msg]
    errors += [f"problem.control_set: {e}" for e in set_errors]
    problem['control_set'] = copy.deepcopy(control_set)

    constants = section.get('constants', {})
    if not isinstance(constants, dict):
        errors.append("problem.constants debe ser un objeto")
        constants = {}
    errors += unknown_keys(constants, CONSTANT_KEYS, 'problem.constants')
    for key, value in constants.items():
        if key in CONSTANT_KEYS:
            good, msg, _ = validate_float(value, f"problem.constants.{key}", min_value=0.0)
            if not good:
                errors.append(msg)
    problem['constants'] = dict(constants)
    return problem, errors


def _parse_numerics(section) -> Tuple[Dict, List[str]]:
    if not isinstance(section, dict):
        return dict(NUMERICS_DEFAULTS), ["numerics debe ser un objeto"]
    errors = unknown_keys(section, NUMERICS_DEFAULTS, 'numerics')
    numerics = dict(NUMERICS_DEFAULTS)
    for key in ('steps', 'paths', 'regression_degree', 'workers'):
        if key in section:
            ok, msg, value = validate_positive_int(section[key], f"numerics.{key}")
            if ok:
                numerics[key] = value
            else:
                errors.append(msg)
    if 'seed' in section:
        value = section['seed']
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            errors.append("numerics.seed debe ser un entero no negativo")
        else:
            numerics['seed'] = value
    if 'ridge' in section:
        ok, msg, value = validate_float(section['ridge'], 'numerics.ridge', min_value=0.0)
        if ok:
            numerics['ridge'] = value
        else:
            errors.append(msg)
    return numerics, errors


def _parse_checks(section, family_order: int) -> Tuple[List[Dict], List[str]]:
    if section == 'all':
        ids = [c for c in CHECK_IDS if family_order >= 2 or c not in SECOND_ORDER_CHECKS]
        return [_check_defaults({'id': c}) for c in ids], []
    if not isinstance(section, list):
        return [], ["checks debe ser una lista o \"all\""]
    checks, errors = [], []
    for i, entry in enumerate(section):
        entry = {'id': entry} if isinstance(entry, str) else entry
        if not isinstance(entry, dict):
            errors.append(f"checks[{i}] debe ser un identificador o un objeto")
            continue
        errors += unknown_keys(entry, CHECK_OPTIONS, f"checks[{i}]")
        ok, msg, _ = validate_choice(entry.get('id'), f"checks[{i}].id", CHECK_IDS)
        if not ok:
            errors.append(msg)
            continue
        if 'directions' in entry:
            ok, msg, _ = validate_choice(entry['directions'], f"checks[{i}].directions", DIRECTION_KINDS)
            if not ok:
                errors.append(msg)
        for key in ('count', 'trials'):
            if key in entry:
                ok, msg, _ = validate_positive_int(entry[key], f"checks[{i}].{key}")
                if not ok:
                    errors.append(msg)
        checks.append(_check_defaults(entry))
    return checks, errors


def _check_defaults(entry: Dict) -> Dict:
    check = {'id': entry['id'], 'seed': int(entry.get('seed', 0))}
    if entry['id'] in ('first_order_integral', 'critical_cone', 'second_order_integral'):
        check['directions'] = entry.get('directions', 'random')
        check['count'] = int(entry.get('count', 5 if entry['id'] == 'first_order_integral' else 1))
    if entry['id'] in ('transposition_identity', 'relaxed_transposition_identity'):
        check['trials'] = int(entry.get('trials', 32))
    return check


def _parse_control(desc, dims, where: str) -> Tuple[Dict, List[str]]:
    if not isinstance(desc, dict):
        return {}, [f"{where} debe ser un objeto"]
    ok, msg, kind = validate_choice(desc.get('type'), f"{where}.type", CONTROL_TYPES)
    if not ok:
        return dict(desc), [msg]
    n, d = dims
    errors = []
    allowed = {'oracle-riccati': ('type', 'scheme'),
               'open-loop': ('type', 'table', 'value'),
               'feedback': ('type', 'id', 'gain', 'offset'),
               'perturbation': ('type', 'base', 'offset')}[kind]
    errors += unknown_keys(desc, allowed, where)
    out = copy.deepcopy(desc)
    if kind == 'oracle-riccati':
        ok, msg, _ = validate_choice(desc.get('scheme', 'discrete'), f"{where}.scheme", ('discrete', 'continuous'))
        if not ok:
            errors.append(msg)
    elif kind == 'open-loop':
        if ('table' in desc) == ('value' in desc):
            errors.append(f"{where} necesita exactamente una de 'table' o 'value'")
        elif 'value' in desc and d is not None:
            ok, msg, _ = validate_vector(desc['value'], f"{where}.value", d)
            if not ok:
                errors.append(msg)
        elif 'table' in desc:
            table = np.asarray(desc['table'], dtype=float) if isinstance(desc['table'], list) else None
            if table is None or table.ndim != 2 or (d is not None and table.shape[1] != d):
                errors.append(f"{where}.table debe ser una tabla (N, {d})")
    elif kind == 'feedback':
        ok, msg, fid = validate_choice(desc.get('id', 'zero'), f"{where}.id", FEEDBACK_IDS)
        if not ok:
            errors.append(msg)
        elif fid == 'linear' and n is not None and d is not None:
            ok, msg, _ = validate_matrix(desc.get('gain'), f"{where}.gain", (d, n))
            if not ok:
                errors.append(msg)
            if 'offset' in desc:
                ok, msg, _ = validate_vector(desc['offset'], f"{where}.offset", d)
                if not ok:
                    errors.append(msg)
    elif kind == 'perturbation':
        base, base_errors = _parse_control(desc.get('base'), dims, f"{where}.base")
        errors += base_errors
        out['base'] = base
        if d is not None:
            ok, msg, _ = validate_vector(desc.get('offset'), f"{where}.offset", d)
            if not ok:
                errors.append(msg)
    return out, errors


def _parse_output(section) -> Tuple[Dict, List[str]]:
    if not isinstance(section, dict):
        return {}, ["output debe ser un objeto"]
    errors = unknown_keys(section, OUTPUT_KEYS, 'output')
    output = {
        'directory': section.get('directory') or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT_DIR,
        'summary': section.get('summary', 'summary.json'),
        'traces': section.get('traces', 'traces.csv'),
    }
    return output, errors


def apply_overrides(cfg: ScenarioConfig, paths: Optional[int] = None, steps: Optional[int] = None,
                    seed: Optional[int] = None, out: Optional[str] = None,
                    workers: Optional[int] = None) -> ScenarioConfig:
    """Command-line values beat file values."""
    numerics = dict(cfg.numerics)
    errors = []
    for key, value in (('paths', paths), ('steps', steps), ('workers', workers)):
        if value is not None:
            ok, msg, parsed = validate_positive_int(value, f"--{key}")
            if ok:
                numerics[key] = parsed
            else:
                errors.append(msg)
    if seed is not None:
        if seed < 0:
            errors.append("--seed debe ser no negativo")
        numerics['seed'] = int(seed)
    if errors:
        raise ScenarioError(errors)
    output = dict(cfg.output)
    if out is not None:
        output['directory'] = out
    return replace(cfg, numerics=numerics, output=output)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_problem(cfg: ScenarioConfig) -> ProblemSpec:
    p = cfg.problem
    n, m, d = p['n'], p['m'], p['d']
    if 'eigenvalues' in p:
        space = TruncatedSpace(n=n, eigenvalues=tuple(p['eigenvalues']))
    else:
        space = TruncatedSpace.dirichlet(n)
    family = build_family(p['family'], n, m, d, p.get('params', {}))
    control_set = control_set_from_descriptor(p['control_set'], d)
    constants = p.get('constants', {})
    return ProblemSpec(space=space, m=m, d=d, family=family, control_set=control_set,
                       horizon=p['horizon'], x0=np.asarray(p['x0'], dtype=float),
                       lipschitz=float(constants.get('lipschitz', 1.0)),
                       integrability=float(constants.get('integrability', 0.0)),
                       moment_order=int(constants.get('moment_order', 2)))


def build_control(desc: Dict, spec: ProblemSpec, steps: int):
    """Candidate control from its descriptor."""
    U = spec.control_set
    kind = desc['type']
    if kind == 'oracle-riccati':
        sol = riccati_solve(lq_data_from_spec(spec), steps, spec.horizon, scheme=desc.get('scheme', 'discrete'))
        return sol.feedback(U)
    if kind == 'open-loop':
        if 'value' in desc:
            return OpenLoopControl(np.tile(np.asarray(desc['value'], dtype=float), (steps, 1)))
        table = np.asarray(desc['table'], dtype=float)
        if table.shape[0] != steps:
            raise ScenarioError(f"la tabla de control tiene {table.shape[0]} filas, N={steps}", stage='forward')
        return OpenLoopControl(table)
    if kind == 'feedback':
        if desc.get('id', 'zero') == 'zero':
            return FeedbackControl(lambda k, t, x: project(U, np.zeros((x.shape[0], spec.d))), name='zero')
        gain = np.asarray(desc['gain'], dtype=float)
        offset = np.asarray(desc.get('offset', np.zeros(spec.d)), dtype=float)
        return FeedbackControl(lambda k, t, x: project(U, x @ gain.T + offset), name='linear')
    base = build_control(desc['base'], spec, steps)
    return PerturbedControl(base, np.asarray(desc['offset'], dtype=float))


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _directions(check: Dict, spec, xbar, ubar, adj) -> List[np.ndarray]:
    kind = check.get('directions', 'random')
    P, N, d = ubar.values.shape
    if kind == 'zero':
        return [np.zeros((P, N, d))]
    if kind == 'descent':
        return [descent_direction(spec, xbar, ubar, adj)]
    return random_directions(spec, ubar, check['count'], check['seed'])


def _named(reports: List[ConditionReport], base: str) -> List[ConditionReport]:
    if len(reports) == 1:
        return [reports[0].renamed(base)]
    return [r.renamed(f"{base}#{i}") for i, r in enumerate(reports)]


def _identity_report(condition_id: str, stats: Dict) -> ConditionReport:
    verdict = 'pass' if stats['max_residual'] <= TOL_IDENTITY else 'violated'
    return ConditionReport(condition_id, verdict, value=stats['max_residual'], max=stats['max_residual'],
                           mean=stats['mean_residual'])


def _run_check(check: Dict, spec, noise, xbar, ubar, adj, adj2) -> List[ConditionReport]:
    cid = check['id']
    if cid == 'first_order_integral':
        reports = [first_order_integral(spec, xbar, ubar, adj, v)
                   for v in _directions(check, spec, xbar, ubar, adj)]
        return _named(reports, cid)
    if cid == 'first_order_pointwise':
        return [first_order_pointwise(spec, xbar, ubar, adj)]
    if cid == 'maximum_principle_gap':
        return [maximum_principle_gap(spec, xbar, ubar, adj)]
    if cid == 'critical_cone':
        reports = [critical_cone_residual(spec, xbar, ubar, adj, v)
                   for v in _directions(check, spec, xbar, ubar, adj)]
        return _named(reports, cid)
    if cid == 'transposition_identity':
        stats = check_transposition_identity(spec, xbar, ubar, adj, noise, check['trials'], check['seed'])
        return [_identity_report(cid, stats)]
    if cid == 'pointwise_second_gap':
        return [pointwise_second_gap(spec, xbar, ubar, adj, adj2)]
    if cid == 'second_order_integral':
        reports = []
        for v in _directions(check, spec, xbar, ubar, adj):
            v = critical_direction(spec, xbar, ubar, adj, v)
            y1 = simulate_first_variation(spec, xbar, ubar, v, noise)
            reports.append(second_order_integral(spec, xbar, ubar, adj, adj2, v, np.zeros_like(v), y1))
        return _named(reports, cid)
    stats = check_relaxed_transposition_identity(spec, xbar, ubar, adj2, adj, noise, check['trials'],
                                                 check['seed'])
    return [_identity_report(cid, stats)]


def exit_status_for(reports: List[ConditionReport]) -> int:
    """2 if any check is violated, else 3 if any is inconclusive, else 0."""
    verdicts = {r.verdict for r in reports}
    if 'violated' in verdicts:
        return EXIT_VIOLATED
    if 'inconclusive' in verdicts:
        return EXIT_INCONCLUSIVE
    return EXIT_PASS


def _metadata(cfg: ScenarioConfig) -> Dict:
    p, num = cfg.problem, cfg.numerics
    return {
        'source': os.path.basename(cfg.source) if cfg.source else None,
        'family': p['family'],
        'n': p['n'], 'm': p['m'], 'd': p['d'],
        'horizon': p['horizon'],
        'control_set': p['control_set'].get('family', 'unconstrained'),
        'candidate_control': cfg.candidate_control.get('type'),
        'paths': num['paths'], 'steps': num['steps'], 'seed': num['seed'],
        'regression_degree': num['regression_degree'], 'ridge': num['ridge'],
    }


def _stage(name: str, fn, *args):
    try:
        return fn(*args)
    except ScenarioError:
        raise
    except Exception as e:
        module = getattr(e, 'module', name)
        logger.error(f"Fallo en la etapa {name} (módulo {module}): {e}")
        raise ScenarioError(f"{module}: {e}", stage=name) from e


def run_scenario(cfg: ScenarioConfig) -> Dict:
    """
    Simulate, solve the adjoints the checks need, run every check and write
    the summary JSON and the trace CSV. Returns exit_status, reports, artifacts
    and error (None on success).
    """
    result = {'exit_status': EXIT_ERROR, 'reports': [], 'artifacts': {}, 'error': None}
    num = cfg.numerics
    try:
        spec = _stage('forward', build_problem, cfg)
        steps, workers = num['steps'], num['workers']

        def forward():
            noise = NoiseEnsemble.generate(num['paths'], steps, spec.m, spec.horizon, num['seed'], workers)
            control = build_control(cfg.candidate_control, spec, steps)
            xbar, ubar = simulate_pair(spec, control, noise, workers)
            return noise, xbar, ubar

        noise, xbar, ubar = _stage('forward', forward)
        ids = {c['id'] for c in cfg.checks}
        adj = adj2 = None
        if ids:
            adj = _stage('adjoint', solve_first_adjoint, spec, xbar, ubar, noise, cfg.regression)
        if ids & set(SECOND_ORDER_CHECKS):
            adj2 = _stage('adjoint', solve_second_adjoint, spec, xbar, ubar, adj, noise, cfg.regression)

        reports = []
        for check in cfg.checks:
            reports += _stage('conditions', _run_check, check, spec, noise, xbar, ubar, adj, adj2)
        exit_status = exit_status_for(reports)

        def emit():
            directory = cfg.output['directory']
            summary = build_summary(_metadata(cfg), reports, exit_status)
            summary_path = write_summary(summary, os.path.join(directory, cfg.output['summary']))
            traces_path = write_traces(build_traces(reports, noise.times),
                                       os.path.join(directory, cfg.output['traces']))
            return {'summary': summary_path, 'traces': traces_path}, summary

        artifacts, summary = _stage('reporting', emit)
        result.update(exit_status=exit_status, reports=reports, artifacts=artifacts, summary=summary)
        logger.info(f"Escenario completado: {len(reports)} informes, código de salida {exit_status}")
    except ScenarioError as e:
        result['error'] = e
    return result
