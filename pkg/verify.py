"""
Verificador de condiciones de optimalidad para ecuaciones de evolución estocásticas controladas
Command-line entry point: verify --config <path> [--paths P] [--steps N] [--seed S] [--out DIR]
"""
import argparse
import logging
import sys

from dotenv import load_dotenv

# Load environment variables from .env file (OPTCHECK_OUTPUT_DIR)
load_dotenv()

from core.reporting import format_summary_text
from core.scenarios import EXIT_ERROR, ScenarioError, apply_overrides, load_scenario, run_scenario

logger = logging.getLogger('verify')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='verify',
        description='Verifica condiciones necesarias de optimalidad para un control candidato')
    parser.add_argument('--config', required=True, help='archivo de escenario (JSON)')
    parser.add_argument('--paths', type=int, help='número de trayectorias P')
    parser.add_argument('--steps', type=int, help='número de pasos temporales N')
    parser.add_argument('--seed', type=int, help='semilla maestra')
    parser.add_argument('--out', help='directorio de salida')
    parser.add_argument('--workers', type=int, help='hilos para la simulación por bloques')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    parser.add_argument('--quiet', action='store_true', help='no imprimir el resumen en texto')
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )
    try:
        cfg = load_scenario(args.config)
        cfg = apply_overrides(cfg, paths=args.paths, steps=args.steps, seed=args.seed, out=args.out,
                              workers=args.workers)
    except ScenarioError as e:
        for message in e.errors:
            print(f"❌ {message}", file=sys.stderr)
        return EXIT_ERROR

    result = run_scenario(cfg)
    if result['error'] is not None:
        error = result['error']
        print(f"❌ Error en la etapa {error.stage}: {'; '.join(error.errors)}", file=sys.stderr)
        return EXIT_ERROR
    if not args.quiet:
        print(format_summary_text(result['summary']))
    return result['exit_status']


if __name__ == '__main__':
    sys.exit(main())
