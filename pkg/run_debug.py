"""
Debug runner to catch all errors
"""
import logging
import sys
import traceback

from core.scenarios import load_scenario, run_scenario

DEFAULT_CONFIG = 'exports/templates/lq_optimum.json'

logging.basicConfig(level=logging.DEBUG, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')

try:
    path = sys.argv[1] if len(sys.argv) > 1 else DEFAULT_CONFIG
    print("=" * 60)
    print(f"Running scenario {path} with full error handling")
    print("=" * 60)
    result = run_scenario(load_scenario(path))
    if result['error'] is not None:
        raise result['error']
    print(f"Exit status: {result['exit_status']}")
    for report in result['reports']:
        print(f"  {report.condition_id}: {report.verdict}")
except Exception as e:
    print("=" * 60)
    print("FATAL ERROR:")
    print("=" * 60)
    print(f"Error: {e}")
    print("\nFull traceback:")
    traceback.print_exc()
    print("=" * 60)
    sys.exit(1)
