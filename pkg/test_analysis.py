"""
Smoke test of the verification pipeline, step by step, on the additive-noise LQ template
"""
import traceback

import numpy as np

from core.adjoint import check_transposition_identity, solve_first_adjoint, solve_second_adjoint
from core.conditions import first_order_integral, maximum_principle_gap, random_directions
from core.forward import NoiseEnsemble, evaluate_cost, simulate_pair
from core.oracles import lq_data_from_spec, riccati_solve
from core.reporting import build_summary, format_summary_text
from core.scenarios import build_problem, exit_status_for, load_scenario

print("="*60)
print("Testing verification flow step by step")
print("="*60)

try:
    # Test parameters
    config_path = 'exports/templates/lq_optimum.json'
    paths = 1024
    steps = 16

    print("\n1. Loading scenario...")
    cfg = load_scenario(config_path)
    print(f"   ✓ Family: {cfg.problem['family']}, checks: {len(cfg.checks)}")

    print("\n2. Building problem...")
    spec = build_problem(cfg)
    print(f"   ✓ n={spec.n}, m={spec.m}, d={spec.d}")

    print("\n3. Solving discrete Riccati...")
    sol = riccati_solve(lq_data_from_spec(spec), steps, spec.horizon)
    print(f"   ✓ Value at x0: {sol.value(spec.x0):.6f}")

    print("\n4. Simulating forward pair...")
    noise = NoiseEnsemble.generate(paths, steps, spec.m, spec.horizon, master_seed=42)
    xbar, ubar = simulate_pair(spec, sol.feedback(), noise)
    cost, stderr = evaluate_cost(spec, sol.feedback(), noise)
    print(f"   ✓ Simulated cost: {cost:.6f} ± {stderr:.2e}")

    print("\n5. Solving first adjoint...")
    adj = solve_first_adjoint(spec, xbar, ubar, noise)
    print(f"   ✓ |E P1_0|: {np.linalg.norm(adj.P1[:, 0].mean(axis=0)):.4f}")

    print("\n6. Solving second adjoint...")
    adj2 = solve_second_adjoint(spec, xbar, ubar, adj, noise)
    print(f"   ✓ P2_0 trace: {np.trace(adj2.P2[:, 0].mean(axis=0)):.4f}")

    print("\n7. Checking transposition identity...")
    stats = check_transposition_identity(spec, xbar, ubar, adj, noise, trials=8)
    print(f"   ✓ Max relative residual: {stats['max_residual']:.3e}")

    print("\n8. Evaluating first-order conditions...")
    reports = [first_order_integral(spec, xbar, ubar, adj, v).renamed(f'first_order_integral#{i}')
               for i, v in enumerate(random_directions(spec, ubar, 3, seed=0))]
    reports.append(maximum_principle_gap(spec, xbar, ubar, adj))
    for report in reports:
        print(f"   ✓ {report.condition_id}: {report.verdict}")

    print("\n9. Building summary...")
    status = exit_status_for(reports)
    summary = build_summary({'family': 'lq', 'n': spec.n, 'm': spec.m, 'd': spec.d, 'paths': paths,
                             'steps': steps, 'seed': 42}, reports, status)
    print(format_summary_text(summary))

    print("\n" + "="*60)
    print("✓ ALL TESTS PASSED!" if status == 0 else f"✗ EXIT STATUS {status}")
    print("="*60)

except Exception as e:
    print("\n" + "="*60)
    print("✗ ERROR FOUND:")
    print("="*60)
    print(f"\nError: {e}")
    print(f"\nType: {type(e).__name__}")
    print("\nFull traceback:")
    traceback.print_exc()
    print("="*60)
