#!/usr/bin/env python3
"""Solve exported LP models with HiGHS and compare against the plans' objectives.

Usage: check_lp_highs.py OUT_DIR [OUT_DIR ...]
Each OUT_DIR must hold model-milp.lp and plan-milp.txt written by
`shardplan plan --lp linearized`. Requires `pip install highspy`.
"""
import sys

import highspy


def plan_objective(path):
    with open(path) as f:
        for line in f:
            if line.startswith("objective "):
                return float(line.split()[1])
    raise ValueError(f"{path}: no objective line")


def solve(path):
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    for opt in ("primal_feasibility_tolerance", "dual_feasibility_tolerance", "mip_feasibility_tolerance"):
        h.setOptionValue(opt, 1e-10)
    h.setOptionValue("mip_rel_gap", 1e-9)
    h.setOptionValue("mip_abs_gap", 0.0)
    h.readModel(path)
    h.run()
    return h.getInfo().objective_function_value


def main(dirs):
    worst = 0.0
    for d in dirs:
        ours = plan_objective(f"{d}/plan-milp.txt")
        theirs = solve(f"{d}/model-milp.lp")
        rel = abs(ours - theirs) / max(abs(ours), abs(theirs))
        worst = max(worst, rel)
        print(f"{d}: shardplan {ours:.12e} highs {theirs:.12e} rel {rel:.2e}")
    print(f"worst relative difference {worst:.2e}")
    return 0 if worst <= 1e-6 else 1


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
