#!/usr/bin/env python3
"""Run the off/on control comparison over every bundled scenario fixture.

Usage: python3 scripts/compare_control_modes.py [--scenario-dir scenarios]
"""

import argparse
import json
import sys
from pathlib import Path

from mlsim.cli import compare_report
from mlsim.scenario import apply_overrides, parse_scenario, parse_scenario_dict


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--scenario-dir", default=Path(__file__).resolve().parent.parent / "scenarios"
    )
    args = parser.parse_args()

    fixtures = sorted(Path(args.scenario_dir).glob("*.json"))
    if not fixtures:
        print(f"no scenario files under {args.scenario_dir}", file=sys.stderr)
        return 1

    for path in fixtures:
        base = parse_scenario(path)
        off = parse_scenario_dict(apply_overrides(base.data, {"control": "false"}))
        on = parse_scenario_dict(apply_overrides(base.data, {"control": "true"}))
        report = compare_report(off, on)
        print(f"== {base.name} ==")
        print(f"verdict: {report['verdict']}")
        for mode in ("off", "on"):
            s = report[mode]
            print(
                f"  control={mode}: {s['tasks_delivered']}/{s['tasks_total']} delivered, "
                f"{s['deadlocks_detected']} deadlocks detected, "
                f"{s['deadlocks_resolved']} resolved, "
                f"stopped after {s['ticks_run']} ticks ({s['stop_reason']})"
            )
        print(json.dumps({"off": report["off"], "on": report["on"]}, indent=2, sort_keys=True))
        print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
