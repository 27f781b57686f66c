"""
Check a finished run against the desk-scale acceptance thresholds.

    python tools/check_acceptance.py runs/desk-classwise-linf
    python tools/check_acceptance.py runs/partial-leakage

Exit code 0 when every applicable check passes.
"""
import argparse
import json
import sys
from pathlib import Path

MIN_PROTECTION_DROP = 40.0
MAX_GAP_TO_CLEAN = 5.0
MIN_LEAKED_IMPROVEMENT = 20.0


def _best_for(report, pid):
    rows = [b for b in report.get('best', []) if b['protection'] == pid and b.get('accuracy_mean') is not None]
    return max(rows, key=lambda b: b['accuracy_mean']) if rows else None


def check_report(report):
    """List of (check, passed, detail) for every check the report has data for."""
    results = []
    clean = (report['baselines'].get('clean') or {}).get('accuracy_mean')
    for pid, entry in sorted(report['baselines']['protected'].items()):
        if not entry or clean is None:
            continue
        protected = entry['accuracy_mean']
        results.append((f"{pid}: protection drop >= {MIN_PROTECTION_DROP:.0f}",
                        clean - protected >= MIN_PROTECTION_DROP,
                        f"clean {clean:.2f}% -> protected {protected:.2f}%"))
        best = _best_for(report, pid)
        if best is None:
            continue
        purified = best['accuracy_mean']
        results.append((f"{pid}: purified within {MAX_GAP_TO_CLEAN:.0f} of clean",
                        clean - purified <= MAX_GAP_TO_CLEAN,
                        f"purified {purified:.2f}% ({best['label']})"))
        results.append((f"{pid}: protected < purified", protected < purified,
                        f"{protected:.2f}% < {purified:.2f}%"))

        fid = report.get('fidelity', {})
        before, after = fid.get(f"protected/{pid}"), fid.get(best['label'])
        if before and after:
            for metric in ('psnr', 'ssim'):
                b, a = before[metric]['mean'], after[metric]['mean']
                results.append((f"{pid}: mean {metric.upper()} improves", a > b, f"{b:.4f} -> {a:.4f}"))

    partial = report.get('partial_leakage')
    if partial:
        for run in partial['runs']:
            imp = run['improvement']
            if imp['leaked'] is None or run['gap'] is None:
                continue
            results.append((f"partial leakage: leaked classes +{MIN_LEAKED_IMPROVEMENT:.0f}",
                            imp['leaked'] >= MIN_LEAKED_IMPROVEMENT,
                            f"leaked +{imp['leaked']:.2f}, non-leaked +{imp['non_leaked']:.2f}"))
            results.append(("partial leakage: positive gap", run['gap'] > 0, f"gap {run['gap']:.2f}"))

    if report.get('failures'):
        results.append(("no failed stages", False, f"{len(report['failures'])} failed"))
    return results


def main():
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument('run_dir', type=Path)
    args = parser.parse_args()

    report_file = args.run_dir / 'report.json'
    if not report_file.exists():
        print(f"❌ {report_file} not found")
        sys.exit(2)
    report = json.loads(report_file.read_text(encoding='utf-8'))

    print("=" * 70)
    print(f"ACCEPTANCE: {report['experiment']} ({report['config_hash'][:12]})")
    print("=" * 70)
    results = check_report(report)
    for name, passed, detail in results:
        print(f"{'✅' if passed else '❌'} {name:<50} {detail}")
    if not results:
        print("⚠️  Nothing to check in this report")
    failed = sum(1 for _, passed, _ in results if not passed)
    print("=" * 70)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    sys.exit(0 if results and not failed else 1)


if __name__ == "__main__":
    main()
