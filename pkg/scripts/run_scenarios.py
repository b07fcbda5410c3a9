"""Run the full pipeline over every corpus sample and print a summary table.

    python3 scripts/run_scenarios.py [--out out/] [--model corpus/default.model]
"""

import argparse
from pathlib import Path

from malverse.pipeline import analyze, write_outputs
from malverse.prototypes import default_registry
from malverse.triage import BayesModel

ROOT = Path(__file__).resolve().parent.parent


def fmt(spec):
    parts = [f"{s.function}->{list(s.returns)}" for s in spec.schedules]
    parts += [f"{p.function}<-{p.data.decode('latin-1')!r}" for p in spec.preloads]
    return ", ".join(parts) or "(empty)"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--corpus", default=ROOT / "corpus", type=Path)
    ap.add_argument("--model", default=ROOT / "corpus" / "default.model", type=Path)
    ap.add_argument("--out", default=ROOT / "out", type=Path)
    args = ap.parse_args()

    bayes = BayesModel.load(args.model)
    registry = default_registry()
    for src in sorted(args.corpus.glob("*.mvir")):
        res = analyze(src.read_text(), bayes, registry, sample=src.stem)
        write_outputs(res, args.out / src.stem, src.stem)
        print(f"{src.stem}: paths={res.report['paths_total']} "
              f"suspicious={len(res.report['suspicious'])} exit={res.exit_code}")
        for r in res.patches:
            kind = "full" if r.root_cause is None else f"root cause {r.root_cause.function}#{r.root_cause.seq}"
            print(f"    {r.name:28s} {kind:38s} {fmt(r.spec):50s} {r.verdict}")


if __name__ == "__main__":
    main()
