"""Run one or more simulation scenarios and write JSON results and summary CSVs.

Usage: python scripts/run_scenario.py scripts/scenarios/attenuation.json [...] --out results/
"""
import argparse
import json
import pathlib

from frailtyreg.simulate import run_scenario


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("scenarios", nargs="+", help="scenario JSON files")
    p.add_argument("--out", default="results")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--reps", type=int, default=None, help="override the replicate count (pilot runs)")
    args = p.parse_args(argv)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in map(pathlib.Path, args.scenarios):
        spec = json.loads(path.read_text())
        for key in ("seed", "reps"):
            if getattr(args, key) is not None:
                spec[key] = getattr(args, key)
        res = run_scenario(spec)
        res.to_json(out / f"{path.stem}.json")
        res.summary_csv(out / f"{path.stem}_summary.csv")
        print(f"{path.stem}: {res.reps} reps, {res.failures} failures, {res.seconds:.1f}s")
        print(json.dumps(res.summary, indent=2))


if __name__ == "__main__":
    main()
