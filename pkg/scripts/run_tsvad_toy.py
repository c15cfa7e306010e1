"""Train the toy TS-VAD model on simulated conversations and report held-out DER.

    python3 scripts/run_tsvad_toy.py --work /tmp/tsvad_toy
"""

import argparse
import dataclasses
import logging

from diarkit.experiments import TsVadToySpec, run_tsvad_toy


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--work", required=True, help="dataset and output directory")
    parser.add_argument("--jobs", type=int, default=1)
    for f in dataclasses.fields(TsVadToySpec):
        parser.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    spec = TsVadToySpec(**{f.name: getattr(args, f.name) for f in dataclasses.fields(TsVadToySpec)})
    result = run_tsvad_toy(args.work, spec, jobs=args.jobs)
    print("oracle profiles")
    print(result.oracle.to_text())
    print("first pass (AHC) profiles")
    print(result.first_pass.to_text())
    print("timings", {k: round(v, 1) for k, v in result.timings.items()}, f"total {result.seconds:.0f} s")


if __name__ == "__main__":
    main()
