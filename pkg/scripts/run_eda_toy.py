"""Train toy EEND-EDA models (dot-product and TS-VAD matching) and compare them.

The dot model is trained on 1-3 speaker mixtures and scored on speaker
counting; the TS-VAD matcher is trained on 2-speaker mixtures.  Both are
scored on the same 2-speaker test set.

    python3 scripts/run_eda_toy.py --work /tmp/eda_toy
"""

import argparse
import logging

from diarkit.experiments import EdaToySpec, run_eda_suite, two_speaker_spec


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--work", required=True, help="dataset and output directory")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--dot-steps", type=int, default=EdaToySpec.steps)
    parser.add_argument("--tsvad-steps", type=int, default=two_speaker_spec().steps)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_eda_suite(args.work, EdaToySpec(steps=args.dot_steps),
                        two_speaker_spec(steps=args.tsvad_steps), jobs=args.jobs)
    print(f"dot count accuracy (1-3 speakers): {res.dot.count_accuracy:.2%}")
    print(f"{'matcher':>8} {'2-spk DER':>10} {'seconds':>8}")
    print(f"{'dot':>8} {res.dot_two_speaker.der:>10.2%} {res.dot.seconds:>8.0f}")
    print(f"{'tsvad':>8} {res.tsvad.der.der:>10.2%} {res.tsvad.seconds:>8.0f}")


if __name__ == "__main__":
    main()
