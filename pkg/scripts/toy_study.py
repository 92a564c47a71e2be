"""Ring coverage of the mean feature matching GAN against the vanilla GAN.

Trains both toy configs for each seed at a fixed budget and prints the
coverage table. Results are cached in results/toy_study.json.
"""

import argparse

from fmgan.apps.studies import toy_study


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--iterations", type=int, default=50_000)
    p.add_argument("--cache", default="results/toy_study.json")
    args = p.parse_args()

    res = toy_study(args.seeds, args.iterations, args.cache, verbose=True)
    print(f"\n{'seed':>4} {'fm_gan':>8} {'gan':>8}  fm_gan ahead")
    wins = 0
    for s, a, b in zip(args.seeds, res["fm_gan"], res["gan"]):
        ok = a["coverage"] >= 0.9 and a["coverage"] > b["coverage"]
        wins += ok
        print(f"{s:>4} {a['coverage']:>8.2f} {b['coverage']:>8.2f}  {'yes' if ok else 'no'}")
    print(f"fm_gan >= 0.9 and ahead in {wins}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
