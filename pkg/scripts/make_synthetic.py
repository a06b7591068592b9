"""Write a synthetic corpus (manifest.csv + features/*.ftr) to a directory."""

import argparse

from nvchain.data import DEPENDENT_PAIR, generate_synthetic_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    ap.add_argument("--n-samples", type=int, default=400)
    ap.add_argument("--n-speakers", type=int, default=20)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--noise-emotions", nargs="*", default=[])
    args = ap.parse_args()
    ds = generate_synthetic_dataset(args.n_samples, args.n_speakers, args.dim, args.seed,
                                    out_dir=args.out_dir, noise_emotions=tuple(args.noise_emotions))
    print(f"wrote {len(ds.samples)} samples from {len(ds.manifest.speakers)} speakers to {args.out_dir}")
    print(f"dependent pair: {DEPENDENT_PAIR[1]} = g({DEPENDENT_PAIR[0]})")


if __name__ == "__main__":
    main()
