"""PSF-VAE as the share of users with observed unfair items (c_r) varies."""
import argparse
import logging

from psfvae.experiments import check_chain, format_table, run_cr_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--values", default="0.1,0.3,0.5,0.9")
    ap.add_argument("--seeds", default="1,2,3,4,5")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    values = [float(v) for v in args.values.split(",")]
    res = run_cr_sweep(values, [int(s) for s in args.seeds.split(",")])
    print(format_table(res, "c_r"))
    trend = check_chain(res, values, "HiR@10")
    print(f"HiR@10 non-increasing in c_r: {'ok' if trend.passed else 'FAIL'} ({trend.describe()})")


if __name__ == "__main__":
    main()
