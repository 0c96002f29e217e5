"""Desk-scale comparison of all seven recommenders (Recall/NDCG/HiR over seeds)."""
import argparse
import logging

from psfvae.experiments import TABLE_MODELS, check_chain, format_table, run_models

HIR_ORDER = ("cond_vae", "multi_vae", "psf_vae", "fair_adv")
RECALL_ORDER = ("cond_vae", "psf_vae", "multi_vae", "fair_adv")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="1,2,3,4,5")
    ap.add_argument("--models", default=",".join(TABLE_MODELS))
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    res = run_models(args.models.split(","), [int(s) for s in args.seeds.split(",")])
    print(format_table(res))
    print(f"total training time {res.seconds:.0f}s")
    if all(k in res.values for k in HIR_ORDER):
        hir = check_chain(res, HIR_ORDER, "HiR@10")
        rec = check_chain(res, RECALL_ORDER, "R@20")
        print(f"HiR@10 {' >= '.join(HIR_ORDER)}: {'ok' if hir.passed else 'FAIL'} ({hir.describe()})")
        print(f"R@20 {' >= '.join(RECALL_ORDER)}: {'ok' if rec.passed else 'FAIL'} ({rec.describe()})")


if __name__ == "__main__":
    main()
