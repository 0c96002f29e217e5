"""PSF-VAE against its ablated variants (nWSL, nADV, Mask, nLat)."""
import argparse
import logging

from psfvae.experiments import ABLATION_MODELS, check_dominates, format_table, run_models


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="1,2,3,4,5")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    res = run_models(ABLATION_MODELS, [int(s) for s in args.seeds.split(",")])
    print(format_table(res))
    fair = check_dominates(res, "psf_vae", ("psf_vae_nwsl", "psf_vae_nadv", "psf_vae_mask"), "HiR@10")
    print(f"PSF-VAE lowest HiR@10: {'ok' if fair.passed else 'FAIL'} ({fair.describe()})")
    means = {k: res.stats(k, "R@20")[0] for k in ABLATION_MODELS}
    worst = min(means, key=means.get)
    print(f"worst R@20: {worst} ({means[worst]:.4f})")


if __name__ == "__main__":
    main()
